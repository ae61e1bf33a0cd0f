"""Minimal reverse-mode autodiff on numpy arrays.

A :class:`Tensor` is a node in a dynamically built computation graph: it holds
a numpy array, an optional gradient buffer and a closure that scatters an
incoming gradient to its parents. Ops live in :mod:`graftnet.layers`; this
module only provides the node type, trainable :class:`Parameter` leaves and
the :func:`backward` pass.

Everything runs in float32 by default. Gradient checking builds graphs in
float64 by passing float64 arrays in; ops preserve the dtype they are given.
"""

import numpy as np

from .validation import as_float_array, ensure_finite


class Tensor:
    """A value in the computation graph.

    ``requires_grad`` propagates from parents; subgraphs whose inputs are all
    frozen never record a tape, so frozen trunk prefixes cost no backward
    memory or time.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = as_float_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """A view of the same data with no graph attached."""
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable leaf.

    Frozen parameters (``trainable=False``) take no part in the tape: their
    gradient buffer stays all-zero and optimizers skip them, so their values
    are bit-stable under any number of training steps.
    """

    __slots__ = ("name",)

    def __init__(self, data, name, trainable=True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def trainable(self):
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.requires_grad = bool(flag)

    def grad_array(self):
        """Gradient as an array; zeros if nothing was accumulated."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


def make_op(out_data, parents, backward_fn):
    """Wrap an op result, recording a tape entry only if some parent needs it."""
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out_data)
    return Tensor(out_data, requires_grad=True, parents=parents, backward_fn=backward_fn)


def backward(loss):
    """Reverse-mode pass from a scalar loss.

    Populates ``.grad`` on every reachable tensor with ``requires_grad``;
    frozen parameters are never touched. Deterministic given an identical
    forward graph.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward() expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._backward_fn is None:
        raise RuntimeError("backward() called on a tensor with no computation graph; run a forward pass first")

    # Iterative topological order (graphs are shallow but recursion limits are cheap to avoid).
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


def as_tensor(x, name="input", require_finite=True):
    """Coerce arrays/Tensors to a graph leaf, validating finiteness."""
    if isinstance(x, Tensor):
        if require_finite:
            ensure_finite(x.data, name)
        return x
    arr = as_float_array(x, name)
    if require_finite:
        ensure_finite(arr, name)
    return Tensor(arr)
