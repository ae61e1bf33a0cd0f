"""Block-structured backbone: construction, freezing, trunk export, grafting.

The backbone is a configurable stack of blocks, each ``conv_layers_per_block``
conv(3x3, pad 1) + batch norm + ReLU units; blocks listed in
``downsample_blocks`` use stride 2 in their first conv. Grafting happens at
block boundaries only.

Parameter names are namespaced so weight files stay flat:

    block{i}/conv{j}/w    block{i}/conv{j}/b
    block{i}/bn{j}/gamma  block{i}/bn{j}/beta
    block{i}/bn{j}/running_mean  block{i}/bn{j}/running_var   (buffers)
    head/{attribute}/w    head/{attribute}/b
"""

import hashlib
import re
from dataclasses import dataclass, field, fields

import numpy as np

from . import layers
from .tensor import Parameter, as_tensor
from .validation import check_index, ensure_finite

KERNEL_SIZE = 3
PADDING = 1

_BLOCK_NAME = re.compile(r"^block(\d+)/")
_ATTRIBUTE_NAME = re.compile(r"^[A-Za-z0-9_.\-]+$")

POOLINGS = ("gap", "bilinear")


def pooled_dim(channels, pooling):
    if pooling == "gap":
        return channels
    if pooling == "bilinear":
        return channels * channels
    raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class BackboneConfig:
    """Shape of the block stack; defaults mirror an 11-block backbone."""

    block_count: int = 11
    widths: tuple = (32, 32, 64, 64, 128, 128, 192, 192, 256, 256, 320)
    downsample_blocks: frozenset = frozenset({1, 3, 5, 7, 9})
    input_shape: tuple = (3, 32, 32)
    conv_layers_per_block: int = 2

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "downsample_blocks", frozenset(int(i) for i in self.downsample_blocks))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.block_count < 1:
            raise ValueError(f"block_count must be positive, got {self.block_count}")
        if len(self.widths) != self.block_count:
            raise ValueError(
                f"widths has {len(self.widths)} entries but block_count is {self.block_count}"
            )
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if any(not 0 <= i < self.block_count for i in self.downsample_blocks):
            raise ValueError(
                f"downsample block indices {sorted(self.downsample_blocks)} out of range for {self.block_count} blocks"
            )
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be (C, H, W) of positive ints, got {self.input_shape}")
        if self.conv_layers_per_block < 1:
            raise ValueError(f"conv_layers_per_block must be positive, got {self.conv_layers_per_block}")

    def block_stride(self, i):
        return 2 if i in self.downsample_blocks else 1

    def block_in_channels(self, i):
        return self.input_shape[0] if i == 0 else self.widths[i - 1]

    def truncated(self, end_block):
        """Config of the same stack cut to the first ``end_block`` blocks."""
        check_index(end_block, self.block_count, "end_block")
        if end_block == 0:
            raise ValueError("cannot truncate a backbone to zero blocks")
        return BackboneConfig(
            block_count=end_block,
            widths=self.widths[:end_block],
            downsample_blocks=frozenset(i for i in self.downsample_blocks if i < end_block),
            input_shape=self.input_shape,
            conv_layers_per_block=self.conv_layers_per_block,
        )

    def to_dict(self):
        return {
            "block_count": self.block_count,
            "widths": list(self.widths),
            "downsample_blocks": sorted(self.downsample_blocks),
            "input_shape": list(self.input_shape),
            "conv_layers_per_block": self.conv_layers_per_block,
        }

    @classmethod
    def from_dict(cls, d):
        """Build from a (possibly partial) mapping; omitted keys keep their
        defaults, unknown keys are rejected rather than silently dropped."""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown backbone config keys {unknown}; expected a subset of {sorted(known)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# runnable pieces


class ConvUnit:
    """conv(3x3, pad 1) + batch norm + ReLU."""

    def __init__(self, name, c_in, c_out, stride, rng=None, dtype=np.float32):
        if rng is not None:
            w = layers.he_uniform(rng, (c_out, c_in, KERNEL_SIZE, KERNEL_SIZE), fan_in=c_in * KERNEL_SIZE * KERNEL_SIZE, dtype=dtype)
        else:
            w = np.zeros((c_out, c_in, KERNEL_SIZE, KERNEL_SIZE), dtype=dtype)
        self.conv_w = Parameter(w, name=f"{name}/w")
        self.conv_b = Parameter(np.zeros(c_out, dtype=dtype), name=f"{name}/b")
        self.bn = layers.BatchNormState(c_out, name=name.replace("conv", "bn"))
        self.stride = stride

    def forward(self, x, mode):
        y = layers.conv2d(x, self.conv_w, self.conv_b, stride=self.stride, padding=PADDING)
        y = layers.batch_norm(y, self.bn, mode=mode)
        return layers.relu(y)

    def parameters(self):
        return [self.conv_w, self.conv_b, self.bn.gamma, self.bn.beta]

    def set_trainable(self, flag):
        for p in self.parameters():
            p.trainable = flag
        self.bn.stats_frozen = not flag

    def named_arrays(self):
        """All weights and buffers, keyed by their global names."""
        out = {
            self.conv_w.name: self.conv_w.data,
            self.conv_b.name: self.conv_b.data,
            self.bn.gamma.name: self.bn.gamma.data,
            self.bn.beta.name: self.bn.beta.data,
            f"{self.bn.name}/running_mean": self.bn.running_mean,
            f"{self.bn.name}/running_var": self.bn.running_var,
        }
        return out

    def load_arrays(self, arrays):
        for p in (self.conv_w, self.conv_b, self.bn.gamma, self.bn.beta):
            src = arrays[p.name]
            if src.shape != p.data.shape:
                raise ValueError(f"{p.name}: stored shape {src.shape} does not match model shape {p.data.shape}")
            p.data = src.astype(p.data.dtype).copy()
        self.bn.running_mean = arrays[f"{self.bn.name}/running_mean"].astype(np.float32).copy()
        self.bn.running_var = arrays[f"{self.bn.name}/running_var"].astype(np.float32).copy()


class Head:
    """Per-attribute classifier: pooling + dense layer."""

    def __init__(self, attribute, class_names, pooling, in_channels, rng, dtype=np.float32):
        if pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")
        if len(class_names) not in (2, 3):
            raise ValueError(f"head {attribute!r}: need 2 or 3 classes, got {list(class_names)}")
        d = pooled_dim(in_channels, pooling)
        k = len(class_names)
        self.attribute = attribute
        self.class_names = list(class_names)
        self.pooling = pooling
        self.w = Parameter(layers.he_uniform(rng, (k, d), fan_in=d, dtype=dtype), name=f"head/{attribute}/w")
        self.b = Parameter(np.zeros(k, dtype=dtype), name=f"head/{attribute}/b")

    def forward(self, features, mode):
        pooled = layers.global_avg_pool(features) if self.pooling == "gap" else layers.bilinear_pool(features)
        return layers.dense(pooled, self.w, self.b)

    def parameters(self):
        return [self.w, self.b]


def _build_block(config, i, rng=None, dtype=np.float32):
    units = []
    c_in = config.block_in_channels(i)
    for j in range(config.conv_layers_per_block):
        stride = config.block_stride(i) if j == 0 else 1
        units.append(ConvUnit(f"block{i}/conv{j}", c_in, config.widths[i], stride, rng=rng, dtype=dtype))
        c_in = config.widths[i]
    return units


class BackboneModel:
    """A block stack with per-attribute heads attached at its last block."""

    def __init__(self, config, seed):
        self.config = config
        self.seed = seed
        self._seed_seq = np.random.SeedSequence(seed)
        rng = np.random.default_rng(self._seed_seq.spawn(1)[0])
        self.blocks = [_build_block(config, i, rng=rng) for i in range(config.block_count)]
        self.heads = {}
        self.attribute_order = []  # head registration order; index = attribute id
        self.block_evals = 0

    # -- structure ----------------------------------------------------------

    def add_head(self, attribute, class_names, pooling="gap"):
        if attribute in self.heads:
            raise ValueError(f"head {attribute!r} already exists")
        rng = np.random.default_rng(self._seed_seq.spawn(1)[0])
        head = Head(attribute, class_names, pooling, in_channels=self.config.widths[-1], rng=rng)
        self.heads[attribute] = head
        self.attribute_order.append(attribute)
        return head

    def attribute_by_id(self, attribute_id):
        if not 0 <= attribute_id < len(self.attribute_order):
            raise KeyError(
                f"unknown attribute id {attribute_id}; registered ids are 0..{len(self.attribute_order) - 1}"
            )
        return self.attribute_order[attribute_id]

    def block_parameters(self, start=0, end=None):
        end = self.config.block_count if end is None else end
        params = []
        for block in self.blocks[start:end]:
            for unit in block:
                params.extend(unit.parameters())
        return params

    def head_parameters(self, attribute=None):
        if attribute is not None:
            if attribute not in self.heads:
                raise KeyError(f"no head named {attribute!r}; have {sorted(self.heads)}")
            return self.heads[attribute].parameters()
        params = []
        for head in self.heads.values():
            params.extend(head.parameters())
        return params

    def parameters(self):
        return self.block_parameters() + self.head_parameters()

    def named_arrays(self, start=0, end=None):
        end = self.config.block_count if end is None else end
        out = {}
        for block in self.blocks[start:end]:
            for unit in block:
                out.update(unit.named_arrays())
        return out

    # -- forward ------------------------------------------------------------

    def forward_blocks(self, x, start, end, mode="infer"):
        """Activations after blocks [start, end) applied to ``x``."""
        check_index(start, self.config.block_count, "start block")
        check_index(end, self.config.block_count, "end block")
        if start > end:
            raise ValueError(f"start block {start} > end block {end}")
        t = as_tensor(x, "backbone input")
        for block in self.blocks[start:end]:
            for unit in block:
                t = unit.forward(t, mode)
            self.block_evals += 1
        return t

    def forward_head(self, features, attribute, mode="infer"):
        if attribute not in self.heads:
            raise KeyError(f"no head named {attribute!r}; have {sorted(self.heads)}")
        return self.heads[attribute].forward(features, mode)


def build_backbone(config, seed=0):
    """Deterministically initialized backbone (He-uniform conv, BN gamma=1 beta=0)."""
    return BackboneModel(config, seed)


def forward_features(model, x, upto, mode="infer"):
    """Activations after blocks [0, upto); ``upto=0`` returns the input unchanged."""
    check_index(upto, model.config.block_count, "upto")
    return model.forward_blocks(x, 0, upto, mode=mode)


def set_trainable(model, freeze_depth):
    """Freeze blocks [0, freeze_depth) entirely (weights, BN affine and BN
    running stats); everything after, and all heads, become trainable."""
    check_index(freeze_depth, model.config.block_count, "freeze_depth")
    for i, block in enumerate(model.blocks):
        for unit in block:
            unit.set_trainable(i >= freeze_depth)
    for head in model.heads.values():
        for p in head.parameters():
            p.trainable = True


# ---------------------------------------------------------------------------
# trunk / branch artifacts


def _canonical_bytes(params):
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h


def weights_fingerprint(params):
    """64-bit hex digest over the canonical serialization of a name->array map."""
    return _canonical_bytes(params).hexdigest()[:16]


@dataclass
class TrunkWeights:
    """Conv+BN weights of blocks [0, depth): the shareable pretraining artifact."""

    depth: int
    params: dict
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.params:
            m = _BLOCK_NAME.match(name)
            if m is None:
                raise ValueError(f"trunk weights may only contain block parameters, got {name!r}")
            if int(m.group(1)) >= self.depth:
                raise ValueError(f"{name!r} is outside trunk depth {self.depth}")
        self._fingerprint = weights_fingerprint(self.params)

    @property
    def fingerprint(self):
        return self._fingerprint

    @property
    def config(self):
        return BackboneConfig.from_dict(self.provenance["config"])


def export_trunk(model, depth, extra_provenance=None):
    """Copy conv+BN weights (and BN running stats) of blocks [0, depth).

    Head parameters are never included.
    """
    check_index(depth, model.config.block_count, "depth")
    params = {k: v.copy() for k, v in model.named_arrays(0, depth).items()}
    provenance = {"seed": model.seed, "config": model.config.to_dict(), "depth": depth}
    if extra_provenance:
        provenance.update(extra_provenance)
    return TrunkWeights(depth=depth, params=params, provenance=provenance)


@dataclass
class Branch:
    """One attribute's trainable suffix: open blocks [g, e) plus pooled head."""

    attribute: str
    graft_point: int
    end_block: int
    params: dict
    pooling: str
    head_w: np.ndarray
    head_b: np.ndarray
    class_names: list
    trunk_fingerprint: str

    def __post_init__(self):
        if not _ATTRIBUTE_NAME.match(self.attribute):
            raise ValueError(
                f"attribute name {self.attribute!r} must be a non-empty [A-Za-z0-9_.-] identifier"
            )
        if not 0 <= self.graft_point <= self.end_block:
            raise ValueError(
                f"branch {self.attribute!r}: need 0 <= graft_point <= end_block, got ({self.graft_point}, {self.end_block})"
            )
        if len(self.class_names) not in (2, 3):
            raise ValueError(f"branch {self.attribute!r}: need 2 or 3 classes, got {self.class_names}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"branch {self.attribute!r}: unknown pooling {self.pooling!r}")
        if self.head_w.shape[0] != len(self.class_names):
            raise ValueError(
                f"branch {self.attribute!r}: head rows {self.head_w.shape[0]} != class count {len(self.class_names)}"
            )
        for name in self.params:
            m = _BLOCK_NAME.match(name)
            if m is None or not self.graft_point <= int(m.group(1)) < self.end_block:
                raise ValueError(
                    f"branch {self.attribute!r}: parameter {name!r} outside open range [{self.graft_point}, {self.end_block})"
                )


def detach_branch(model, graft_point, end_block, attribute, trunk_fingerprint=None):
    """Copy blocks [graft_point, end_block) and the attribute head out of a
    trained model.

    ``trunk_fingerprint`` stamps which trunk the branch expects at graft time;
    by default it is the fingerprint of the model's own prefix [0, graft_point).
    """
    check_index(graft_point, model.config.block_count, "graft_point")
    check_index(end_block, model.config.block_count, "end_block")
    if graft_point > end_block:
        raise ValueError(f"graft_point {graft_point} > end_block {end_block}")
    if attribute not in model.heads:
        raise ValueError(f"model has no head for attribute {attribute!r}; have {sorted(model.heads)}")
    head = model.heads[attribute]
    expected = pooled_dim(model.config.widths[end_block - 1] if end_block else model.config.input_shape[0], head.pooling)
    if head.w.data.shape[1] != expected:
        raise ValueError(
            f"branch {attribute!r}: head expects {head.w.data.shape[1]} features but "
            f"{head.pooling} pooling at block {end_block} yields {expected}"
        )
    if trunk_fingerprint is None:
        trunk_fingerprint = weights_fingerprint(model.named_arrays(0, graft_point))
    return Branch(
        attribute=attribute,
        graft_point=graft_point,
        end_block=end_block,
        params={k: v.copy() for k, v in model.named_arrays(graft_point, end_block).items()},
        pooling=head.pooling,
        head_w=head.w.data.copy(),
        head_b=head.b.data.copy(),
        class_names=list(head.class_names),
        trunk_fingerprint=trunk_fingerprint,
    )


class FingerprintMismatch(ValueError):
    pass


def load_trunk_blocks(trunk):
    """Runnable frozen blocks reconstructed from a trunk artifact."""
    blocks = [_build_block(trunk.config, i) for i in range(trunk.depth)]
    for block in blocks:
        for unit in block:
            unit.load_arrays(trunk.params)
            unit.set_trainable(False)
    return blocks


class GraftedModel:
    """Immutable composite of a trunk and per-attribute branches.

    Inference shares trunk computation: trunk blocks run at most once per
    input regardless of how many branches consume them. ``trunk_block_evals``
    and ``branch_block_evals`` count block executions per forward call for
    instrumentation.
    """

    def __init__(self, trunk, branches, allow_fingerprint_mismatch=False):
        self.trunk = trunk
        self.config = trunk.config
        if trunk.depth > self.config.block_count:
            raise ValueError(f"trunk depth {trunk.depth} exceeds config block count {self.config.block_count}")
        self.fingerprint_overrides = set()
        self.branches = {}
        self._trunk_blocks = load_trunk_blocks(trunk)
        self._runners = {}
        self.trunk_block_evals = 0
        self.branch_block_evals = 0
        for br in branches:
            self._attach(br, allow_fingerprint_mismatch)

    def _attach(self, branch, allow_fingerprint_mismatch):
        if branch.attribute in self.branches:
            raise ValueError(f"duplicate branch for attribute {branch.attribute!r}")
        if branch.trunk_fingerprint != self.trunk.fingerprint:
            if not allow_fingerprint_mismatch:
                raise FingerprintMismatch(
                    f"branch {branch.attribute!r} was trained against trunk {branch.trunk_fingerprint} "
                    f"but this trunk is {self.trunk.fingerprint}"
                )
            self.fingerprint_overrides.add(branch.attribute)
        if branch.graft_point > self.trunk.depth:
            raise ValueError(
                f"branch {branch.attribute!r} grafts at block {branch.graft_point} "
                f"but trunk only has depth {self.trunk.depth}"
            )
        if branch.end_block > self.config.block_count:
            raise ValueError(
                f"branch {branch.attribute!r} ends at block {branch.end_block} "
                f"but the backbone has {self.config.block_count} blocks"
            )
        open_blocks = [_build_block(self.config, i) for i in range(branch.graft_point, branch.end_block)]
        for block in open_blocks:
            for unit in block:
                unit.load_arrays(branch.params)
                unit.set_trainable(False)
        c_end = self.config.widths[branch.end_block - 1] if branch.end_block else self.config.input_shape[0]
        expected = pooled_dim(c_end, branch.pooling)
        if branch.head_w.shape[1] != expected:
            raise ValueError(
                f"branch {branch.attribute!r}: head expects {branch.head_w.shape[1]} features but "
                f"{branch.pooling} pooling at block {branch.end_block} yields {expected}"
            )
        self.branches[branch.attribute] = branch
        self._runners[branch.attribute] = open_blocks

    @property
    def attributes(self):
        return sorted(self.branches)

    def reset_counters(self):
        self.trunk_block_evals = 0
        self.branch_block_evals = 0

    def infer_batch(self, images, attributes=None):
        """Probabilities per attribute for a batch (N, C, H, W)."""
        if attributes is None:
            wanted = self.attributes
        else:
            unknown = [a for a in attributes if a not in self.branches]
            if unknown:
                raise KeyError(f"unknown attribute(s) {unknown}; known: {self.attributes}")
            wanted = list(attributes)
        if not wanted:
            return {}
        x = as_tensor(images, "inference input")
        if x.data.ndim != 4:
            raise ValueError(f"inference input must be (N, C, H, W), got shape {x.shape}")

        depths = sorted({self.branches[a].graft_point for a in wanted})
        cache = {}
        act = x
        if 0 in depths:
            cache[0] = act
        for i in range(max(depths) if depths else 0):
            for unit in self._trunk_blocks[i]:
                act = unit.forward(act, "infer")
            self.trunk_block_evals += 1
            if i + 1 in depths:
                cache[i + 1] = act

        scores = {}
        for attr in wanted:
            br = self.branches[attr]
            t = cache[br.graft_point]
            for block in self._runners[attr]:
                for unit in block:
                    t = unit.forward(t, "infer")
                self.branch_block_evals += 1
            pooled = layers.global_avg_pool(t) if br.pooling == "gap" else layers.bilinear_pool(t)
            logits = pooled.data @ br.head_w.T + br.head_b
            scores[attr] = layers.softmax(logits)
        return scores

    def infer(self, image, attributes=None):
        """Probabilities per attribute for one (C, H, W) image."""
        img = np.asarray(image)
        if img.ndim != 3:
            raise ValueError(f"infer expects a single (C, H, W) image, got shape {img.shape}")
        batch = self.infer_batch(img[None], attributes)
        return {attr: probs[0] for attr, probs in batch.items()}


def graft(trunk, branches, allow_fingerprint_mismatch=False):
    """Compose a trunk with branches into an immutable inference model."""
    return GraftedModel(trunk, list(branches), allow_fingerprint_mismatch=allow_fingerprint_mismatch)
