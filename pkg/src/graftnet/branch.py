"""Per-attribute branch fine-tuning from trunk initialization.

A branch training run builds a model of the first ``end_block`` backbone
blocks: blocks [0, graft_point) come from the trunk and stay frozen (weights
and batch-norm statistics), blocks [graft_point, end_block) are trained
together with a fresh pooled head. The result detaches into a Branch
artifact stamped with the trunk's fingerprint.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import layers
from .backbone import POOLINGS, build_backbone, detach_branch, graft, set_trainable
from .optim import SGD
from .tensor import backward

INIT_MODES = ("trunk", "random")


@dataclass
class BranchSpec:
    attribute: str
    graft_point: int
    end_block: int
    pooling: str = "gap"
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    init: str = "trunk"  # "random" exists for from-scratch comparisons

    def __post_init__(self):
        if not 0 <= self.graft_point <= self.end_block:
            raise ValueError(
                f"need 0 <= graft_point <= end_block, got ({self.graft_point}, {self.end_block})"
            )
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}; expected one of {POOLINGS}")
        if self.init not in INIT_MODES:
            raise ValueError(f"unknown init {self.init!r}; expected one of {INIT_MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def build_branch_model(trunk, spec, class_names):
    """A trainable model of blocks [0, end_block): frozen trunk prefix,
    trunk- or randomly-initialized open blocks, fresh head."""
    if spec.graft_point > trunk.depth:
        raise ValueError(f"graft_point {spec.graft_point} exceeds trunk depth {trunk.depth}")
    if spec.end_block < 1:
        raise ValueError("end_block must be >= 1: a branch needs at least one block")
    full = trunk.config
    model = build_backbone(full.truncated(spec.end_block), seed=spec.seed)
    load_upto = spec.graft_point if spec.init == "random" else min(spec.end_block, trunk.depth)
    for i in range(load_upto):
        for unit in model.blocks[i]:
            unit.load_arrays(trunk.params)
    set_trainable(model, freeze_depth=spec.graft_point)
    model.add_head(spec.attribute, class_names, pooling=spec.pooling)
    return model


def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_branch(trunk, dataset, spec):
    """Fine-tune one attribute's branch on its sub-dataset: (Branch, log)."""
    if dataset.train_size == 0:
        raise ValueError(f"sub-dataset {dataset.attribute!r} has no training samples")
    model = build_branch_model(trunk, spec, dataset.class_names)
    optimizer = SGD(lr=spec.learning_rate, momentum=spec.momentum)
    params = [p for p in model.block_parameters() if p.trainable] + model.head_parameters(spec.attribute)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2]))
    records = []
    for epoch in range(spec.epochs):
        losses, hits, seen = [], 0, 0
        for idx in _minibatches(dataset.train_size, spec.batch_size, rng):
            x, y = dataset.x_train[idx], dataset.y_train[idx]
            feats = model.forward_blocks(x, 0, spec.end_block, mode="train")
            logits = model.forward_head(feats, spec.attribute, mode="train")
            loss = layers.softmax_cross_entropy(logits, y)
            optimizer.zero_grad(params)
            backward(loss)
            optimizer.step(params)
            value = float(loss.item())
            if not np.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss in epoch {epoch} on attribute {dataset.attribute!r}: {value}"
                )
            losses.append(value)
            hits += int(np.sum(np.argmax(logits.data, axis=1) == y))
            seen += len(y)
        records.append({"epoch": epoch, "loss": float(np.mean(losses)), "acc": hits / seen})
    branch = detach_branch(
        model, spec.graft_point, spec.end_block, spec.attribute, trunk_fingerprint=trunk.fingerprint
    )
    log = {"epochs": records, "spec": spec.__dict__.copy(), "trunk_fingerprint": trunk.fingerprint}
    return branch, log


def score_samples(trunk, branch, images):
    """Class probability rows for a batch, via the composed trunk+branch."""
    model = graft(trunk, [branch])
    return model.infer_batch(np.asarray(images))[branch.attribute]


def write_branch_log(log, path):
    with open(path, "w") as f:
        json.dump(log, f, indent=1, sort_keys=True)
        f.write("\n")
