"""Trunk pretraining over interleaved single-attribute batches.

Every training step draws one batch from exactly one sub-dataset and routes
it through the shared blocks into that attribute's head alone, so the other
heads receive no gradient and stay bit-identical. The shared blocks see
every attribute's data over time, which is what makes the exported trunk
generic.
"""

import json
from dataclasses import dataclass, field, fields

import numpy as np

from . import layers
from .backbone import BackboneConfig, build_backbone, export_trunk
from .optim import SGD
from .tensor import backward

SAMPLING_MODES = ("uniform-over-datasets", "size-proportional")


@dataclass
class PretrainConfig:
    steps: int = 600
    batch_size: int = 32
    learning_rate: object = 0.05  # float, or [[start_step, lr], ...] piecewise-constant
    momentum: float = 0.9
    seed: int = 0
    sampling: str = "uniform-over-datasets"
    trunk_depth: int = None  # export depth; defaults to the full block count
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.sampling!r}; expected one of {SAMPLING_MODES}")
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig.from_dict(self.backbone)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            doc = json.load(f)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"{path}: unknown pretraining config keys {unknown}; expected a subset of {sorted(known)}")
        if "backbone" in doc:
            doc["backbone"] = BackboneConfig.from_dict(doc["backbone"])
        return cls(**doc)


def lr_at(schedule, step):
    """Learning rate at a step: a bare float is constant; a list of
    [start_step, lr] pairs is piecewise-constant from each start."""
    if isinstance(schedule, (int, float)):
        return float(schedule)
    lr = None
    for start, value in sorted(schedule):
        if step >= start:
            lr = float(value)
    if lr is None:
        raise ValueError(f"schedule {schedule!r} has no entry covering step {step}")
    return lr


# ---------------------------------------------------------------------------
# retrain policy


@dataclass
class RetrainPolicy:
    """When to fold accumulated labels back into a trunk retrain."""

    threshold: int = 5
    labels_since_last_retrain: int = 0

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError(f"threshold must be >= 1, got {self.threshold}")
        if self.labels_since_last_retrain < 0:
            raise ValueError("label counter cannot be negative")

    def record(self, newly_added_labels):
        self.labels_since_last_retrain += int(newly_added_labels)

    def reset(self):
        self.labels_since_last_retrain = 0


def should_retrain(policy, newly_added_labels):
    """True iff the accumulated plus new label count reaches the threshold."""
    if newly_added_labels < 0:
        raise ValueError("newly_added_labels cannot be negative")
    return policy.labels_since_last_retrain + newly_added_labels >= policy.threshold


# ---------------------------------------------------------------------------
# batch sampling


def register_subdatasets(subdatasets):
    """Assign attribute ids in registration order; rejects empty train splits
    and duplicate attribute names."""
    seen = set()
    out = list(subdatasets)
    if not out:
        raise ValueError("need at least one sub-dataset")
    for i, sd in enumerate(out):
        if sd.attribute in seen:
            raise ValueError(f"duplicate attribute {sd.attribute!r}")
        seen.add(sd.attribute)
        if sd.train_size == 0:
            raise ValueError(f"sub-dataset {sd.attribute!r} has no training samples")
        sd.attribute_id = i
    return out


class BatchSampler:
    """Single-source batches: each batch comes entirely from one sub-dataset.

    Within a dataset, samples are drawn without replacement from shuffled
    passes; a new pass is appended whenever fewer than a batch remains, so a
    batch may straddle two passes but never repeats a sample inside a pass.
    """

    def __init__(self, subdatasets, batch_size, rng, mode="uniform-over-datasets"):
        if mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {mode!r}; expected one of {SAMPLING_MODES}")
        self.subdatasets = register_subdatasets(subdatasets)
        self.batch_size = batch_size
        self.rng = rng
        self.mode = mode
        sizes = np.array([sd.train_size for sd in self.subdatasets], dtype=np.float64)
        self._probs = sizes / sizes.sum() if mode == "size-proportional" else None
        self._queues = [list(rng.permutation(sd.train_size)) for sd in self.subdatasets]

    def next_batch(self):
        i = int(self.rng.choice(len(self.subdatasets), p=self._probs))
        sd = self.subdatasets[i]
        q = self._queues[i]
        take = min(self.batch_size, sd.train_size)
        while len(q) < take:
            q.extend(self.rng.permutation(sd.train_size))
        idx = np.array([q.pop(0) for _ in range(take)])
        return sd.attribute_id, sd.x_train[idx], sd.y_train[idx]


def next_batch(sampler):
    """(attribute_id, images, labels) wholly from one sub-dataset."""
    return sampler.next_batch()


# ---------------------------------------------------------------------------
# training steps


def dynamic_step(model, batch, optimizer):
    """One optimizer step routing the batch into its attribute's head only.

    Returns (loss, batch accuracy). Gradients reach the shared blocks and the
    active head; inactive heads are not part of the step's parameter set, so
    neither gradients nor momentum can move them.
    """
    attr_id, images, labels = batch
    attribute = model.attribute_by_id(attr_id)
    feats = model.forward_blocks(images, 0, model.config.block_count, mode="train")
    logits = model.forward_head(feats, attribute, mode="train")
    loss = layers.softmax_cross_entropy(logits, labels)
    params = [p for p in model.block_parameters() if p.trainable]
    params += model.head_parameters(attribute)
    optimizer.zero_grad(params)
    backward(loss)
    optimizer.step(params)
    acc = float(np.mean(np.argmax(logits.data, axis=1) == np.asarray(labels)))
    return float(loss.item()), acc


def evaluate_accuracy(model, images, labels, attribute, batch_size=128, mode="infer"):
    """Classification accuracy over a dataset split.

    mode="train" normalizes each evaluation batch by its own statistics,
    matching how accuracy is observed during the interleaved training loop
    (every batch is single-attribute there too); mode="infer" uses the
    running statistics, which blend all attributes' data.
    """
    hits = 0
    for start in range(0, len(images), batch_size):
        x = images[start : start + batch_size]
        feats = model.forward_blocks(x, 0, model.config.block_count, mode=mode)
        logits = model.forward_head(feats, attribute, mode=mode)
        hits += int(np.sum(np.argmax(logits.data, axis=1) == labels[start : start + batch_size]))
    return hits / max(len(images), 1)


def run_pretraining(subdatasets, config, on_step=None):
    """The interleaved pretraining loop; returns (model, TrunkWeights, log).

    The log carries one record per step ({step, attr, loss, acc}), a
    per-attribute summary, and the head weights for audit; heads are never
    part of the trunk itself.
    """
    subdatasets = register_subdatasets(subdatasets)
    model = build_backbone(config.backbone, seed=config.seed)
    for sd in subdatasets:
        model.add_head(sd.attribute, sd.class_names, pooling="gap")
    sampler = BatchSampler(
        subdatasets,
        config.batch_size,
        rng=np.random.default_rng(np.random.SeedSequence([config.seed, 1])),
        mode=config.sampling,
    )
    optimizer = SGD(lr=lr_at(config.learning_rate, 0), momentum=config.momentum)
    records = []
    for step in range(config.steps):
        optimizer.lr = lr_at(config.learning_rate, step)
        batch = sampler.next_batch()
        loss, acc = dynamic_step(model, batch, optimizer)
        attribute = model.attribute_by_id(batch[0])
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {step} on attribute {attribute!r}: {loss}")
        record = {"step": step, "attr": attribute, "loss": loss, "acc": acc}
        records.append(record)
        if on_step is not None:
            on_step(model, record)

    per_attribute = {}
    for sd in subdatasets:
        tail = [r["loss"] for r in records if r["attr"] == sd.attribute][-20:]
        per_attribute[sd.attribute] = {
            # train accuracy under the same batch-statistics regime the
            # training loop runs in; the infer-mode figure is reported too
            "train_acc": evaluate_accuracy(
                model, sd.x_train, sd.y_train, sd.attribute, batch_size=config.batch_size, mode="train"
            ),
            "train_acc_infer": evaluate_accuracy(model, sd.x_train, sd.y_train, sd.attribute),
            "test_acc": evaluate_accuracy(model, sd.x_test, sd.y_test, sd.attribute),
            "smoothed_loss": float(np.mean(tail)) if tail else None,
        }
    depth = config.trunk_depth if config.trunk_depth is not None else config.backbone.block_count
    trunk = export_trunk(
        model,
        depth,
        extra_provenance={
            "dataset_digests": {sd.attribute: sd.digest for sd in subdatasets},
            "steps": config.steps,
            "batch_size": config.batch_size,
            "learning_rate": config.learning_rate,
            "momentum": config.momentum,
            "sampling": config.sampling,
        },
    )
    log = {
        "steps": records,
        "per_attribute": per_attribute,
        "heads": {p.name: p.data.tolist() for p in model.head_parameters()},
    }
    return model, trunk, log


def pretrain(subdatasets, config, on_step=None):
    """Pretrain on the sub-datasets and export the trunk: (TrunkWeights, log)."""
    _, trunk, log = run_pretraining(subdatasets, config, on_step=on_step)
    return trunk, log


def write_log_jsonl(log, path):
    """Step records as JSON lines, then one summary line."""
    with open(path, "w") as f:
        for record in log["steps"]:
            f.write(json.dumps(record) + "\n")
        f.write(json.dumps({"summary": log["per_attribute"], "heads": log["heads"]}) + "\n")
