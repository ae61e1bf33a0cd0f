"""scikit-learn style estimator wrappers around the training pipeline.

These follow the fit/transform/predict and get_params conventions so the
pieces compose with standard tooling; the functional modules underneath stay
the source of truth.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .backbone import BackboneConfig
from .branch import BranchSpec, score_samples, train_branch
from .mining import MiningParams, extract_features, mine
from .pretrain import PretrainConfig, run_pretraining


def _require_fitted(obj, attr):
    if not hasattr(obj, attr):
        raise NotFittedError(f"{type(obj).__name__} is not fitted yet; call fit first")


class TrunkPretrainer(BaseEstimator):
    """Fits the shared trunk on a list of sub-datasets.

    After ``fit``: ``trunk_`` (the exportable artifact), ``model_`` (the live
    multi-head model), ``log_`` (per-step records and summaries).
    ``transform`` maps images to trunk features.
    """

    def __init__(self, steps=600, batch_size=32, learning_rate=0.05, momentum=0.9,
                 seed=0, sampling="uniform-over-datasets", trunk_depth=None, backbone=None):
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed
        self.sampling = sampling
        self.trunk_depth = trunk_depth
        self.backbone = backbone

    def fit(self, X, y=None):
        config = PretrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            seed=self.seed,
            sampling=self.sampling,
            trunk_depth=self.trunk_depth,
            backbone=self.backbone if self.backbone is not None else BackboneConfig(),
        )
        self.model_, self.trunk_, self.log_ = run_pretraining(X, config)
        return self

    def transform(self, X):
        _require_fitted(self, "trunk_")
        return extract_features(self.trunk_, np.asarray(X, dtype=np.float32)).rows


class BranchTrainer(BaseEstimator):
    """Fine-tunes one attribute's branch from a fixed trunk.

    ``fit(X)`` takes the attribute's SubDataset; afterwards ``branch_`` holds
    the detached artifact and ``predict_proba``/``predict`` run composed
    trunk+branch inference.
    """

    def __init__(self, trunk=None, attribute=None, graft_point=0, end_block=None,
                 pooling="gap", epochs=10, batch_size=32, learning_rate=0.05,
                 momentum=0.9, seed=0, init="trunk"):
        self.trunk = trunk
        self.attribute = attribute
        self.graft_point = graft_point
        self.end_block = end_block
        self.pooling = pooling
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed
        self.init = init

    def fit(self, X, y=None):
        if self.trunk is None:
            raise ValueError("BranchTrainer needs a trunk; pass trunk=TrunkWeights(...)")
        spec = BranchSpec(
            attribute=self.attribute or X.attribute,
            graft_point=self.graft_point,
            end_block=self.end_block if self.end_block is not None else self.trunk.config.block_count,
            pooling=self.pooling,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            seed=self.seed,
            init=self.init,
        )
        self.branch_, self.log_ = train_branch(self.trunk, X, spec)
        self.classes_ = np.arange(len(self.branch_.class_names))
        return self

    def predict_proba(self, X):
        _require_fitted(self, "branch_")
        return score_samples(self.trunk, self.branch_, X)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)


class HardNegativeMiner(BaseEstimator):
    """Selects hard negatives in feature space.

    ``fit(X, y)`` takes feature rows and binary labels (1 = positive).
    ``keep_mask_`` marks rows that survive: every positive plus the mined
    negatives; ``transform`` filters the same matrix down to them.
    """

    def __init__(self, k=8, signature_size=8, keep_fraction=0.5, far_retain_rate=0.2, seed=0):
        self.k = k
        self.signature_size = signature_size
        self.keep_fraction = keep_fraction
        self.far_retain_rate = far_retain_rate
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        params = MiningParams(
            k=self.k,
            signature_size=self.signature_size,
            keep_fraction=self.keep_fraction,
            far_retain_rate=self.far_retain_rate,
            seed=self.seed,
        )
        pos_idx = np.flatnonzero(y == 1)
        neg_idx = np.flatnonzero(y != 1)
        kept, self.report_ = mine(X[pos_idx], X[neg_idx], params)
        self.kept_negative_indices_ = np.asarray([neg_idx[i] for i in kept], dtype=np.int64)
        mask = np.zeros(len(y), dtype=bool)
        mask[pos_idx] = True
        mask[self.kept_negative_indices_] = True
        self.keep_mask_ = mask
        return self

    def transform(self, X):
        _require_fitted(self, "keep_mask_")
        X = np.asarray(X)
        if len(X) != len(self.keep_mask_):
            raise ValueError(f"transform input has {len(X)} rows; fit saw {len(self.keep_mask_)}")
        return X[self.keep_mask_]

    def fit_transform(self, X, y):
        return self.fit(X, y).transform(X)
