"""Shared-trunk multi-attribute CNN engine.

One pretrained trunk of conv blocks is shared by many per-attribute
branches; each branch is trained independently on its own single-label
sub-dataset and grafted back at a block boundary for joint serving.
"""

__version__ = "0.1.0"

from .backbone import (
    BackboneConfig,
    BackboneModel,
    Branch,
    FingerprintMismatch,
    GraftedModel,
    TrunkWeights,
    build_backbone,
    detach_branch,
    export_trunk,
    forward_features,
    graft,
    set_trainable,
)
from .branch import BranchSpec, score_samples, train_branch
from .data import (
    AttributeSpec,
    DatasetManifest,
    SubDataset,
    SynthConfig,
    generate_synthetic,
    load_image,
    load_manifest,
    load_subdataset,
    synthesize_attribute,
    write_manifest,
)
from .estimators import BranchTrainer, HardNegativeMiner, TrunkPretrainer
from .metrics import (
    EvaluationReport,
    MetricRow,
    ScoredSet,
    auc,
    best_threshold,
    evaluate_model,
    roc_curve,
    threshold_metrics,
    top_k_false_positives,
)
from .mining import FeatureMatrix, MiningParams, Signature, build_signature, emd, extract_features, kmeans, mine
from .optim import SGD
# the pretrain() convenience function stays submodule-only: re-exporting it
# here would shadow the graftnet.pretrain module itself
from .pretrain import (
    BatchSampler,
    PretrainConfig,
    RetrainPolicy,
    dynamic_step,
    next_batch,
    run_pretraining,
    should_retrain,
)
from .registry import Registry, register_branch
from .server import InferenceServer, encode_tensor, serve
from .tensor import Parameter, Tensor, backward
from .weights_io import (
    BadMagicError,
    ChecksumError,
    UnsupportedVersionError,
    WeightFormatError,
    load_branch,
    load_composite,
    load_trunk,
    load_weights,
    save_branch,
    save_composite,
    save_trunk,
    save_weights,
)
