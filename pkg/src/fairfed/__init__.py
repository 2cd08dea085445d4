"""fairfed: a federated-learning simulation lab for group-fairness-aware
low-rank adapters.

The package trains frozen-backbone classifiers across simulated
demographically skewed sites using a family of low-rank adapters (dense,
LoRA, SVD-LoRA, and a group-gated variant with per-group singular values),
and evaluates group fairness with AUC, equity-scaled AUC, EOD, and SPD.
"""

from .adapter import (
    AdapterConfig,
    AdapterGrads,
    FairLoraState,
    GroupGate,
    adapter_grads,
    delta_weights,
    effective_S,
    init_adapter,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from .config import ExperimentConfig, default_config, default_config_dict
from .data import (
    AttributeSchema,
    Dataset,
    Sample,
    SiteSpec,
    SiteSplit,
    SyntheticSpec,
    generate_synthetic,
    load_jsonl,
    save_jsonl,
    split,
)
from .errors import (
    ConfigError,
    DatasetFormatError,
    FairFedError,
    NumericError,
    ShapeError,
    UndefinedMetricError,
)
from .estimator import FederatedFairLoraClassifier
from .federation import (
    FederationConfig,
    GlobalState,
    aggregate,
    ema_update,
    run_federation,
    run_local_only,
    sample_clients,
)
from .linalg import Rng, derive_seed
from .metrics import FairnessReport, auc, build_report, eod, es_auc, spd
from .model import FrozenBackbone, Prediction, build_backbone, forward, loss_and_grads, predict

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AdapterGrads",
    "AttributeSchema",
    "ConfigError",
    "Dataset",
    "DatasetFormatError",
    "ExperimentConfig",
    "FairFedError",
    "FairLoraState",
    "FairnessReport",
    "FederatedFairLoraClassifier",
    "FederationConfig",
    "FrozenBackbone",
    "GlobalState",
    "GroupGate",
    "NumericError",
    "Prediction",
    "Rng",
    "Sample",
    "ShapeError",
    "SiteSpec",
    "SiteSplit",
    "SyntheticSpec",
    "UndefinedMetricError",
    "adapter_grads",
    "aggregate",
    "auc",
    "build_backbone",
    "build_report",
    "default_config",
    "default_config_dict",
    "delta_weights",
    "derive_seed",
    "effective_S",
    "ema_update",
    "eod",
    "es_auc",
    "forward",
    "generate_synthetic",
    "init_adapter",
    "load_checkpoint",
    "load_jsonl",
    "loss_and_grads",
    "predict",
    "run_federation",
    "run_local_only",
    "sample_clients",
    "save_checkpoint",
    "save_jsonl",
    "sgd_step",
    "spd",
    "split",
]
