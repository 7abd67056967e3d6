"""Self-revised retraining for imbalanced score-labeled image
classification, plus feature-difference highlight extraction."""

from .dataset import (
    Dataset,
    DatasetStats,
    ScoredImage,
    SynthConfig,
    generate_synthetic,
    load_manifest,
    save_dataset,
    split,
)
from .engine import (
    DropPolicy,
    RoundRecord,
    RsrlConfig,
    RsrlResult,
    evaluate_checkpoint,
    fc_memberships,
    revise_training_set,
    rsrl_run,
    select_majority_classes,
    warm_start_continuity,
)
from .errors import RsrlError
from .highlight import (
    FeatureMapStack,
    HighlightResult,
    export_highlight,
    extract_highlight,
    feature_diff_map,
    min_corr_channel,
    pearson_corr,
)
from .metrics import (
    ClassMetrics,
    ConfusionMatrix,
    EvalSummary,
    accuracy,
    confusion,
    evaluate_labels,
    f_measure,
    summarize,
    total_f,
)
from .net import (
    Checkpoint,
    NetworkSpec,
    TrainConfig,
    backward,
    conv2d,
    default_network_spec,
    forward,
    init_checkpoint,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
)

__all__ = [
    "Checkpoint",
    "ClassMetrics",
    "ConfusionMatrix",
    "Dataset",
    "DatasetStats",
    "DropPolicy",
    "EvalSummary",
    "FeatureMapStack",
    "HighlightResult",
    "NetworkSpec",
    "RoundRecord",
    "RsrlConfig",
    "RsrlError",
    "RsrlResult",
    "ScoredImage",
    "SynthConfig",
    "TrainConfig",
    "accuracy",
    "backward",
    "confusion",
    "conv2d",
    "default_network_spec",
    "evaluate_checkpoint",
    "evaluate_labels",
    "export_highlight",
    "extract_highlight",
    "f_measure",
    "fc_memberships",
    "feature_diff_map",
    "forward",
    "generate_synthetic",
    "init_checkpoint",
    "load_checkpoint",
    "load_manifest",
    "min_corr_channel",
    "pearson_corr",
    "revise_training_set",
    "rsrl_run",
    "save_checkpoint",
    "save_dataset",
    "select_majority_classes",
    "sgd_step",
    "split",
    "summarize",
    "total_f",
    "train",
    "warm_start_continuity",
]

__version__ = "0.1.0"
