"""Class-wise embedding guided instance-dependent partial label learning."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    LabelSpace,
    PartialLabelDataset,
    candidate_stats,
    load_dataset,
    save_dataset,
    validate_dataset,
)
from .estimator import CELClassifier  # noqa: E402
from .network import ModelConfig  # noqa: E402
from .trainer import TrainConfig, Trainer, train  # noqa: E402

__all__ = [
    "CELClassifier",
    "LabelSpace",
    "ModelConfig",
    "PartialLabelDataset",
    "TrainConfig",
    "Trainer",
    "candidate_stats",
    "load_dataset",
    "save_dataset",
    "train",
    "validate_dataset",
]
