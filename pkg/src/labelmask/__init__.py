"""Multi-label classification with ternary label-evidence states.

A joint feature/label self-attention encoder predicts each label from a
learned label embedding plus an evidence-state embedding (unknown /
negative / positive). Training masks a random subset of labels per step
and scores the loss only on the masked ones, so the model learns to
exploit whatever partial evidence it is given at inference time.
"""

from .data import Dataset, GeneratedData, SynthSpec, generate
from .metrics import EvalProtocol, EvalReport, evaluate
from .model import LabelPartition, LabelState, LabelTransformer, ModelConfig, Prediction
from .training import Adam, TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Dataset",
    "EvalProtocol",
    "EvalReport",
    "GeneratedData",
    "LabelPartition",
    "LabelState",
    "LabelTransformer",
    "ModelConfig",
    "Prediction",
    "SynthSpec",
    "TrainConfig",
    "TrainResult",
    "evaluate",
    "generate",
    "train",
]
