"""CNN-Transformer encoders for fine-grained action recognition, from scratch on numpy."""

from .architectures import (
    BackboneStub,
    CrossEncoderModel,
    MeanPoolBaseline,
    ModelConfig,
    VisionEncoderModel,
    Vocabulary,
    build_model,
)
from .evaluation import EvalReport, evaluate, mean_class_accuracy, top1_accuracy
from .synthdata import SyntheticSpec, generate_dataset
from .tensor import Tensor
from .training import Checkpoint, TrainConfig, train

__all__ = [
    "BackboneStub", "Checkpoint", "CrossEncoderModel", "EvalReport", "MeanPoolBaseline",
    "ModelConfig", "SyntheticSpec", "Tensor", "TrainConfig", "VisionEncoderModel", "Vocabulary",
    "build_model", "evaluate", "generate_dataset", "mean_class_accuracy", "top1_accuracy", "train",
]
