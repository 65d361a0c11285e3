"""Graph-convolutional skeleton action recognition on a small float64 autodiff engine."""

from .data import SkeletonGraph, SkeletonSequence, StreamKind, synth_dataset
from .estimator import (RootCenterer, SkeletonStreamTransformer, TemporalResampler, TSGCNeXtClassifier,
                        check_skeleton_array)
from .network import ModelConfig, TSGCNeXt, build_model
from .training import TrainConfig, evaluate, train

__all__ = [
    "ModelConfig",
    "RootCenterer",
    "SkeletonGraph",
    "SkeletonSequence",
    "SkeletonStreamTransformer",
    "StreamKind",
    "TSGCNeXt",
    "TSGCNeXtClassifier",
    "TemporalResampler",
    "TrainConfig",
    "build_model",
    "check_skeleton_array",
    "evaluate",
    "synth_dataset",
    "train",
]

__version__ = "0.1.0"
