"""Mesh regression transformer: a numpy autodiff engine, a synthetic articulated
body generator and a progressive-width transformer encoder that regresses 3-D
joints and mesh vertices from a global image feature."""

from .errors import (AlignmentError, ConfigError, FormatError, MetroError, NumericError, ParseError,
                     ShapeError, ValidationError)
from .model import EncoderConfig, Metro, ModelOutput, load_checkpoint, save_checkpoint
from .synth import Dataset, generate_dataset, get_preset
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AlignmentError", "ConfigError", "Dataset", "EncoderConfig", "FormatError", "Metro", "MetroError",
    "ModelOutput", "NumericError", "ParseError", "ShapeError", "TrainConfig", "ValidationError",
    "evaluate", "generate_dataset", "get_preset", "load_checkpoint", "save_checkpoint", "train",
]
