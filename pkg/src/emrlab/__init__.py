"""Quadratic regularization and explicit movement regularization (EMR) for continual learning."""

from .estimator import ContinualMLPClassifier
from .exceptions import ConfigError, DivergenceError
from .metrics import AccuracyMatrix, average_accuracy, average_forgetting, cka, cka_profile
from .net import MultiHeadNet
from .tasks import TaskStream, synth_blobs
from .trainer import Strategy, run_sequence, train_task

__all__ = [
    "AccuracyMatrix",
    "ConfigError",
    "ContinualMLPClassifier",
    "DivergenceError",
    "MultiHeadNet",
    "Strategy",
    "TaskStream",
    "average_accuracy",
    "average_forgetting",
    "cka",
    "cka_profile",
    "run_sequence",
    "synth_blobs",
    "train_task",
]

__version__ = "0.1.0"
