"""Seizure onset detection from weak workflow-note labels with diagonal state-space models."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, set_precision  # noqa: F401
from .model import ModelConfig, build_model  # noqa: F401
from .synth import CorpusProfile, generate  # noqa: F401
