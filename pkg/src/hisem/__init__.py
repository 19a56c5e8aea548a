"""Bi-temporal change captioning with differential attention and routed experts."""

from .data import SynthConfig, build_vocab, load_dataset, save_dataset, synth_generate
from .estimator import HiSemCaptioner
from .hasd import MoEConfig
from .model import HiSemModel, ModelConfig
from .training import CurriculumConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "CurriculumConfig",
    "HiSemCaptioner",
    "HiSemModel",
    "ModelConfig",
    "MoEConfig",
    "SynthConfig",
    "build_vocab",
    "load_dataset",
    "save_dataset",
    "synth_generate",
    "train_loop",
]
