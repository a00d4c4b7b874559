"""Multimodal articulatory-to-speech synthesis with a shared spectral decoder.

The package maps electromagnetic-articulography (EMA) trajectories to
magnitude spectrograms.  A spectral encoder and an EMA encoder feed one
decoder; training runs in two stages, and a synthetic corpus with a known
articulation-to-spectrum mapping makes every learning claim checkable.
"""

from .estimator import EMA2SRegressor
from .exceptions import (
    ConfigurationError,
    DegenerateChannelError,
    DivergenceError,
    EMA2SError,
    InvalidInputError,
    StageError,
)
from .experiments import ExperimentConfig, run_ablation, run_experiment
from .features import EmaRecording, Waveform, griffin_lim, make_mel_filterbank, stft_magnitude
from .metrics import ccr, mcd, stoi
from .model import ArchitectureConfig, init_params
from .synthdata import SyntheticCorpusConfig, build_corpus, load_corpus
from .training import Checkpoint, TrainConfig, synthesize, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig",
    "Checkpoint",
    "ConfigurationError",
    "DegenerateChannelError",
    "DivergenceError",
    "EMA2SError",
    "EMA2SRegressor",
    "EmaRecording",
    "ExperimentConfig",
    "InvalidInputError",
    "StageError",
    "SyntheticCorpusConfig",
    "TrainConfig",
    "Waveform",
    "build_corpus",
    "ccr",
    "griffin_lim",
    "init_params",
    "load_corpus",
    "make_mel_filterbank",
    "mcd",
    "run_ablation",
    "run_experiment",
    "stft_magnitude",
    "stoi",
    "synthesize",
    "train_stage1",
    "train_stage2",
]
