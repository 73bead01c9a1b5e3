"""Phishing address detection on transaction evolution graphs (TEGs)."""
from .detectors import DensityDetector, FastDetector, FdConfig, RepeatDetector, pipeline_detect
from .estimator import VARIANTS, TEGDetector
from .model import ModelConfig
from .synthgen import SynthConfig, generate
from .teg import SliceSpec, Teg, build_teg, build_tegs, ctr, load_teg, save_teg
from .train import Metrics, TrainConfig, split

__version__ = "0.1.0"

__all__ = [
    "DensityDetector", "FastDetector", "FdConfig", "Metrics", "ModelConfig", "RepeatDetector",
    "SliceSpec", "SynthConfig", "TEGDetector", "Teg", "TrainConfig", "VARIANTS", "build_teg",
    "build_tegs", "ctr", "generate", "load_teg", "pipeline_detect", "save_teg", "split",
]
