"""Semi-supervised deep networks trained with inversion (reconstruction) losses."""

from .autodiff import Node, Tape, TapeError, grad, vjp
from .data import RawDataset, SplitDataset, normalize_sample, normalize_samples, split_semisupervised
from .estimator import InversionClassifier, SampleNormalizer
from .losses import LossBreakdown, LossConfig, compute_loss, recon_global, recon_multiscale
from .network import LayerSpec, Network, NetworkSpec, load_checkpoint, preset, save_checkpoint
from .tensor import NonFiniteError, ShapeError, TensorFormatError
from .trainer import TrainConfig, TrainResult, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Node", "Tape", "TapeError", "grad", "vjp",
    "RawDataset", "SplitDataset", "normalize_sample", "normalize_samples", "split_semisupervised",
    "InversionClassifier", "SampleNormalizer",
    "LossBreakdown", "LossConfig", "compute_loss", "recon_global", "recon_multiscale",
    "LayerSpec", "Network", "NetworkSpec", "load_checkpoint", "preset", "save_checkpoint",
    "NonFiniteError", "ShapeError", "TensorFormatError",
    "TrainConfig", "TrainResult", "evaluate", "train",
]
