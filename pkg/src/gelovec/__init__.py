"""Geometric attention smoothing for U-Net segmentation, built on a small NumPy autograd-free core."""

from .block import GeloVecBlock, GeloVecConfig, gas_chebyshev, make_variant
from .data import gen_synthetic, load_checkpoint, load_manifest, save_checkpoint
from .errors import ConfigError, DataError, DimensionError, FormatError, NumericalError
from .network import ModelConfig, SegmentationModel, build_model, model_forward
from .train import Adam, Metrics, bce_loss, compute_metrics, evaluate, fit, grad_check, train_epoch

__version__ = "0.1.0"
