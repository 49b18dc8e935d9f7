"""Infrared/visible image fusion through Retinex decomposition with plain CNNs."""

from .errors import FusionError
from .imgio import load_image, resize, save_image, scan_dataset
from .nets import build_bundle, load_checkpoint, save_checkpoint
from .pipeline import decompose_infrared, decompose_visible, fuse, fuse_pair

__all__ = [
    "FusionError",
    "build_bundle",
    "decompose_infrared",
    "decompose_visible",
    "fuse",
    "fuse_pair",
    "load_checkpoint",
    "load_image",
    "resize",
    "save_checkpoint",
    "save_image",
    "scan_dataset",
]

__version__ = "0.1.0"
