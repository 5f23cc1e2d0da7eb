"""Vessel-wall segmentation toolkit: tensors, autodiff, layers, models,
dice loss, metrics, RMSprop training, and synthetic phantom data."""
import ctypes
import os
import sys

__version__ = "0.1.0"


def _tune_allocator() -> None:
    """Raise glibc's mmap/trim thresholds so the large short-lived buffers
    of conv forward/backward are recycled in-arena instead of being
    mapped and unmapped on every step."""
    if os.environ.get("VEINSEG_NO_MALLOC_TUNE") or not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:
        pass


_tune_allocator()

from .tensor import F32, F64, Tensor4, from_flat, full, ones, scalar, zeros  # noqa: E402
from .autodiff import GradMap, Node, Tape, backward, ew_binary, reduce_sum  # noqa: E402
from .model import (ModelConfig, Model, build_baseline_unet, build_model,  # noqa: E402
                    build_opto_unet, count_params)
from .rng import Rng  # noqa: E402

__all__ = [
    "F32", "F64", "Tensor4", "from_flat", "full", "ones", "scalar", "zeros",
    "GradMap", "Node", "Tape", "backward", "ew_binary", "reduce_sum",
    "ModelConfig", "Model", "build_baseline_unet", "build_model",
    "build_opto_unet", "count_params", "Rng",
]
