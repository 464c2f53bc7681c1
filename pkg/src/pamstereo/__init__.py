"""Parallax-attention stereo toolkit.

A self-contained numpy stack for differentiable stereo correspondence:
a small reverse-mode tensor engine, epipolar attention algebra with
occlusion masks, the unsupervised loss family, disparity regression and
refinement, synthetic stereo data with exact ground truth, and toy-scale
stereo matching / stereo super-resolution networks with a CLI.
"""

from .tensor import (
    NumericsError,
    Param,
    Tape,
    Tensor,
    default_dtype,
    precision,
    set_check_finite,
    set_default_dtype,
)

__version__ = "0.1.0"
