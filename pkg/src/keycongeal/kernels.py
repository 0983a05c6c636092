"""Kernel backend selection.

The compiled extension is used when it imports cleanly; setting the
environment variable ``KEYCONGEAL_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"

if not os.environ.get("KEYCONGEAL_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

normal_equations = _impl.normal_equations
bilinear_sample = _impl.bilinear_sample
splat_gaussians = _impl.splat_gaussians

__all__ = ["BACKEND", "normal_equations", "bilinear_sample", "splat_gaussians"]
