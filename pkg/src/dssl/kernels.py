"""Backend selection for the pixel kernels.

The compiled extension is used when it imports cleanly; setting
``DSSL_PURE_PYTHON=1`` forces the numpy fallback. ``BACKEND`` names the
active implementation.
"""
import os

from . import _fallback

_compiled = None
if not os.environ.get("DSSL_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

_active = _compiled if _compiled is not None else _fallback
BACKEND = "cython" if _compiled is not None else "python"

warp_affine = _active.warp_affine
separable_filter = _active.separable_filter
shift_hue = _active.shift_hue


def get_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _fallback
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    return ["cython", "python"] if _compiled is not None else ["python"]
