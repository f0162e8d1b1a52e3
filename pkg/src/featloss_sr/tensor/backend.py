"""Kernel backend selection and the reference/fast compute mode.

The compiled extension is used when importable; set ``FEATLOSS_SR_BACKEND=python``
to force the numpy fallback.  Both backends produce identical bits.
"""
import contextlib
import os

from . import _conv_py

MODES = ("reference", "fast")

if os.environ.get("FEATLOSS_SR_BACKEND", "").lower() == "python":
    _ext = None
else:
    try:
        from . import _conv_ext as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"
_kernels = _ext if _ext is not None else _conv_py

_mode = "reference"


def kernels(name=None):
    """Return the direct-loop kernel module, optionally forcing ``"python"``/``"cython"``."""
    if name is None:
        return _kernels
    if name == "python":
        return _conv_py
    if name == "cython":
        if _ext is None:
            raise RuntimeError("compiled extension is not available")
        return _ext
    raise ValueError(f"unknown backend {name!r}")


def has_extension():
    return _ext is not None


def get_mode():
    return _mode


def set_mode(mode):
    global _mode
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    _mode = mode


@contextlib.contextmanager
def compute_mode(mode):
    previous = _mode
    set_mode(mode)
    try:
        yield
    finally:
        set_mode(previous)
