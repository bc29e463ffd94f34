"""Backend selection for the sweep kernels.

The compiled extension is used when it imports; set
``GRIDVOLT_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _pykernels as python

BACKEND = "python"
compiled = None
if os.environ.get("GRIDVOLT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled
        BACKEND = "cython"
    except ImportError:
        compiled = None


def get(backend: str | None = None):
    """Kernel module for ``backend`` (``None``/``"auto"``, ``"python"``, ``"cython"``)."""
    if backend in (None, "auto"):
        return compiled if compiled is not None else python
    if backend == "python":
        return python
    if backend == "cython":
        if compiled is None:
            raise RuntimeError("compiled kernels are not available in this install")
        return compiled
    raise ValueError(f"unknown backend {backend!r}")
