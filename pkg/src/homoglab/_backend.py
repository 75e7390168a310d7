"""Kernel backend selection.

The compiled extension is used when it imports; setting
``HOMOGLAB_PURE_PYTHON=1`` forces the numpy/LAPACK fallback.
"""
import os
from types import ModuleType

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

NAMES = ("cython", "python")


def default_name() -> str:
    if os.environ.get("HOMOGLAB_PURE_PYTHON", "") not in ("", "0"):
        return "python"
    return "cython" if _compiled is not None else "python"


def available() -> tuple[str, ...]:
    return NAMES if _compiled is not None else ("python",)


def get(name: str | None = None) -> ModuleType:
    name = name or default_name()
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown backend {name!r}; choose from {NAMES}")
