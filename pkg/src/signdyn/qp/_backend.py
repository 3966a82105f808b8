"""Selects the compiled ADMM kernel when available, else the NumPy loop.

Set ``SIGNDYN_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _admm_py

try:
    from . import _admm_cy
except ImportError:  # extension not built
    _admm_cy = None

_FORCE_PY = os.environ.get("SIGNDYN_PURE_PYTHON", "") not in ("", "0")


def available() -> list:
    return ["python"] + (["cython"] if _admm_cy is not None else [])


def default_backend() -> str:
    return "cython" if _admm_cy is not None and not _FORCE_PY else "python"


def get_kernel(name=None):
    name = name or default_backend()
    if name == "cython":
        if _admm_cy is None:
            raise ImportError("compiled ADMM kernel is not built; run `pip install -e .`")
        return _admm_cy.admm_run
    if name == "python":
        return _admm_py.admm_run
    raise ValueError(f"unknown backend {name!r}")
