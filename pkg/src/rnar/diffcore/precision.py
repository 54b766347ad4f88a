"""Numeric precision mode shared by the whole stack.

Double precision is mandatory for gradient verification; single precision is
an opt-in for training speed. The mode is process-global and read once per
array allocation, so switching mid-computation is not supported.
"""

import os
from contextlib import contextmanager

import numpy as np

_MODES = {"single": np.float32, "double": np.float64}

_state = {"mode": "double"}


def set_precision(mode: str) -> None:
    if mode not in _MODES:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(_MODES)}")
    _state["mode"] = mode


def precision_mode() -> str:
    return _state["mode"]


def active_dtype() -> np.dtype:
    return np.dtype(_MODES[_state["mode"]])


def precision_from_env(default: str = "double") -> str:
    """Resolve the RNAR_PRECISION environment variable (CLI entry points call this)."""
    mode = os.environ.get("RNAR_PRECISION", default)
    if mode not in _MODES:
        raise ValueError(f"RNAR_PRECISION must be one of {sorted(_MODES)}, got {mode!r}")
    return mode


@contextmanager
def precision(mode: str):
    prev = _state["mode"]
    set_precision(mode)
    try:
        yield
    finally:
        _state["mode"] = prev
