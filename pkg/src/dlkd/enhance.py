"""Light enhancement applied in front of the teacher classifier.

Two fixed-parameter per-pixel maps are available: gamma intensity correction
``x -> x**(1/gamma)`` and the zero-reference quadratic curve
``LE(x) = x + alpha*x*(1-x)`` iterated a fixed number of times with one global
alpha. Neither has temporal coupling.

Every clip-level call bumps a process-wide counter so tests can prove that the
student/baseline paths never touch this module.
"""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, replace

import numpy as np

from dlkd.errors import InputError, ParameterError


class Method(str, enum.Enum):
    GAMMA = "gamma"
    CURVE = "curve"
    IDENTITY = "identity"


@dataclass(frozen=True)
class EnhanceParams:
    method: Method = Method.CURVE
    gamma: float = 2.2
    alpha: float = 0.6
    iterations: int = 4

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not self.gamma > 0:
            raise ParameterError(f"gamma must be > 0, got {self.gamma}")
        if not -1.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [-1, 1], got {self.alpha}")
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ParameterError(f"iterations must be a non-negative integer, got {self.iterations}")


_lock = threading.Lock()
_calls = 0


def enhancement_calls():
    return _calls


def reset_enhancement_calls():
    global _calls
    with _lock:
        _calls = 0


def _count():
    global _calls
    with _lock:
        _calls += 1


def _values(clip):
    return clip.data if hasattr(clip, "label") else np.asarray(clip)


def _rewrap(clip, values):
    if hasattr(clip, "label"):
        return replace(clip, data=values)
    return values


def _check_range(x):
    bad = ~((x >= 0) & (x <= 1))
    if bad.any():
        index = np.unravel_index(int(np.argmax(bad)), x.shape)
        raise InputError(f"value {x[index]!r} at index {tuple(int(i) for i in index)} is outside [0, 1]")


def gamma_curve(x, gamma):
    """Array-level gamma intensity correction."""
    if not gamma > 0:
        raise ParameterError(f"gamma must be > 0, got {gamma}")
    x = np.asarray(x)
    _check_range(x)
    out = np.power(x, 1.0 / gamma)
    return out.astype(x.dtype, copy=False) if np.issubdtype(x.dtype, np.floating) else out


def le_curve(x, alpha, iterations):
    """Array-level iterated quadratic curve."""
    if not -1.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [-1, 1], got {alpha}")
    x = np.asarray(x)
    _check_range(x)
    out = x.astype(np.float64)
    for _ in range(int(iterations)):
        out = out + alpha * out * (1.0 - out)
    # guards against rounding just past the ends of [0, 1]
    out = np.clip(out, 0.0, 1.0)
    return out.astype(x.dtype, copy=False) if np.issubdtype(x.dtype, np.floating) else out


def gic_enhance(clip, gamma):
    _count()
    return _rewrap(clip, gamma_curve(_values(clip), gamma))


def dce_curve_enhance(clip, alpha, iterations):
    _count()
    return _rewrap(clip, le_curve(_values(clip), alpha, iterations))


def enhance(clip, params):
    """Apply the enhancement selected by ``params`` (counts as one call)."""
    _count()
    x = _values(clip)
    if params.method is Method.GAMMA:
        out = gamma_curve(x, params.gamma)
    elif params.method is Method.CURVE:
        out = le_curve(x, params.alpha, params.iterations)
    else:
        _check_range(np.asarray(x))
        out = np.array(x, copy=True)
    return _rewrap(clip, out)
