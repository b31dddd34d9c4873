"""Input validation helpers and a minimal estimator-parameter mixin.

The mixin mirrors scikit-learn's get_params/set_params contract (parameters
are the keyword arguments of ``__init__``, stored verbatim on the instance)
without pulling in scikit-learn as a runtime dependency.
"""

from __future__ import annotations

import inspect

import numpy as np

from .errors import ValidationError


class ParamsMixin:
    """scikit-learn style parameter handling for estimator classes."""

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [
            name
            for name, p in sig.parameters.items()
            if name != "self" and p.kind not in (p.VAR_POSITIONAL, p.VAR_KEYWORD)
        ]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"invalid parameter {name!r} for {type(self).__name__}; "
                    f"valid parameters are {sorted(valid)}"
                )
            setattr(self, name, value)
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"


def check_vector(x, name: str, dtype=float) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 1:
        raise ValidationError(f"{name} must be 1-dimensional, got shape {x.shape}")
    return x


def check_matrix(x, name: str, dtype=float) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got shape {x.shape}")
    return x


def check_same_length(*pairs):
    """pairs: (array, name) tuples that must all share their first dimension."""
    lengths = {name: len(arr) for arr, name in pairs}
    if len(set(lengths.values())) > 1:
        raise ValidationError(f"length mismatch: {lengths}")


def check_survival_arrays(times, events) -> tuple[np.ndarray, np.ndarray]:
    times = check_vector(times, "times")
    events = check_vector(events, "events")
    check_same_length((times, "times"), (events, "events"))
    if np.any(times <= 0):
        raise ValidationError("survival times must be strictly positive")
    if not np.isin(events, (0, 1)).all():
        raise ValidationError("event indicators must be 0 or 1")
    return times, events.astype(int)


def check_probability(x: float, name: str, *, low_open: bool = True) -> float:
    x = float(x)
    lo_ok = x > 0.0 if low_open else x >= 0.0
    if not (lo_ok and x <= 1.0):
        raise ValidationError(f"{name} must lie in {'(' if low_open else '['}0, 1], got {x}")
    return x


def check_seed(seed) -> int:
    seed = int(seed)
    if seed < 0:
        raise ValidationError("seed must be non-negative")
    return seed


# ---------------------------------------------------------------------------
# Unordered-pair indexing over m items, lexicographic (i < j).
# Used to stream the m-choose-2 pair field in fixed chunks.


def pair_count(m: int) -> int:
    return m * (m - 1) // 2


def pair_to_index(i: int, j: int, m: int) -> int:
    """Rank of pair (i, j), i < j, in lexicographic order."""
    if not 0 <= i < j < m:
        raise ValueError(f"need 0 <= i < j < m, got ({i}, {j}) with m={m}")
    return i * (2 * m - i - 1) // 2 + (j - i - 1)

def index_to_pair(idx: int, m: int) -> tuple[int, int]:
    """Inverse of pair_to_index."""
    if not 0 <= idx < pair_count(m):
        raise ValueError(f"pair index {idx} out of range for m={m}")
    # Smallest i with cumulative count exceeding idx, found in closed form.
    # Row i starts at offset i*(2m-i-1)/2; invert the quadratic.
    i = int((2 * m - 1 - ((2 * m - 1) ** 2 - 8 * idx) ** 0.5) / 2)
    # Guard against floating-point boundary error.
    while i * (2 * m - i - 1) // 2 > idx:
        i -= 1
    while (i + 1) * (2 * m - i - 2) // 2 <= idx and i + 1 < m - 1:
        i += 1
    j = idx - i * (2 * m - i - 1) // 2 + i + 1
    return i, j


def pair_block(start: int, stop: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (i, j) arrays for pair ranks in [start, stop)."""
    stop = min(stop, pair_count(m))
    if start >= stop:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    i0, j0 = index_to_pair(start, m)
    ii = np.empty(stop - start, dtype=np.int64)
    jj = np.empty(stop - start, dtype=np.int64)
    pos = 0
    i, j = i0, j0
    while pos < stop - start:
        run = min(m - j, stop - start - pos)
        ii[pos : pos + run] = i
        jj[pos : pos + run] = np.arange(j, j + run)
        pos += run
        i += 1
        j = i + 1
    return ii, jj
