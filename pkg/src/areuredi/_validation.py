"""Input validation helpers.

Small checks shared by the estimator classes and the functional API, in the
spirit of scikit-learn's validation utilities: validate early, raise typed
errors with the offending value in the message.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError

SIMPLEX_ATOL = 1e-12


def as_rng(seed_or_rng) -> np.random.Generator:
    """Accept an int seed, a Generator, or None (fresh entropy)."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator for stream `stream` of root seed `seed`.

    Streams are Philox jumps: stream i starts 2**128 draws ahead of stream
    i-1, so concurrent chains never overlap and results do not depend on
    scheduling order.
    """
    if not 0 <= int(seed) < 2**64:
        raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if stream < 0:
        raise DomainError(f"stream index must be nonnegative, got {stream}")
    return np.random.Generator(np.random.Philox(key=int(seed)).jumped(int(stream)))


def check_tokens(tokens, K: int, L: int | None = None) -> np.ndarray:
    """Validate a token vector and return it as an int64 array."""
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 1:
        raise DomainError(f"sequence must be 1-D, got shape {arr.shape}")
    if L is not None and arr.shape[0] != L:
        raise DomainError(f"sequence length {arr.shape[0]} != expected {L}")
    if arr.size and (arr.min() < 0 or arr.max() >= K):
        raise DomainError(f"token out of range [0, {K}): {arr.tolist()}")
    return arr


def check_probability_vector(p, *, atol: float = 1e-10, name: str = "distribution") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise DomainError(f"{name} must be 1-D")
    if np.any(p < -atol):
        raise DomainError(f"{name} has negative entries")
    if abs(p.sum() - 1.0) > atol:
        raise DomainError(f"{name} sums to {p.sum()!r}, expected 1")
    return np.clip(p, 0.0, None)


def check_weights(weights, n: int | None = None) -> np.ndarray:
    """Validate a simplex weight vector (sum 1 within 1e-12, entries >= 0)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1:
        raise DomainError("weights must be a 1-D vector")
    if n is not None and w.shape[0] != n:
        raise DomainError(f"weights has length {w.shape[0]}, expected {n}")
    if np.any(w < 0):
        raise DomainError(f"weights must be nonnegative, got {w.tolist()}")
    if abs(w.sum() - 1.0) > SIMPLEX_ATOL:
        raise DomainError(f"weights must sum to 1 within {SIMPLEX_ATOL}, got sum {w.sum()!r}")
    return w


def is_interior(weights) -> bool:
    return bool(np.all(np.asarray(weights) > 0.0))


def check_unit_interval(x: float, name: str = "t") -> float:
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"{name}={x!r} outside [0, 1]")
    return x
