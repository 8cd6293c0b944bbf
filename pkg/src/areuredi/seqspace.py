"""Vocabularies, fixed-length token sequences, and exact state enumeration.

States are length-L vectors of token ids in [0, K). Small spaces are indexed
by a mixed-radix integer so exact oracles can tabulate distributions and
kernels; token 0 is the least significant digit, which fixes serialization
order once and for all.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ._validation import check_tokens
from .errors import DomainError, ResourceError

#: Exact oracles refuse spaces with more states than this.
ENUMERATION_CAP = 10_000_000


@dataclass(frozen=True)
class Vocabulary:
    """A finite token alphabet with display labels."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise DomainError("vocabulary needs at least 2 tokens")
        if len(set(self.labels)) != len(self.labels):
            raise DomainError("vocabulary labels must be distinct")

    @property
    def size(self) -> int:
        return len(self.labels)

    @classmethod
    def of_size(cls, K: int) -> "Vocabulary":
        return cls(tuple(str(i) for i in range(int(K))))

    def to_json_dict(self) -> dict:
        return {"labels": list(self.labels)}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Vocabulary":
        return cls(tuple(doc["labels"]))


def n_states(K: int, L: int) -> int:
    """K**L as an exact Python int."""
    if K < 2 or L < 1:
        raise DomainError(f"need K >= 2 and L >= 1, got K={K}, L={L}")
    return K**L


def check_cap(K: int, L: int, cap: int = ENUMERATION_CAP) -> int:
    n = n_states(K, L)
    if n > cap:
        raise ResourceError(f"state space {K}^{L} = {n} exceeds enumeration cap {cap}")
    return n


def encode(tokens, K: int) -> int:
    """Mixed-radix index of a sequence; token 0 is the least significant digit."""
    arr = check_tokens(tokens, K)
    idx = 0
    for j in range(arr.shape[0] - 1, -1, -1):
        idx = idx * K + int(arr[j])
    return idx


def decode(idx: int, K: int, L: int) -> np.ndarray:
    """Inverse of :func:`encode`."""
    idx = int(idx)
    if not 0 <= idx < n_states(K, L):
        raise DomainError(f"state index {idx} outside [0, {K}^{L})")
    out = np.empty(L, dtype=np.int64)
    for j in range(L):
        idx, out[j] = divmod(idx, K)
    return out


def encode_batch(tokens: np.ndarray, K: int) -> np.ndarray:
    """Vectorized encode of an (n, L) token matrix. Space must fit in int64."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= K):
        raise DomainError(f"token out of range [0, {K})")
    L = tokens.shape[1]
    radix = K ** np.arange(L, dtype=np.int64)
    return tokens @ radix


def all_states(K: int, L: int, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """Token matrix of the whole space, shape (K**L, L), in index order."""
    n = check_cap(K, L, cap)
    idx = np.arange(n, dtype=np.int64)
    out = np.empty((n, L), dtype=np.int64)
    for j in range(L):
        idx, out[:, j] = np.divmod(idx, K)
    return out


def enumerate_states(K: int, L: int, cap: int = ENUMERATION_CAP) -> Iterator[np.ndarray]:
    """Yield every sequence exactly once, in state-index order."""
    for row in all_states(K, L, cap):
        yield row.copy()
