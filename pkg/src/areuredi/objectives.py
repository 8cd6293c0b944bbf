"""Objectives, normalization, Tchebycheff scalarization, and annealing.

All guidance arithmetic stays in the log domain: the tilt applied to the
base distribution is exp(eta * S) with S the weighted bottleneck score, and
only log-tilts are ever combined, so large eta cannot overflow.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence as SeqT

import numpy as np

from . import seqspace
from ._validation import as_rng, check_tokens, check_weights, is_interior
from .errors import DomainError


@dataclass(frozen=True)
class Objective:
    """A deterministic scalar score over sequences (maximized).

    `bounds` are the analytic (lower, upper) of the raw score over the whole
    space, used to build the default normalizer.
    """

    name: str
    fn: Callable[[np.ndarray], float]
    bounds: tuple[float, float]

    def evaluate(self, tokens: np.ndarray) -> float:
        return float(self.fn(tokens))


@dataclass(frozen=True)
class Normalizer:
    """Affine map of raw scores onto [0, 1], clamped by default."""

    lower: np.ndarray
    upper: np.ndarray
    clamp: bool = True

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape:
            raise DomainError("normalizer bounds have mismatched shapes")
        if np.any(hi <= lo):
            raise DomainError("normalizer requires lower < upper for every objective")

    @classmethod
    def for_objectives(cls, objectives: SeqT[Objective], clamp: bool = True) -> "Normalizer":
        lo = np.array([o.bounds[0] for o in objectives], dtype=np.float64)
        hi = np.array([o.bounds[1] for o in objectives], dtype=np.float64)
        return cls(lo, hi, clamp)

    def normalize(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        out = (raw - self.lower) / (self.upper - self.lower)
        if self.clamp:
            out = np.clip(out, 0.0, 1.0)
        return out


def tchebycheff(weights, scores) -> float:
    """Weighted bottleneck: min over objectives of w_n * normalized score."""
    w = np.asarray(weights, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if w.shape != s.shape:
        raise DomainError(f"weights shape {w.shape} != scores shape {s.shape}")
    return float(np.min(w * s))


def log_guidance_weight(S: float, eta: float) -> float:
    """log of the exponential tilt exp(eta * S). Identity by design."""
    if eta <= 0:
        raise DomainError(f"guidance strength eta must be positive, got {eta}")
    return float(eta) * float(S)


def guidance_weight(S: float, eta: float) -> float:
    return float(np.exp(log_guidance_weight(S, eta)))


@dataclass(frozen=True)
class AnnealSchedule:
    """Linear ramp of guidance strength over T iterations."""

    eta_min: float
    eta_max: float
    T: int

    def __post_init__(self):
        if not 0 < self.eta_min <= self.eta_max:
            raise DomainError(f"need 0 < eta_min <= eta_max, got ({self.eta_min}, {self.eta_max})")
        if self.T < 1:
            raise DomainError(f"need T >= 1, got {self.T}")


def anneal(t_index: int, sched: AnnealSchedule) -> float:
    """eta at iteration t_index: eta_min + (eta_max - eta_min) * t/(T-1)."""
    if not 0 <= t_index < sched.T:
        raise DomainError(f"iteration index {t_index} outside [0, {sched.T})")
    if sched.T == 1:
        return sched.eta_min
    return sched.eta_min + (sched.eta_max - sched.eta_min) * (t_index / (sched.T - 1))


def representability_weights(scores) -> np.ndarray:
    """Weights making a given positive score vector the balanced bottleneck.

    w_n proportional to 1/score_n; then every product w_n * score_n equals
    1 / sum_k(1/score_k), so the given point attains that common value under
    the Tchebycheff scalarization.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise DomainError("scores must be a nonempty 1-D vector")
    if np.any(s <= 0):
        raise DomainError(
            "representability weights need strictly positive normalized scores; "
            "perturb zero-valued objectives upstream if needed"
        )
    inv = 1.0 / s
    return inv / inv.sum()


def sample_weight(rng, N: int) -> np.ndarray:
    """Flat-density draw from the interior of the N-1 simplex.

    Normalized exponential spacings; every coordinate is strictly positive
    with probability one.
    """
    if N < 1:
        raise DomainError(f"need N >= 1, got {N}")
    rng = as_rng(rng)
    e = rng.standard_exponential(N)
    while np.any(e <= 0.0):  # zero draws are measure-zero but floats happen
        e = rng.standard_exponential(N)
    return e / e.sum()


def uniform_weights(N: int) -> np.ndarray:
    return np.full(N, 1.0 / N)


# ---------------------------------------------------------------------------
# Synthetic objective suite
# ---------------------------------------------------------------------------


def _leading_ones(x: np.ndarray) -> float:
    n = 0
    for v in x:
        if v != 1:
            break
        n += 1
    return float(n)


def _trailing_zeros(x: np.ndarray) -> float:
    n = 0
    for v in x[::-1]:
        if v != 0:
            break
        n += 1
    return float(n)


def suite_objective(kind: str, L: int, *, pattern=None, weights=None) -> Objective:
    """Build a named synthetic objective with analytic bounds.

    Kinds: leading_ones, trailing_zeros, ones_count, zeros_count,
    motif_count (overlapping occurrences of `pattern`), linear_score
    (position/token weight matrix of shape (L, K)).
    """
    if kind == "leading_ones":
        return Objective("leading_ones", _leading_ones, (0.0, float(L)))
    if kind == "trailing_zeros":
        return Objective("trailing_zeros", _trailing_zeros, (0.0, float(L)))
    if kind == "ones_count":
        return Objective("ones_count", lambda x: float(np.count_nonzero(x == 1)), (0.0, float(L)))
    if kind == "zeros_count":
        return Objective("zeros_count", lambda x: float(np.count_nonzero(x == 0)), (0.0, float(L)))
    if kind == "motif_count":
        pat = np.asarray(pattern, dtype=np.int64)
        if pat.ndim != 1 or pat.size < 1 or pat.size > L:
            raise DomainError(f"motif pattern must be 1-D with length in [1, {L}]")
        m = pat.size

        def count(x: np.ndarray, pat=pat, m=m) -> float:
            hits = 0
            for j in range(x.size - m + 1):
                if np.array_equal(x[j : j + m], pat):
                    hits += 1
            return float(hits)

        label = "".join(str(int(v)) for v in pat)
        return Objective(f"motif_{label}", count, (0.0, float(L - m + 1)))
    if kind == "linear_score":
        W = np.asarray(weights, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != L:
            raise DomainError(f"linear_score weights must have shape (L, K) with L={L}")
        lo = float(W.min(axis=1).sum())
        hi = float(W.max(axis=1).sum())
        if hi <= lo:
            raise DomainError("linear_score weights are constant; bounds degenerate")
        cols = np.arange(L)
        return Objective("linear_score", lambda x: float(W[cols, x].sum()), (lo, hi))
    raise DomainError(f"unknown suite objective kind {kind!r}")


# ---------------------------------------------------------------------------
# Bundled suite with optional tabulation
# ---------------------------------------------------------------------------


@dataclass
class ObjectiveSuite:
    """Objectives + normalizer over a fixed (K, L) space.

    Evaluation is pure and reentrant; concurrent chains may share one suite.
    `eval_count` tallies scored sequences (the benchmark budget currency)
    and is the only mutable field.
    """

    K: int
    L: int
    objectives: list[Objective]
    normalizer: Normalizer
    eval_count: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.normalizer.lower.shape[0] != len(self.objectives):
            raise DomainError("normalizer arity != number of objectives")

    @property
    def N(self) -> int:
        return len(self.objectives)

    @property
    def names(self) -> list[str]:
        return [o.name for o in self.objectives]

    def raw_scores(self, tokens: np.ndarray) -> np.ndarray:
        return np.array([o.evaluate(tokens) for o in self.objectives], dtype=np.float64)

    def normalized(self, tokens: np.ndarray, index: int | None = None) -> np.ndarray:
        """Normalized score vector of one sequence; counts one evaluation."""
        self.eval_count += 1
        return self.normalizer.normalize(self.raw_scores(tokens))

    def reset_count(self):
        self.eval_count = 0

    def tabulate(self, cap: int = seqspace.ENUMERATION_CAP) -> "TabulatedSuite":
        """Precompute the full normalized score table for an enumerable space."""
        tokens = seqspace.all_states(self.K, self.L, cap)
        table = np.empty((tokens.shape[0], self.N), dtype=np.float64)
        for r in range(tokens.shape[0]):
            table[r] = self.normalizer.normalize(self.raw_scores(tokens[r]))
        return TabulatedSuite(
            K=self.K, L=self.L, objectives=self.objectives,
            normalizer=self.normalizer, table=table,
        )


@dataclass
class TabulatedSuite(ObjectiveSuite):
    """ObjectiveSuite backed by a precomputed (n_states, N) score table."""

    table: np.ndarray = None

    def normalized(self, tokens: np.ndarray, index: int | None = None) -> np.ndarray:
        self.eval_count += 1
        if index is None:
            index = seqspace.encode(tokens, self.K)
        return self.table[index]

    def tabulate(self, cap: int = seqspace.ENUMERATION_CAP) -> "TabulatedSuite":
        return self


def scalarize_suite(suite: ObjectiveSuite, tokens: np.ndarray, weights,
                    index: int | None = None) -> float:
    w = check_weights(weights, suite.N)
    if not is_interior(w):
        warnings.warn("non-interior weights: the bottleneck scalarization is identically "
                      "zero wherever any weighted score vanishes", stacklevel=2)
    return tchebycheff(w, suite.normalized(tokens, index))
