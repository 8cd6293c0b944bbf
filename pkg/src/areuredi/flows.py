"""Mixture probability paths, couplings, and exact factorized denoisers.

The conditional path interpolates each coordinate independently between a
source token and a target token: coordinate j equals the target with
probability kappa_j(t) and the source otherwise. Given the endpoints, the
coordinate process is the usual single-jump bridge (it switches from source
to target at a random time with CDF kappa_j), which is what makes multi-step
ancestral sampling consistent with the per-time marginals.

Denoisers here are tabular: instead of training a network, the per-coordinate
transition conditionals p(x_s^i | x_t) are computed exactly from the coupling
by enumerating endpoint pairs (full-state mode), or estimated from weighted
pair samples keyed by a local token window (windowed mode).
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import seqspace
from ._validation import as_rng, check_tokens, check_unit_interval
from .errors import DomainError, NumericalError, ResourceError

PROB_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Path schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathSchedule:
    """Per-coordinate mixing coefficient kappa_j(t) of the mixture path.

    kinds:
      linear      kappa(t) = t
      polynomial  kappa(t) = t**gamma, gamma > 0 (convex for gamma > 1)
      bond_aware  kappa_j(t) = b_j * t**gamma + (1 - b_j) * t, gamma > 1,
                  so marked coordinates transition more slowly
    """

    kind: str = "linear"
    gamma: float = 1.0
    bond_mask: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "polynomial", "bond_aware"):
            raise DomainError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "polynomial" and self.gamma <= 0:
            raise DomainError("polynomial schedule needs gamma > 0")
        if self.kind == "bond_aware":
            if self.gamma <= 1:
                raise DomainError("bond_aware schedule needs gamma > 1")
            if self.bond_mask is None:
                raise DomainError("bond_aware schedule needs a bond mask")
            if any(b not in (0, 1) for b in self.bond_mask):
                raise DomainError("bond mask entries must be 0 or 1")

    @classmethod
    def linear(cls) -> "PathSchedule":
        return cls("linear")

    @classmethod
    def polynomial(cls, gamma: float) -> "PathSchedule":
        return cls("polynomial", gamma=float(gamma))

    @classmethod
    def bond_aware(cls, gamma: float, bond_mask) -> "PathSchedule":
        return cls("bond_aware", gamma=float(gamma),
                   bond_mask=tuple(int(b) for b in bond_mask))

    def to_json_dict(self) -> dict:
        doc = {"kind": self.kind, "gamma": self.gamma}
        if self.bond_mask is not None:
            doc["bond_mask"] = list(self.bond_mask)
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PathSchedule":
        mask = doc.get("bond_mask")
        return cls(doc["kind"], gamma=float(doc.get("gamma", 1.0)),
                   bond_mask=tuple(mask) if mask is not None else None)


def kappa_vector(schedule: PathSchedule, t: float, L: int) -> np.ndarray:
    """kappa_j(t) for every coordinate, as a length-L array."""
    t = check_unit_interval(t, "t")
    if schedule.kind == "linear":
        return np.full(L, t)
    if schedule.kind == "polynomial":
        return np.full(L, t**schedule.gamma)
    mask = np.asarray(schedule.bond_mask, dtype=np.float64)
    if mask.shape[0] != L:
        raise DomainError(f"bond mask length {mask.shape[0]} != L={L}")
    return mask * t**schedule.gamma + (1.0 - mask) * t


def kappa(schedule: PathSchedule, t: float, j: int = 0, L: int | None = None) -> float:
    """Mixing coefficient of coordinate j at time t."""
    if L is None:
        L = len(schedule.bond_mask) if schedule.bond_mask is not None else j + 1
    return float(kappa_vector(schedule, t, L)[j])


def bridge_sample(x0, x1, t: float, schedule: PathSchedule, rng) -> np.ndarray:
    """Draw x_t given endpoints: each coordinate is x1_j w.p. kappa_j(t)."""
    x0 = np.asarray(x0, dtype=np.int64)
    x1 = np.asarray(x1, dtype=np.int64)
    if x0.shape != x1.shape:
        raise DomainError("bridge endpoints must have the same length")
    rng = as_rng(rng)
    kap = kappa_vector(schedule, t, x0.shape[0])
    take_target = rng.random(x0.shape[0]) < kap
    return np.where(take_target, x1, x0)


# ---------------------------------------------------------------------------
# Couplings
# ---------------------------------------------------------------------------

MASS_ATOL = 1e-12


class ExactCoupling:
    """Dense joint probability table over (source index, target index)."""

    def __init__(self, table: np.ndarray, K: int, L: int):
        table = np.asarray(table, dtype=np.float64)
        n = seqspace.check_cap(K, L)
        if table.shape != (n, n):
            raise DomainError(f"coupling table must be ({n}, {n}) for K={K}, L={L}")
        if np.any(table < 0):
            raise DomainError("coupling table has negative mass")
        if abs(table.sum() - 1.0) > MASS_ATOL:
            raise DomainError(f"coupling mass {table.sum()!r} != 1 within {MASS_ATOL}")
        self.table = table
        self.K = int(K)
        self.L = int(L)
        self.n_states = n

    def p0(self) -> np.ndarray:
        return self.table.sum(axis=1)

    def p1(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def coord_marginals(self, which: str = "p1") -> np.ndarray:
        """(L, K) coordinate marginals of the source or target law."""
        tokens = seqspace.all_states(self.K, self.L)
        p = self.p0() if which == "p0" else self.p1()
        out = np.zeros((self.L, self.K))
        for j in range(self.L):
            out[j] = np.bincount(tokens[:, j], weights=p, minlength=self.K)
        return out

    @classmethod
    def uniform(cls, K: int, L: int) -> "ExactCoupling":
        n = seqspace.check_cap(K, L)
        return cls(np.full((n, n), 1.0 / (n * n)), K, L)

    @classmethod
    def product(cls, p0, p1, K: int, L: int) -> "ExactCoupling":
        p0 = np.asarray(p0, dtype=np.float64)
        p1 = np.asarray(p1, dtype=np.float64)
        return cls(np.outer(p0 / p0.sum(), p1 / p1.sum()), K, L)

    @classmethod
    def random(cls, K: int, L: int, rng, alpha: float = 1.0) -> "ExactCoupling":
        """Dirichlet-distributed random joint table (full support a.s.)."""
        rng = as_rng(rng)
        n = seqspace.check_cap(K, L)
        g = rng.gamma(alpha, size=(n, n))
        g = np.clip(g, 1e-300, None)
        return cls(g / g.sum(), K, L)

    def to_json_dict(self) -> dict:
        return {
            "format": "areuredi/coupling", "version": 1, "type": "exact",
            "K": self.K, "L": self.L, "table": self.table.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ExactCoupling":
        return cls(np.array(doc["table"], dtype=np.float64), doc["K"], doc["L"])


class EmpiricalCoupling:
    """Weighted sample pairs (x0, x1); weights normalized to total mass 1."""

    def __init__(self, x0: np.ndarray, x1: np.ndarray, K: int,
                 weights: np.ndarray | None = None):
        x0 = np.asarray(x0, dtype=np.int64)
        x1 = np.asarray(x1, dtype=np.int64)
        if x0.ndim != 2 or x0.shape != x1.shape or x0.shape[0] < 1:
            raise DomainError("empirical coupling needs matching (n, L) endpoint arrays")
        if x0.min() < 0 or max(x0.max(), x1.max()) >= K:
            raise DomainError(f"pair tokens out of range [0, {K})")
        n = x0.shape[0]
        if weights is None:
            weights = np.full(n, 1.0 / n)
        else:
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != (n,) or np.any(weights < 0):
                raise DomainError("weights must be nonnegative with one entry per pair")
            if abs(weights.sum() - 1.0) > MASS_ATOL:
                raise DomainError("empirical coupling weights must sum to 1")
        self.x0 = x0
        self.x1 = x1
        self.weights = weights
        self.K = int(K)
        self.L = int(x0.shape[1])
        self.n_pairs = n

    def coord_marginals(self, which: str = "p1") -> np.ndarray:
        X = self.x0 if which == "p0" else self.x1
        out = np.zeros((self.L, self.K))
        for j in range(self.L):
            out[j] = np.bincount(X[:, j], weights=self.weights, minlength=self.K)
        return out

    def to_exact(self, cap: int = seqspace.ENUMERATION_CAP) -> ExactCoupling:
        """Aggregate the pair list into a dense table (small spaces only)."""
        n = seqspace.check_cap(self.K, self.L, cap)
        i0 = seqspace.encode_batch(self.x0, self.K)
        i1 = seqspace.encode_batch(self.x1, self.K)
        table = np.zeros((n, n))
        np.add.at(table, (i0, i1), self.weights)
        return ExactCoupling(table / table.sum(), self.K, self.L)

    def to_json_dict(self) -> dict:
        return {
            "format": "areuredi/coupling", "version": 1, "type": "empirical",
            "K": self.K, "L": self.L,
            "x0": self.x0.tolist(), "x1": self.x1.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "EmpiricalCoupling":
        return cls(np.array(doc["x0"]), np.array(doc["x1"]), doc["K"],
                   np.array(doc["weights"], dtype=np.float64))


def coupling_from_json_dict(doc: dict):
    if doc.get("format") != "areuredi/coupling":
        raise DomainError("not a coupling document")
    if doc["type"] == "exact":
        return ExactCoupling.from_json_dict(doc)
    if doc["type"] == "empirical":
        return EmpiricalCoupling.from_json_dict(doc)
    raise DomainError(f"unknown coupling type {doc['type']!r}")


def _pair_weights_given_state(table: np.ndarray, tok0: np.ndarray, tok1: np.ndarray,
                              kap: np.ndarray, z_tokens: np.ndarray) -> np.ndarray:
    """Unnormalized posterior over endpoint pairs given x_t = z.

    Entry (i0, i1) is pi(i0, i1) * prod_j [kap_j 1{z_j = x1_j} + (1-kap_j) 1{z_j = x0_j}].
    """
    M = table.copy()
    for j in range(z_tokens.shape[0]):
        a0 = (tok0[:, j] == z_tokens[j]).astype(np.float64)
        a1 = (tok1[:, j] == z_tokens[j]).astype(np.float64)
        M *= (1.0 - kap[j]) * a0[:, None] + kap[j] * a1[None, :]
    return M


def bridge_marginal_exact(coupling: ExactCoupling, schedule: PathSchedule,
                          t: float) -> np.ndarray:
    """Exact time-t marginal over all states; sums to 1."""
    tokens = seqspace.all_states(coupling.K, coupling.L)
    kap = kappa_vector(schedule, t, coupling.L)
    out = np.empty(coupling.n_states)
    for z in range(coupling.n_states):
        out[z] = _pair_weights_given_state(coupling.table, tokens, tokens, kap,
                                           tokens[z]).sum()
    total = out.sum()
    if not np.isclose(total, 1.0, atol=1e-10):
        raise NumericalError(f"bridge marginal mass {total!r} drifted from 1")
    return out / total


def _jump_prob(kap_t: np.ndarray, kap_s: np.ndarray) -> np.ndarray:
    """P(coordinate switches to its target in (t, s] | still on source at t)."""
    denom = 1.0 - kap_t
    h = np.where(denom > PROB_FLOOR, (kap_s - kap_t) / np.where(denom > 0, denom, 1.0), 1.0)
    return np.clip(h, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Factorized denoiser
# ---------------------------------------------------------------------------


class FactorizedDenoiser(BaseEstimator):
    """Exact per-coordinate transition conditionals fit from a coupling.

    Parameters
    ----------
    schedule : PathSchedule or None
        Mixture path; linear when None.
    n_steps : int
        The time grid has n_steps + 1 uniform points. Queries off the grid
        raise DomainError rather than interpolating, so the fitting grid and
        the sampling grid can never silently disagree.
    context : {"full_state", "windowed"}
        full_state keys conditionals by the whole current sequence (dense
        tables, enumerable spaces only). windowed keys them by coordinate
        index plus a radius-`window` token window.
    window : int
        Radius of the context window for windowed mode.
    smoothing : float
        Additive count smoothing for windowed conditionals.

    After fit(), conditionals are computed lazily per (t, s) grid pair and
    memoized. The cache fill is deterministic and idempotent, so concurrent
    readers are safe; everything else is immutable.
    """

    def __init__(self, schedule: PathSchedule | None = None, n_steps: int = 16,
                 context: str = "full_state", window: int = 1,
                 smoothing: float = 0.1):
        self.schedule = schedule
        self.n_steps = n_steps
        self.context = context
        self.window = window
        self.smoothing = smoothing

    # -- fitting ------------------------------------------------------------

    def fit(self, coupling, y=None):
        if self.context not in ("full_state", "windowed"):
            raise DomainError(f"unknown context mode {self.context!r}")
        if self.n_steps < 1:
            raise DomainError("n_steps must be >= 1")
        if isinstance(coupling, ExactCoupling):
            pass
        elif isinstance(coupling, EmpiricalCoupling):
            if self.context == "full_state":
                raise DomainError("full_state mode needs an exact coupling table")
        else:
            raise DomainError(f"unsupported coupling type {type(coupling).__name__}")

        self.coupling_ = coupling
        self.schedule_ = self.schedule or PathSchedule.linear()
        self.K_ = coupling.K
        self.L_ = coupling.L
        self.grid_ = np.linspace(0.0, 1.0, self.n_steps + 1)
        self.flags_ = []
        self._cache = {}

        if self.context == "full_state":
            self.n_states_ = seqspace.check_cap(self.K_, self.L_)
            self.tokens_ = seqspace.all_states(self.K_, self.L_)
            self.p0_ = coupling.p0()
            self.p1_ = coupling.p1()
        else:
            if isinstance(coupling, ExactCoupling):
                tokens = seqspace.all_states(self.K_, self.L_)
                i0, i1 = np.nonzero(coupling.table)
                self._pairs_x0 = tokens[i0]
                self._pairs_x1 = tokens[i1]
                self._pairs_w = coupling.table[i0, i1]
            else:
                self._pairs_x0 = coupling.x0
                self._pairs_x1 = coupling.x1
                self._pairs_w = coupling.weights
        self.p1_coord_ = coupling.coord_marginals("p1")
        self.p0_coord_ = coupling.coord_marginals("p0")
        return self

    def _check_fitted(self):
        if not hasattr(self, "coupling_"):
            raise NotFittedError("denoiser is not fitted; call fit(coupling) first")

    # -- grid ---------------------------------------------------------------

    def grid_index(self, t: float) -> int:
        """Index of t on the fitting grid; off-grid values are refused."""
        self._check_fitted()
        t = check_unit_interval(t, "t")
        r = t * self.n_steps
        idx = int(round(r))
        if abs(r - idx) > 1e-9:
            raise DomainError(
                f"time {t!r} is off the {self.n_steps + 1}-point grid; "
                "conditionals are never interpolated"
            )
        return idx

    # -- full-state conditionals ---------------------------------------------

    def _posterior_full(self, a: int, b: int) -> np.ndarray:
        """(n_states, L, K) conditionals p(x_s^i = . | x_t = state) for grid pair."""
        key = ("full", a, b)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        t, s = self.grid_[a], self.grid_[b]
        kap_t = kappa_vector(self.schedule_, t, self.L_)
        kap_s = kappa_vector(self.schedule_, s, self.L_)
        h = _jump_prob(kap_t, kap_s)
        n, L, K = self.n_states_, self.L_, self.K_
        tokens = self.tokens_
        out = np.empty((n, L, K))
        for z in range(n):
            M = _pair_weights_given_state(self.coupling_.table, tokens, tokens,
                                          kap_t, tokens[z])
            total = M.sum()
            if total <= PROB_FLOOR**2:
                out[z] = 1.0 / K
                self.flags_.append(("zero_path_context", a, b, z))
                continue
            col = M.sum(axis=0)
            for i in range(L):
                m = np.bincount(tokens[:, i], weights=col, minlength=K) / total
                cur = tokens[z, i]
                p = h[i] * m
                p[cur] = m[cur] + (1.0 - h[i]) * (1.0 - m[cur])
                out[z, i] = p
        self._cache[key] = out
        return out

    def _masked_full(self, a: int, b: int) -> np.ndarray:
        """(n_states, L, K) masked conditionals p(x_s^i = . | x_t^{-i}).

        Coordinate i's own current token is excluded from the conditioning,
        the way a masked-prediction model scores a position from its
        context; the coordinate's law given the endpoints is then the plain
        time-s bridge marginal.
        """
        key = ("masked_full", a, b)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        t, s = self.grid_[a], self.grid_[b]
        kap_t = kappa_vector(self.schedule_, t, self.L_)
        kap_s = kappa_vector(self.schedule_, s, self.L_)
        n, L, K = self.n_states_, self.L_, self.K_
        tokens = self.tokens_
        table = self.coupling_.table
        out = np.empty((n, L, K))
        for z in range(n):
            zt = tokens[z]
            factors = []
            for j in range(L):
                match = (tokens[:, j] == zt[j]).astype(np.float64)
                factors.append((1.0 - kap_t[j]) * match[:, None] + kap_t[j] * match[None, :])
            prefix = [None] * (L + 1)
            prefix[0] = table.copy()
            for j in range(L):
                prefix[j + 1] = prefix[j] * factors[j]
            suffix = np.ones((n, n))
            for i in range(L - 1, -1, -1):
                M = prefix[i] * suffix
                total = M.sum()
                if total <= PROB_FLOOR**2:
                    out[z, i] = 1.0 / K
                    self.flags_.append(("zero_path_context", a, b, z))
                else:
                    m0 = np.bincount(tokens[:, i], weights=M.sum(axis=1), minlength=K)
                    m1 = np.bincount(tokens[:, i], weights=M.sum(axis=0), minlength=K)
                    out[z, i] = ((1.0 - kap_s[i]) * m0 + kap_s[i] * m1) / total
                suffix = suffix * factors[i]
        self._cache[key] = out
        return out

    # -- windowed conditionals -------------------------------------------------

    @property
    def _n_window_keys(self) -> int:
        w = 0 if self.context == "full_state" else self.window
        return (self.K_ + 1) ** (2 * w + 1)

    def _window_keys(self, tokens: np.ndarray, i: int) -> np.ndarray:
        """Window key per row of an (m, L) token matrix; base K+1 with an
        out-of-range sentinel so edge positions stay distinguishable."""
        w = self.window
        base = self.K_ + 1
        m = tokens.shape[0]
        keys = np.zeros(m, dtype=np.int64)
        mult = 1
        for d in range(-w, w + 1):
            j = i + d
            vals = tokens[:, j] if 0 <= j < self.L_ else np.full(m, self.K_, dtype=np.int64)
            keys += vals * mult
            mult *= base
        return keys

    def _counts_windowed(self, a: int, b: int):
        key = ("win", a, b)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        t, s = self.grid_[a], self.grid_[b]
        kap_t = kappa_vector(self.schedule_, t, self.L_)
        kap_s = kappa_vector(self.schedule_, s, self.L_)
        h = _jump_prob(kap_t, kap_s)
        L, K = self.L_, self.K_
        counts = np.zeros((L, self._n_window_keys, K))
        totals = np.zeros((L, self._n_window_keys))
        X0, X1, wts = self._pairs_x0, self._pairs_x1, self._pairs_w
        if self.window == 0:
            base = K + 1
            for i in range(L):
                x0i, x1i = X0[:, i], X1[:, i]
                kt, hi = kap_t[i], h[i]
                # window = the center token itself (keys in base K+1)
                np.add.at(counts[i], (x1i * 1, x1i), wts * kt)
                same = x0i == x1i
                diff = ~same
                np.add.at(counts[i], (x0i[same], x1i[same]), wts[same] * (1 - kt))
                np.add.at(counts[i], (x0i[diff], x1i[diff]), wts[diff] * (1 - kt) * hi)
                np.add.at(counts[i], (x0i[diff], x0i[diff]), wts[diff] * (1 - kt) * (1 - hi))
                np.add.at(totals[i], x1i, wts * kt)
                np.add.at(totals[i], x0i, wts * (1 - kt))
        else:
            base = K + 1
            w = self.window
            for p in range(X0.shape[0]):
                wp = wts[p]
                for i in range(L):
                    slots = []
                    for d in range(-w, w + 1):
                        j = i + d
                        if not 0 <= j < L:
                            slots.append(((K, 1.0),))
                        elif X0[p, j] == X1[p, j]:
                            slots.append(((int(X0[p, j]), 1.0),))
                        else:
                            slots.append(((int(X0[p, j]), 1.0 - kap_t[j]),
                                          (int(X1[p, j]), kap_t[j])))
                    x1i = int(X1[p, i])
                    for combo in itertools.product(*slots):
                        q = wp
                        kidx = 0
                        mult = 1
                        for tok, pr in combo:
                            q *= pr
                            kidx += tok * mult
                            mult *= base
                        if q == 0.0:
                            continue
                        cur = combo[w][0]
                        if cur == x1i:
                            counts[i, kidx, x1i] += q
                        else:
                            counts[i, kidx, x1i] += q * h[i]
                            counts[i, kidx, cur] += q * (1 - h[i])
                        totals[i, kidx] += q
        self._cache[key] = (counts, totals)
        return counts, totals

    def _masked_counts_windowed(self, a: int, b: int):
        """Windowed counts with the center slot masked out of the key.

        The target law for the masked coordinate is the plain time-s bridge
        marginal over its endpoint pair.
        """
        key = ("masked_win", a, b)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        t, s = self.grid_[a], self.grid_[b]
        kap_t = kappa_vector(self.schedule_, t, self.L_)
        kap_s = kappa_vector(self.schedule_, s, self.L_)
        L, K = self.L_, self.K_
        base = K + 1
        counts = np.zeros((L, self._n_window_keys, K))
        totals = np.zeros((L, self._n_window_keys))
        X0, X1, wts = self._pairs_x0, self._pairs_x1, self._pairs_w
        w = self.window
        if w == 0:
            key0 = K  # empty context: the single sentinel key
            for i in range(L):
                x0i, x1i = X0[:, i], X1[:, i]
                ks = kap_s[i]
                np.add.at(counts[i], (np.full(x0i.shape, key0), x0i), wts * (1 - ks))
                np.add.at(counts[i], (np.full(x1i.shape, key0), x1i), wts * ks)
                totals[i, key0] += wts.sum()
        else:
            for p in range(X0.shape[0]):
                wp = wts[p]
                for i in range(L):
                    slots = []
                    for dd in range(-w, w + 1):
                        j = i + dd
                        if dd == 0 or not 0 <= j < L:
                            slots.append(((K, 1.0),))
                        elif X0[p, j] == X1[p, j]:
                            slots.append(((int(X0[p, j]), 1.0),))
                        else:
                            slots.append(((int(X0[p, j]), 1.0 - kap_t[j]),
                                          (int(X1[p, j]), kap_t[j])))
                    x0i, x1i = int(X0[p, i]), int(X1[p, i])
                    for combo in itertools.product(*slots):
                        q = wp
                        kidx = 0
                        mult = 1
                        for tok, pr in combo:
                            q *= pr
                            kidx += tok * mult
                            mult *= base
                        if q == 0.0:
                            continue
                        counts[i, kidx, x1i] += q * kap_s[i]
                        counts[i, kidx, x0i] += q * (1 - kap_s[i])
                        totals[i, kidx] += q
        self._cache[key] = (counts, totals)
        return counts, totals

    def _masked_window_keys(self, tokens: np.ndarray, i: int) -> np.ndarray:
        """Window key with the center slot replaced by the sentinel."""
        w = self.window
        base = self.K_ + 1
        m = tokens.shape[0]
        keys = np.zeros(m, dtype=np.int64)
        mult = 1
        for d in range(-w, w + 1):
            j = i + d
            if d == 0 or not 0 <= j < self.L_:
                vals = np.full(m, self.K_, dtype=np.int64)
            else:
                vals = tokens[:, j]
            keys += vals * mult
            mult *= base
        return keys

    def _windowed_rows(self, tokens: np.ndarray, a: int, b: int,
                       masked: bool = False) -> np.ndarray:
        """(m, L, K) smoothed conditionals for a batch of current states."""
        if masked:
            counts, totals = self._masked_counts_windowed(a, b)
        else:
            counts, totals = self._counts_windowed(a, b)
        m = tokens.shape[0]
        out = np.empty((m, self.L_, self.K_))
        alpha = self.smoothing
        for i in range(self.L_):
            keys = (self._masked_window_keys(tokens, i) if masked
                    else self._window_keys(tokens, i))
            row = counts[i][keys]
            tot = totals[i][keys]
            hole = tot <= 0.0
            if np.any(hole):
                self.flags_.append(("unseen_window", a, b, i, int(hole.sum())))
            out[:, i, :] = (row + alpha) / (tot + self.K_ * alpha)[:, None]
            if np.any(hole):
                out[hole, i, :] = 1.0 / self.K_
        return out

    # -- public queries -------------------------------------------------------

    def posterior_rows(self, tokens: np.ndarray, t: float, s: float,
                       masked: bool = False) -> np.ndarray:
        """Conditionals for every coordinate of a batch: shape (m, L, K).

        With masked=True, coordinate i's own current token is dropped from
        the conditioning context of its row.
        """
        self._check_fitted()
        a, b = self.grid_index(t), self.grid_index(s)
        if b <= a:
            raise DomainError(f"need s > t on the grid, got t={t}, s={s}")
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        if self.context == "full_state":
            idx = seqspace.encode_batch(tokens, self.K_)
            arr = self._masked_full(a, b) if masked else self._posterior_full(a, b)
            return arr[idx]
        return self._windowed_rows(tokens, a, b, masked=masked)

    def posterior_row(self, x, t: float, s: float, masked: bool = False) -> np.ndarray:
        """(L, K) conditionals for one current state."""
        x = check_tokens(x, self.K_, self.L_)
        return self.posterior_rows(x[None, :], t, s, masked=masked)[0]

    def posterior_marginal(self, x, t: float, s: float, i: int) -> np.ndarray:
        """p(x_s^i = . | x_t = x) as a length-K distribution."""
        if not 0 <= i < self.L_:
            raise DomainError(f"coordinate {i} outside [0, {self.L_})")
        return self.posterior_row(x, t, s)[i]

    def log_p1_states(self) -> np.ndarray:
        """log of the exact target marginal over all states (full_state mode)."""
        self._check_fitted()
        if self.context != "full_state":
            raise DomainError("exact state marginal needs full_state mode")
        with np.errstate(divide="ignore"):
            return np.log(np.clip(self.p1_, PROB_FLOOR, None))

    def log_p1_factorized(self, tokens: np.ndarray) -> float:
        """log of the product of per-coordinate target marginals at `tokens`.

        This is the source-averaged factorized stand-in for p1(x); it is an
        approximation whenever target coordinates are correlated.
        """
        self._check_fitted()
        x = check_tokens(tokens, self.K_, self.L_)
        probs = self.p1_coord_[np.arange(self.L_), x]
        return float(np.log(np.clip(probs, PROB_FLOOR, None)).sum())

    def sample_source(self, rng, size: int | None = None) -> np.ndarray:
        """Draw from the coupling's source law p0."""
        self._check_fitted()
        rng = as_rng(rng)
        m = 1 if size is None else int(size)
        if self.context == "full_state":
            idx = rng.choice(self.n_states_, size=m, p=self.p0_ / self.p0_.sum())
            out = self.tokens_[idx].copy()
        else:
            rows = rng.choice(self._pairs_x0.shape[0], size=m,
                              p=self._pairs_w / self._pairs_w.sum())
            out = self._pairs_x0[rows].copy()
        return out[0] if size is None else out


# ---------------------------------------------------------------------------
# Ancestral (Euler-style) sampling
# ---------------------------------------------------------------------------


def _draw_initial(d: FactorizedDenoiser, p0, rng, m: int) -> np.ndarray:
    if p0 is None:
        return np.atleast_2d(d.sample_source(rng, size=m))
    p0 = np.asarray(p0, dtype=np.float64)
    if p0.ndim == 1:
        if d.context != "full_state":
            raise DomainError("state-vector p0 needs a full_state denoiser")
        idx = rng.choice(d.n_states_, size=m, p=p0 / p0.sum())
        return d.tokens_[idx].copy()
    if p0.ndim == 2:
        if p0.shape != (d.L_, d.K_):
            raise DomainError(f"per-coordinate p0 must have shape ({d.L_}, {d.K_})")
        u = rng.random((m, d.L_, 1))
        cdf = (p0 / p0.sum(axis=1, keepdims=True)).cumsum(axis=1)[None, :, :]
        return np.minimum((u > cdf).sum(axis=2), d.K_ - 1).astype(np.int64)
    raise DomainError("p0 must be a state vector, an (L, K) table, or None")


def _sample_rows(probs: np.ndarray, rng) -> np.ndarray:
    """Categorical draw along the last axis of an (m, L, K) array."""
    cdf = probs.cumsum(axis=-1)
    cdf /= cdf[..., -1:]
    u = rng.random(probs.shape[:-1] + (1,))
    return np.minimum((u > cdf).sum(axis=-1), probs.shape[-1] - 1).astype(np.int64)


def euler_sample(d: FactorizedDenoiser, p0=None, n_steps: int | None = None,
                 rng=None, size: int | None = None) -> np.ndarray:
    """Factorized ancestral sampling along the grid; returns state(s) at t=1.

    Every coordinate is drawn independently from its transition conditional
    at each step, so few-step runs inherit the factorization error of the
    coupling while many-step runs converge to the target marginal.
    """
    d._check_fitted()
    rng = as_rng(rng)
    if n_steps is None:
        n_steps = d.n_steps
    if n_steps < 1:
        raise DomainError("n_steps must be >= 1")
    if d.n_steps % n_steps != 0:
        raise DomainError(
            f"sampling with {n_steps} steps needs the {d.n_steps}-step fitting grid "
            "to contain every step endpoint (n_steps must divide the grid)"
        )
    stride = d.n_steps // n_steps
    m = 1 if size is None else int(size)
    x = _draw_initial(d, p0, rng, m)
    for k in range(n_steps):
        a, b = k * stride, (k + 1) * stride
        rows = d.posterior_rows(x, d.grid_[a], d.grid_[b])
        x = _sample_rows(rows, rng)
    return x[0] if size is None else x


# ---------------------------------------------------------------------------
# NLL evaluation
# ---------------------------------------------------------------------------


def nll_eval(d: FactorizedDenoiser, samples, rng=None, n_draws: int = 1,
             exact: bool = False, times=None) -> float:
    """Mean per-token negative log-likelihood -log p(x1^i | x_t).

    Averages over the target samples, grid times t < 1 (all of them in exact
    mode, `n_draws` random ones otherwise), source states drawn from the
    coupling conditional given x1, and bridge states x_t. Probabilities are
    clamped at 1e-12 (with a warning) so unreachable tokens stay finite.
    """
    d._check_fitted()
    samples = [check_tokens(x, d.K_, d.L_) for x in samples]
    if not samples:
        raise DomainError("nll_eval needs a nonempty sample list")
    if times is None:
        time_indices = list(range(d.n_steps))  # every grid point with t < 1
    else:
        time_indices = [d.grid_index(t) for t in times]
        if any(a >= d.n_steps for a in time_indices):
            raise DomainError("nll times must satisfy t < 1")

    clamped = 0
    total = 0.0
    count = 0

    if exact:
        if not isinstance(d.coupling_, ExactCoupling):
            raise DomainError("exact NLL needs an exact coupling")
        tokens = seqspace.all_states(d.K_, d.L_)
        for x1 in samples:
            i1 = seqspace.encode(x1, d.K_)
            col = d.coupling_.table[:, i1]
            if col.sum() <= 0:
                raise DomainError("sample x1 has zero coupling mass")
            cond_x0 = col / col.sum()
            for a in time_indices:
                t = d.grid_[a]
                kap = kappa_vector(d.schedule_, t, d.L_)
                for i0 in np.nonzero(cond_x0)[0]:
                    x0 = tokens[i0]
                    # enumerate bridge configurations coordinate by coordinate
                    slots = []
                    for j in range(d.L_):
                        if x0[j] == x1[j]:
                            slots.append(((int(x0[j]), 1.0),))
                        else:
                            slots.append(((int(x0[j]), 1.0 - kap[j]),
                                          (int(x1[j]), kap[j])))
                    for combo in itertools.product(*slots):
                        q = cond_x0[i0]
                        xt = np.empty(d.L_, dtype=np.int64)
                        for j, (tok, pr) in enumerate(combo):
                            q *= pr
                            xt[j] = tok
                        if q == 0.0:
                            continue
                        row = d.posterior_row(xt, t, 1.0)
                        pvals = row[np.arange(d.L_), x1]
                        if np.any(pvals < PROB_FLOOR):
                            clamped += 1
                        pvals = np.clip(pvals, PROB_FLOOR, None)
                        total += q * float(-np.log(pvals).mean())
                        count += q
        mean = total / (count if count else 1.0)
    else:
        rng = as_rng(rng)
        if isinstance(d.coupling_, ExactCoupling):
            tokens = seqspace.all_states(d.K_, d.L_)
        for x1 in samples:
            for _ in range(max(1, n_draws)):
                a = int(rng.choice(time_indices))
                t = d.grid_[a]
                if isinstance(d.coupling_, ExactCoupling):
                    col = d.coupling_.table[:, seqspace.encode(x1, d.K_)]
                    x0 = tokens[rng.choice(col.shape[0], p=col / col.sum())]
                else:
                    c = d.coupling_
                    match = np.all(c.x1 == x1[None, :], axis=1)
                    if not match.any():
                        raise DomainError("sample x1 absent from the empirical coupling")
                    wts = c.weights * match
                    x0 = c.x0[rng.choice(c.n_pairs, p=wts / wts.sum())]
                xt = bridge_sample(x0, x1, t, d.schedule_, rng)
                row = d.posterior_row(xt, t, 1.0)
                pvals = row[np.arange(d.L_), x1]
                if np.any(pvals < PROB_FLOOR):
                    clamped += 1
                pvals = np.clip(pvals, PROB_FLOOR, None)
                total += float(-np.log(pvals).mean())
                count += 1
        mean = total / count

    if clamped:
        warnings.warn(f"nll_eval clamped {clamped} zero-probability lookups at {PROB_FLOOR}",
                      stacklevel=2)
    return float(mean)
