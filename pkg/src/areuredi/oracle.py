"""Brute-force ground truth on enumerable spaces.

Everything here is exact: Pareto fronts by dominance filtering over all
states, scalarization maximizer sets, the single-coordinate MH kernel as a
dense row-stochastic matrix (for invariance and detailed-balance checks),
tilted target densities, hypervolume, and total variation. These are the
instruments the guided sampler is verified against, so they deliberately
share the proposal construction with the sampler module and nothing else.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import seqspace
from ._validation import as_rng, check_weights, is_interior
from .errors import DomainError
from .flows import FactorizedDenoiser
from .objectives import ObjectiveSuite, TabulatedSuite
from .sampler import SamplerConfig, build_proposal, prune_candidates

#: spaces above this are refused by the dense-kernel oracle
KERNEL_CAP = 1 << 14


def score_table(suite: ObjectiveSuite) -> np.ndarray:
    """(n_states, N) normalized scores; tabulates the suite if necessary."""
    tab = suite if isinstance(suite, TabulatedSuite) else suite.tabulate()
    return tab.table


@dataclass(frozen=True)
class ParetoFront:
    """All Pareto-optimal states (score-tied members kept), by state index."""

    indices: np.ndarray
    scores: np.ndarray
    K: int
    L: int

    def __len__(self):
        return self.indices.shape[0]

    def sequences(self) -> np.ndarray:
        return seqspace.all_states(self.K, self.L)[self.indices]

    def contains(self, idx) -> np.ndarray:
        return np.isin(np.asarray(idx), self.indices)


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    """Weak improvement everywhere plus strict improvement somewhere."""
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_front(suite: ObjectiveSuite) -> ParetoFront:
    """Dominance filter over the whole space.

    States are processed in descending score-sum order; a dominator always
    has a strictly larger sum, so earlier states are never removed and each
    state only needs one check against the running front.
    """
    scores = score_table(suite)
    order = np.argsort(-scores.sum(axis=1), kind="stable")
    front: list[int] = []
    fscores: list[np.ndarray] = []
    for idx in order:
        s = scores[idx]
        if fscores:
            arch = np.asarray(fscores)
            if bool(np.any(np.all(arch >= s, axis=1) & np.any(arch > s, axis=1))):
                continue
        front.append(int(idx))
        fscores.append(s)
    order2 = np.argsort(front)
    indices = np.asarray(front, dtype=np.int64)[order2]
    return ParetoFront(indices=indices, scores=scores[indices], K=suite.K, L=suite.L)


def scalarization_values(suite: ObjectiveSuite, weights) -> np.ndarray:
    """S_w(x) for every state."""
    w = check_weights(weights)
    return np.min(w[None, :] * score_table(suite), axis=1)


def argmax_set(suite: ObjectiveSuite, weights, rel_tol: float = 1e-12) -> np.ndarray:
    """All maximizers of the weighted bottleneck, as sorted state indices.

    Non-interior weights degenerate the bottleneck (a zero weight zeroes S
    everywhere a score vanishes); a warning flags that every state may tie.
    """
    w = check_weights(weights)
    if not is_interior(w):
        warnings.warn("non-interior weights: weighted bottleneck degenerate, "
                      "maximizer set may be the whole space", stacklevel=2)
    S = scalarization_values(suite, w)
    top = S.max()
    return np.nonzero(S >= top - rel_tol * max(1.0, abs(top)))[0].astype(np.int64)


@dataclass(frozen=True)
class ExactKernel:
    """Dense random-scan MH kernel with its target and diagnostics."""

    matrix: np.ndarray          # (n, n) row-stochastic mixture over coordinates
    target: np.ndarray          # (n,) tilted stationary candidate
    eta: float
    weights: np.ndarray
    balancing: str
    alphas: np.ndarray          # (n, L, K) acceptance probability per move

    def stationarity_gap(self) -> float:
        pi = self.target
        return float(np.abs(pi @ self.matrix - pi).sum())

    def detailed_balance_gap(self) -> float:
        flow = self.target[:, None] * self.matrix
        return float(np.abs(flow - flow.T).max())

    def alpha_stats(self) -> dict:
        a = self.alphas[np.isfinite(self.alphas)]
        return {"min": float(a.min()), "mean": float(a.mean()),
                "frac_below_one": float(np.mean(a < 1.0 - 1e-12))}


def exact_target(log_p1: np.ndarray, suite: ObjectiveSuite, weights,
                 eta: float) -> np.ndarray:
    """pi(x) proportional to p1(x) * exp(eta * S_w(x)), normalized exactly."""
    if eta < 0:
        raise DomainError("eta must be nonnegative")
    S = scalarization_values(suite, weights)
    logpi = np.asarray(log_p1, dtype=np.float64) + eta * S
    logpi -= logpi.max()
    pi = np.exp(logpi)
    return pi / pi.sum()


def exact_kernel(d: FactorizedDenoiser, suite: ObjectiveSuite, weights,
                 eta: float, balancing: str = "barker", t_index: int | None = None,
                 target_time: str = "one", target_density: str = "exact_p1",
                 prior_mode: str = "masked") -> ExactKernel:
    """Assemble the frozen-eta single-coordinate kernel K = mean_i K_i.

    Pruning is disabled (exactness requires full candidate sets), the chain
    time is frozen at grid point `t_index` (midpoint by default), and the
    target density follows `target_density`.
    """
    d._check_fitted()
    if d.context != "full_state":
        raise DomainError("the dense kernel oracle needs a full_state denoiser")
    n, L, K = d.n_states_, d.L_, d.K_
    if n > KERNEL_CAP:
        raise DomainError(f"state space {n} exceeds the dense-kernel cap {KERNEL_CAP}")
    w = check_weights(weights, suite.N)
    cfg = SamplerConfig(balancing=balancing, target_density=target_density,
                        target_time=target_time, prior_mode=prior_mode)
    a = d.n_steps // 2 if t_index is None else int(t_index)
    if not 0 <= a < d.n_steps:
        raise DomainError(f"t_index {a} outside the grid")
    b = d.n_steps if target_time == "one" else a + 1

    scores = score_table(suite)
    S = np.min(w[None, :] * scores, axis=1)
    if target_density == "exact_p1":
        log_p1 = d.log_p1_states()
    else:
        with np.errstate(divide="ignore"):
            logc = np.log(np.clip(d.p1_coord_, 1e-12, None))
        log_p1 = np.array([logc[np.arange(L), d.tokens_[z]].sum() for z in range(n)])
    log_pi = log_p1 + eta * S

    prior = (d._masked_full(a, b) if prior_mode == "masked"
             else d._posterior_full(a, b))  # (n, L, K)
    tokens = d.tokens_
    powK = K ** np.arange(L, dtype=np.int64)

    # proposal rows Q[z, i, y]
    Q = np.zeros((n, L, K))
    neighbor = np.empty((n, L, K), dtype=np.int64)
    for i in range(L):
        neighbor[:, i, :] = (np.arange(n)[:, None]
                             + (np.arange(K)[None, :] - tokens[:, i][:, None]) * powK[i])
    for z in range(n):
        for i in range(L):
            log_r = eta * (S[neighbor[z, i]] - S[z])
            cand, cand_prior = prune_candidates(prior[z, i], int(tokens[z, i]), 1.0, None)
            q = build_proposal(cand_prior, log_r[cand], balancing)
            Q[z, i, cand] = q

    alphas = np.full((n, L, K), np.nan)
    kernel = np.zeros((n, n))
    for z in range(n):
        for i in range(L):
            cur = int(tokens[z, i])
            diag_extra = 0.0
            for y in range(K):
                z2 = int(neighbor[z, i, y])
                if y == cur:
                    alphas[z, i, y] = 1.0
                    diag_extra += Q[z, i, y]
                    continue
                q_fwd = Q[z, i, y]
                q_rev = Q[z2, i, cur]
                if q_fwd <= 0.0:
                    continue
                if q_rev <= 0.0:
                    alpha = 0.0
                else:
                    log_alpha = (log_pi[z2] + np.log(q_rev)) - (log_pi[z] + np.log(q_fwd))
                    alpha = min(1.0, float(np.exp(min(log_alpha, 0.0))))
                alphas[z, i, y] = alpha
                kernel[z, z2] += q_fwd * alpha / L
                diag_extra += q_fwd * (1.0 - alpha)
            kernel[z, z] += diag_extra / L

    target = exact_target(log_p1, suite, w, eta)
    return ExactKernel(matrix=kernel, target=target, eta=float(eta), weights=w,
                       balancing=balancing, alphas=alphas)


# ---------------------------------------------------------------------------
# Quality metrics
# ---------------------------------------------------------------------------


def _check_hv_inputs(points, reference):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise DomainError("hypervolume needs a nonempty (m, N) point matrix")
    ref = np.asarray(reference, dtype=np.float64)
    if ref.shape != (pts.shape[1],):
        raise DomainError("reference dimension mismatch")
    if np.any(pts < ref[None, :]):
        raise DomainError("reference must be dominated by every point")
    return np.unique(pts, axis=0), ref


def _nondominated(pts: np.ndarray) -> np.ndarray:
    keep = []
    for k in range(pts.shape[0]):
        s = pts[k]
        others = np.delete(pts, k, axis=0)
        if others.size and np.any(np.all(others >= s, axis=1) & np.any(others > s, axis=1)):
            continue
        keep.append(k)
    return pts[keep]


def _hv2(pts: np.ndarray, ref: np.ndarray) -> float:
    pts = _nondominated(pts)
    order = np.argsort(-pts[:, 0], kind="stable")
    pts = pts[order]
    hv = 0.0
    best_y = ref[1]
    xs = np.append(pts[:, 0], ref[0])
    for k in range(pts.shape[0]):
        y = max(best_y, pts[k, 1])
        hv += (xs[k] - xs[k + 1]) * (y - ref[1])
        best_y = y
    return hv


def _hv3(pts: np.ndarray, ref: np.ndarray) -> float:
    # slice along the third objective: between consecutive levels the active
    # cross-section is constant, so the volume is sum(area * slab height)
    pts = _nondominated(pts)
    levels = np.unique(pts[:, 2])[::-1]
    hv = 0.0
    for k, z in enumerate(levels):
        active = pts[pts[:, 2] >= z][:, :2]
        area = _hv2(active, ref[:2])
        z_next = levels[k + 1] if k + 1 < levels.size else ref[2]
        hv += area * (z - z_next)
    return hv


def hypervolume(points, reference, *, rng=None, n_samples: int = 1 << 16,
                return_std_error: bool = False):
    """Measure of the region dominated by `points` above `reference`.

    Exact for 2 and 3 objectives (sweep / slicing); Monte-Carlo with a
    reported standard error for 4 or more.
    """
    pts, ref = _check_hv_inputs(points, reference)
    N = pts.shape[1]
    if N == 1:
        val, se = float(pts[:, 0].max() - ref[0]), 0.0
    elif N == 2:
        val, se = _hv2(pts, ref), 0.0
    elif N == 3:
        val, se = _hv3(pts, ref), 0.0
    else:
        rng = as_rng(rng)
        hi = pts.max(axis=0)
        box = np.prod(hi - ref)
        if box <= 0:
            val, se = 0.0, 0.0
        else:
            u = rng.random((n_samples, N)) * (hi - ref)[None, :] + ref[None, :]
            dominated = np.zeros(n_samples, dtype=bool)
            for p in pts:
                dominated |= np.all(u <= p[None, :], axis=1)
            frac = dominated.mean()
            val = float(box * frac)
            se = float(box * np.sqrt(max(frac * (1 - frac), 0.0) / n_samples))
    if return_std_error:
        return val, se
    return val


def tv_distance(empirical_counts, exact: np.ndarray) -> float:
    """0.5 * L1 distance between normalized counts and an exact distribution."""
    c = np.asarray(empirical_counts, dtype=np.float64)
    p = np.asarray(exact, dtype=np.float64)
    if c.shape != p.shape:
        raise DomainError("support mismatch between counts and distribution")
    total = c.sum()
    if total <= 0:
        raise DomainError("empty empirical counts")
    return float(0.5 * np.abs(c / total - p).sum())
