"""Annealed, locally balanced Metropolis-Hastings over a discrete-flow prior.

Each iteration updates one coordinate: candidate tokens come from the
denoiser's per-coordinate conditional (optionally top-p / cap pruned, with
the current token always retained so the reverse move keeps positive
density), are reweighted by a balancing function of the guidance-weight
ratio, and the sampled candidate passes through an exact MH correction
against the tilted target p1(x) * exp(eta_t * S(x)). Guidance strength
eta_t follows a linear annealing ramp.

All tilt arithmetic is in the log domain. An optional monotonicity
constraint additionally rejects accepted moves that strictly decrease the
weighted sum of normalized scores.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import seqspace
from ._validation import as_rng, check_tokens, check_weights, stream_rng
from .errors import DomainError, NumericalError
from .flows import FactorizedDenoiser, euler_sample
from .objectives import AnnealSchedule, ObjectiveSuite, anneal, tchebycheff, uniform_weights

BALANCING_KINDS = ("barker", "sqrt")


def log_balance(kind: str, log_u):
    """log g(u) for log-domain input. barker: u/(1+u); sqrt: sqrt(u)."""
    log_u = np.asarray(log_u, dtype=np.float64)
    if kind == "barker":
        return -np.logaddexp(0.0, -log_u)
    if kind == "sqrt":
        return 0.5 * log_u
    raise DomainError(f"unknown balancing function {kind!r}")


def balance(kind: str, u: float) -> float:
    """g(u) on the probability scale; u must be positive."""
    if u <= 0:
        raise DomainError(f"balancing function needs u > 0, got {u}")
    return float(np.exp(log_balance(kind, np.log(u))))


@dataclass(frozen=True)
class SamplerConfig:
    """Chain hyperparameters. n_steps None means the 20*L default budget."""

    eta_min: float = 1.0
    eta_max: float = 20.0
    n_steps: int | None = None
    weights: tuple | None = None
    balancing: str = "barker"
    top_p: float = 1.0
    candidate_cap: int | None = None
    monotone: bool = False
    scan: str = "random"
    target_density: str = "exact_p1"
    target_time: str = "one"
    prior_mode: str = "masked"
    t_frozen: int | None = None
    init: str = "p0"
    hard_constraint: object = None

    def __post_init__(self):
        if self.balancing not in BALANCING_KINDS:
            raise DomainError(f"balancing must be one of {BALANCING_KINDS}")
        if self.prior_mode not in ("masked", "posterior"):
            raise DomainError(f"prior_mode must be masked or posterior, got {self.prior_mode!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise DomainError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.candidate_cap is not None and self.candidate_cap < 1:
            raise DomainError("candidate cap must be >= 1")
        if self.n_steps is not None and self.n_steps < 1:
            raise DomainError("n_steps must be >= 1")
        if self.scan not in ("random", "sweep"):
            raise DomainError(f"scan must be random or sweep, got {self.scan!r}")
        if self.target_density not in ("exact_p1", "factorized_p1"):
            raise DomainError(f"unknown target_density {self.target_density!r}")
        if self.target_time not in ("one", "next"):
            raise DomainError(f"target_time must be one or next, got {self.target_time!r}")
        if self.init not in ("p0", "model", "uniform"):
            raise DomainError(f"init must be p0, model or uniform, got {self.init!r}")
        # eta ordering is validated when the AnnealSchedule is built


@dataclass
class ChainTrajectory:
    """Per-iteration log of one chain plus the final state."""

    t_index: np.ndarray
    eta: np.ndarray
    coordinate: np.ndarray
    proposed: np.ndarray
    log_ratio: np.ndarray
    alpha: np.ndarray
    accepted: np.ndarray
    blocked: np.ndarray
    reverse_gap: np.ndarray
    S: np.ndarray
    scores: np.ndarray          # (T, N) of the state after each iteration
    visited: np.ndarray         # (T+1, L) tokens incl. the initial state
    final_tokens: np.ndarray = field(default=None)

    @property
    def T(self) -> int:
        return self.t_index.shape[0]


def candidate_set(d: FactorizedDenoiser, x, t: float, i: int,
                  top_p: float = 1.0, cap: int | None = None,
                  s: float = 1.0):
    """Pruned candidate tokens with renormalized prior probabilities.

    Tokens are ordered by prior probability (ties by token id); the smallest
    prefix reaching cumulative mass top_p is kept (or the first `cap`
    tokens), and the current token is appended if pruned away.
    """
    prior = d.posterior_marginal(x, t, s, i)
    x = check_tokens(x, d.K_, d.L_)
    return prune_candidates(prior, int(x[i]), top_p, cap)


def prune_candidates(prior: np.ndarray, current: int, top_p: float,
                     cap: int | None):
    """Core pruning rule on a raw prior vector; returns (tokens, renormalized)."""
    order = np.argsort(-prior, kind="stable")
    if cap is not None:
        keep = order[: min(cap, order.size)]
    elif top_p >= 1.0:
        keep = order
    else:
        cum = np.cumsum(prior[order])
        k = int(np.searchsorted(cum, top_p - 1e-15)) + 1
        keep = order[: min(k, order.size)]
    if current not in keep:
        keep = np.append(keep, current)
    p = prior[keep]
    total = p.sum()
    if total <= 0.0:
        raise NumericalError("candidate prior mass vanished")
    return keep.astype(np.int64), p / total


def reward_ratio(suite: ObjectiveSuite, weights, eta: float, x, i: int, y: int,
                 S_x: float | None = None) -> float:
    """log of the guidance-weight ratio for substituting token y at i."""
    x = np.asarray(x, dtype=np.int64)
    if y == x[i]:
        return 0.0
    w = check_weights(weights, suite.N)
    if S_x is None:
        S_x = tchebycheff(w, suite.normalized(x))
    x2 = x.copy()
    x2[i] = y
    S_y = tchebycheff(w, suite.normalized(x2))
    return float(eta) * (S_y - S_x)


def build_proposal(priors: np.ndarray, log_ratios: np.ndarray,
                   kind: str) -> np.ndarray:
    """Normalized locally balanced proposal prior(y) * g(r(y)) over candidates."""
    with np.errstate(divide="ignore"):
        logq = np.log(priors) + log_balance(kind, log_ratios)
    m = logq.max()
    if not np.isfinite(m):
        raise NumericalError("proposal weights collapsed to zero")
    q = np.exp(logq - m)
    return q / q.sum()


@dataclass
class _ChainState:
    tokens: np.ndarray
    index: int | None
    scores: np.ndarray
    S: float
    wsum: float
    log_p1: float


class _ChainContext:
    """Immutable per-run machinery shared by every iteration of a chain."""

    def __init__(self, cfg: SamplerConfig, d: FactorizedDenoiser,
                 suite: ObjectiveSuite, T: int):
        d._check_fitted()
        if suite.K != d.K_ or suite.L != d.L_:
            raise DomainError("objective suite and denoiser disagree on (K, L)")
        if cfg.t_frozen is not None:
            if not 0 <= cfg.t_frozen < d.n_steps:
                raise DomainError(f"t_frozen {cfg.t_frozen} outside the grid")
        elif d.n_steps % T != 0:
            raise DomainError(
                f"chain length {T} needs the denoiser grid ({d.n_steps} steps) "
                "to contain every chain time"
            )
        self.cfg = cfg
        self.d = d
        self.suite = suite
        self.T = T
        self.stride = d.n_steps // T if cfg.t_frozen is None else 0
        self.weights = (check_weights(cfg.weights, suite.N) if cfg.weights is not None
                        else uniform_weights(suite.N))
        self.powK = d.K_ ** np.arange(d.L_, dtype=np.int64)
        self.enumerable = d.context == "full_state"
        if cfg.target_density == "exact_p1":
            self.log_p1_states = d.log_p1_states()  # raises unless full_state
        else:
            self.log_p1_states = None
            with np.errstate(divide="ignore"):
                self.log_p1_coord = np.log(np.clip(d.p1_coord_, 1e-12, None))

    def grid_pair(self, it: int) -> tuple[int, int]:
        if self.cfg.t_frozen is not None:
            a = self.cfg.t_frozen
            step = 1
        else:
            a = it * self.stride
            step = self.stride
        if self.cfg.target_time == "one":
            return a, self.d.n_steps
        return a, min(a + step, self.d.n_steps)

    def prior_vector(self, state: _ChainState, it: int, i: int) -> np.ndarray:
        a, b = self.grid_pair(it)
        masked = self.cfg.prior_mode == "masked"
        if self.enumerable:
            arr = (self.d._masked_full(a, b) if masked
                   else self.d._posterior_full(a, b))
            return arr[state.index, i]
        if masked:
            counts, totals = self.d._masked_counts_windowed(a, b)
            key = self.d._masked_window_keys(state.tokens[None, :], i)[0]
        else:
            counts, totals = self.d._counts_windowed(a, b)
            key = self.d._window_keys(state.tokens[None, :], i)[0]
        row = counts[i][key]
        tot = totals[i][key]
        if tot <= 0.0:
            return np.full(self.d.K_, 1.0 / self.d.K_)
        alpha = self.d.smoothing
        return (row + alpha) / (tot + self.d.K_ * alpha)

    def log_p1(self, tokens: np.ndarray, index: int | None) -> float:
        if self.log_p1_states is not None:
            return float(self.log_p1_states[index])
        return float(self.log_p1_coord[np.arange(self.d.L_), tokens].sum())

    def make_state(self, tokens: np.ndarray) -> _ChainState:
        index = int(seqspace.encode(tokens, self.d.K_)) if self.enumerable else None
        scores = self.suite.normalized(tokens, index)
        S = tchebycheff(self.weights, scores)
        return _ChainState(tokens=tokens, index=index, scores=scores, S=S,
                           wsum=float(self.weights @ scores),
                           log_p1=self.log_p1(tokens, index))

    def mutated(self, state: _ChainState, i: int, y: int):
        tokens = state.tokens.copy()
        tokens[i] = y
        index = None
        if self.enumerable:
            index = state.index + int((y - state.tokens[i]) * self.powK[i])
        scores = self.suite.normalized(tokens, index)
        return tokens, index, scores


def mh_step(ctx: _ChainContext, state: _ChainState, it: int, i: int,
            eta: float, rng) -> tuple[_ChainState, dict]:
    """One locally balanced proposal + MH correction at coordinate i."""
    cfg = ctx.cfg
    cur = int(state.tokens[i])
    prior = ctx.prior_vector(state, it, i)
    cand, cand_prior = prune_candidates(prior, cur, cfg.top_p, cfg.candidate_cap)

    # forward proposal
    log_r = np.empty(cand.size)
    cand_scores = [None] * cand.size
    cand_state = [None] * cand.size
    for k, y in enumerate(cand):
        if y == cur:
            log_r[k] = 0.0
            continue
        tokens, index, scores = ctx.mutated(state, i, int(y))
        cand_state[k] = (tokens, index)
        cand_scores[k] = scores
        log_r[k] = eta * (tchebycheff(ctx.weights, scores) - state.S)
    q_fwd = build_proposal(cand_prior, log_r, cfg.balancing)
    pick = int(rng.choice(cand.size, p=q_fwd))
    y_star = int(cand[pick])

    record = {
        "coordinate": i, "proposed": y_star, "log_ratio": float(log_r[pick]),
        "alpha": 1.0, "accepted": True, "blocked": False, "reverse_gap": False,
    }
    if y_star == cur:
        return state, record  # identity proposal always stands

    tokens_p, index_p = cand_state[pick]
    scores_p = cand_scores[pick]
    S_p = tchebycheff(ctx.weights, scores_p)
    prop = _ChainState(tokens=tokens_p, index=index_p, scores=scores_p, S=S_p,
                       wsum=float(ctx.weights @ scores_p),
                       log_p1=ctx.log_p1(tokens_p, index_p))

    # reverse proposal, built by the same procedure at the proposed state
    prior_rev = ctx.prior_vector(prop, it, i)
    cand_rev, cand_rev_prior = prune_candidates(prior_rev, y_star, cfg.top_p,
                                                cfg.candidate_cap)
    where = np.nonzero(cand_rev == cur)[0]
    if where.size == 0:
        # pruning removed the return token: the reverse density is zero and
        # the only MH-correct continuation is rejection
        record.update(alpha=0.0, accepted=False, reverse_gap=True)
        return state, record
    log_r_rev = np.empty(cand_rev.size)
    for k, y in enumerate(cand_rev):
        if y == y_star:
            log_r_rev[k] = 0.0
        elif y == cur:
            log_r_rev[k] = eta * (state.S - prop.S)
        else:
            _, index2, scores2 = ctx.mutated(prop, i, int(y))
            log_r_rev[k] = eta * (tchebycheff(ctx.weights, scores2) - prop.S)
    q_rev = build_proposal(cand_rev_prior, log_r_rev, cfg.balancing)

    log_alpha = (prop.log_p1 + eta * prop.S + np.log(q_rev[where[0]])) \
        - (state.log_p1 + eta * state.S + np.log(q_fwd[pick]))
    alpha = min(1.0, float(np.exp(min(log_alpha, 0.0))))
    record["alpha"] = alpha
    accepted = np.log(rng.random()) < log_alpha if log_alpha < 0 else True
    if accepted and cfg.monotone and prop.wsum < state.wsum:
        record.update(accepted=False, blocked=True)
        return state, record
    if accepted and cfg.hard_constraint is not None and not cfg.hard_constraint(prop.tokens):
        record.update(accepted=False, blocked=True)
        return state, record
    record["accepted"] = bool(accepted)
    return (prop if accepted else state), record


def _initial_state(ctx: _ChainContext, rng, x0) -> _ChainState:
    if x0 is not None:
        return ctx.make_state(check_tokens(x0, ctx.d.K_, ctx.d.L_))
    if ctx.cfg.init == "uniform":
        return ctx.make_state(rng.integers(0, ctx.d.K_, size=ctx.d.L_))
    if ctx.cfg.init == "model":
        return ctx.make_state(euler_sample(ctx.d, rng=rng))
    return ctx.make_state(ctx.d.sample_source(rng))


def run_chain(cfg: SamplerConfig, d: FactorizedDenoiser, suite: ObjectiveSuite,
              rng, x0=None) -> ChainTrajectory:
    """Run one annealed chain for T iterations and log every step."""
    rng = as_rng(rng)
    T = cfg.n_steps if cfg.n_steps is not None else 20 * d.L_
    ctx = _ChainContext(cfg, d, suite, T)
    sched = AnnealSchedule(cfg.eta_min, cfg.eta_max, T)
    state = _initial_state(ctx, rng, x0)

    N = suite.N
    traj = ChainTrajectory(
        t_index=np.arange(T), eta=np.empty(T),
        coordinate=np.empty(T, dtype=np.int64), proposed=np.empty(T, dtype=np.int64),
        log_ratio=np.empty(T), alpha=np.empty(T),
        accepted=np.zeros(T, dtype=bool), blocked=np.zeros(T, dtype=bool),
        reverse_gap=np.zeros(T, dtype=bool),
        S=np.empty(T), scores=np.empty((T, N)),
        visited=np.empty((T + 1, d.L_), dtype=np.int64),
    )
    traj.visited[0] = state.tokens
    for it in range(T):
        eta = anneal(it, sched)
        i = int(rng.integers(d.L_)) if cfg.scan == "random" else it % d.L_
        state, rec = mh_step(ctx, state, it, i, eta, rng)
        traj.eta[it] = eta
        traj.coordinate[it] = rec["coordinate"]
        traj.proposed[it] = rec["proposed"]
        traj.log_ratio[it] = rec["log_ratio"]
        traj.alpha[it] = rec["alpha"]
        traj.accepted[it] = rec["accepted"]
        traj.blocked[it] = rec["blocked"]
        traj.reverse_gap[it] = rec["reverse_gap"]
        traj.S[it] = state.S
        traj.scores[it] = state.scores
        traj.visited[it + 1] = state.tokens
    traj.final_tokens = state.tokens
    return traj


def run_chains(cfg: SamplerConfig, d: FactorizedDenoiser, suite: ObjectiveSuite,
               seed: int, n_chains: int, x0=None, weight_sampler=None,
               stream_base: int = 0) -> list[ChainTrajectory]:
    """Independent chains on Philox streams (stream_base + chain index).

    `weight_sampler`, when given, draws a fresh weight vector per chain from
    its own dedicated stream, e.g. for Pareto-coverage runs.
    """
    out = []
    wrng = stream_rng(seed, stream_base + n_chains) if weight_sampler else None
    for c in range(n_chains):
        rng = stream_rng(seed, stream_base + c)
        cfg_c = cfg
        if weight_sampler is not None:
            w = weight_sampler(wrng)
            cfg_c = dataclasses.replace(cfg, weights=tuple(w))
        out.append(run_chain(cfg_c, d, suite, rng, x0=x0))
    return out


class GuidedSampler(BaseEstimator):
    """Estimator wrapper around the annealed guided chain.

    Composes with the rest of the ecosystem: hyperparameters live in
    __init__ (get_params/set_params/clone all work, including swapping the
    denoiser like any sub-estimator), fit() validates, sample() runs chains.
    """

    def __init__(self, denoiser=None, suite=None, weights=None, eta_min=1.0,
                 eta_max=20.0, n_steps=None, balancing="barker", top_p=1.0,
                 candidate_cap=None, monotone=False, scan="random",
                 target_density="exact_p1", target_time="one",
                 prior_mode="masked", init="p0", hard_constraint=None, seed=0):
        self.denoiser = denoiser
        self.suite = suite
        self.weights = weights
        self.eta_min = eta_min
        self.eta_max = eta_max
        self.n_steps = n_steps
        self.balancing = balancing
        self.top_p = top_p
        self.candidate_cap = candidate_cap
        self.monotone = monotone
        self.scan = scan
        self.target_density = target_density
        self.target_time = target_time
        self.prior_mode = prior_mode
        self.init = init
        self.hard_constraint = hard_constraint
        self.seed = seed

    def _config(self) -> SamplerConfig:
        w = tuple(self.weights) if self.weights is not None else None
        return SamplerConfig(
            eta_min=self.eta_min, eta_max=self.eta_max, n_steps=self.n_steps,
            weights=w, balancing=self.balancing, top_p=self.top_p,
            candidate_cap=self.candidate_cap, monotone=self.monotone,
            scan=self.scan, target_density=self.target_density,
            target_time=self.target_time, prior_mode=self.prior_mode,
            init=self.init, hard_constraint=self.hard_constraint,
        )

    def fit(self, X=None, y=None):
        if self.denoiser is None or self.suite is None:
            raise DomainError("GuidedSampler needs a fitted denoiser and an objective suite")
        cfg = self._config()
        T = cfg.n_steps if cfg.n_steps is not None else 20 * self.denoiser.L_
        _ChainContext(cfg, self.denoiser, self.suite, T)  # validates compatibility
        self.config_ = cfg
        return self

    def sample(self, n_chains: int = 100, x0=None, weight_sampler=None):
        """Run chains; returns (final tokens (n, L), list of trajectories)."""
        if not hasattr(self, "config_"):
            self.fit()
        trajs = run_chains(self.config_, self.denoiser, self.suite, self.seed,
                           n_chains, x0=x0, weight_sampler=weight_sampler)
        finals = np.stack([t.final_tokens for t in trajs])
        return finals, trajs
