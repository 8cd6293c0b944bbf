"""Benchmark tasks, baselines, seeded run matrices, and ablation drivers.

The budget currency is objective evaluations (one evaluation = one sequence
scored on all objectives), counted through the suite's own tally rather than
assumed from loop structure. Guided runs consume whatever their proposals
need; baselines are then granted exactly that count for a fair comparison.

Every run is reproducible byte for byte from (task, method, seed, config):
randomness flows through Philox streams keyed by the run seed, and wall
clock time is kept out of the deterministic artifacts.
"""

from __future__ import annotations

import time
import warnings
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import seqspace
from ._validation import stream_rng
from .errors import DomainError
from .flows import EmpiricalCoupling, FactorizedDenoiser
from .objectives import (Normalizer, ObjectiveSuite, sample_weight,
                         suite_objective, uniform_weights)
from .oracle import ParetoFront, hypervolume, pareto_front
from .rectify import rectify_exact
from .sampler import SamplerConfig, run_chains

MODEL_SEED = 1_000_003  # one pretrained base model per task, shared across runs


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str
    pattern: tuple | None = None

    def build(self, L: int):
        return suite_objective(self.kind, L, pattern=self.pattern)


@dataclass(frozen=True)
class BenchmarkTask:
    """A synthetic multi-objective design task on a categorical space."""

    name: str
    K: int
    L: int
    objectives: tuple[ObjectiveSpec, ...]
    budget: int | None = None       # chain steps; None means 20 * L
    n_pairs: int = 4000             # base-model training pairs
    seeds: tuple[int, ...] = tuple(range(20))

    def __post_init__(self):
        if len(self.objectives) < 2:
            raise DomainError("benchmark tasks need at least 2 objectives")

    @property
    def step_budget(self) -> int:
        return self.budget if self.budget is not None else 20 * self.L

    def make_suite(self) -> ObjectiveSuite:
        objs = [spec.build(self.L) for spec in self.objectives]
        suite = ObjectiveSuite(self.K, self.L, objs, Normalizer.for_objectives(objs))
        if seqspace.n_states(self.K, self.L) <= (1 << 17):
            return suite.tabulate()
        return suite


TASKS: dict[str, BenchmarkTask] = {
    t.name: t for t in (
        BenchmarkTask("lotz5", 2, 5, (ObjectiveSpec("leading_ones"),
                                      ObjectiveSpec("trailing_zeros"))),
        BenchmarkTask("lotz6", 2, 6, (ObjectiveSpec("leading_ones"),
                                      ObjectiveSpec("trailing_zeros"))),
        BenchmarkTask("lotz8", 2, 8, (ObjectiveSpec("leading_ones"),
                                      ObjectiveSpec("trailing_zeros"))),
        BenchmarkTask("lotz4x8", 4, 8, (ObjectiveSpec("leading_ones"),
                                        ObjectiveSpec("trailing_zeros"))),
        BenchmarkTask("tri8", 2, 8, (ObjectiveSpec("leading_ones"),
                                     ObjectiveSpec("trailing_zeros"),
                                     ObjectiveSpec("motif_count", (0, 1)))),
    )
}


def get_task(name: str) -> BenchmarkTask:
    try:
        return TASKS[name]
    except KeyError:
        raise DomainError(f"unknown benchmark task {name!r}; "
                          f"known: {sorted(TASKS)}") from None


def build_model(task: BenchmarkTask, rectified: bool = False) -> FactorizedDenoiser:
    """The task's base generative model: a windowed denoiser on uniform pairs.

    With rectified=True the aggregated coupling is rectified exactly first
    (small spaces only) and the denoiser refit on it in full-state mode.
    """
    rng = stream_rng(MODEL_SEED, zlib.crc32(task.name.encode()) % (1 << 30))
    x0 = rng.integers(0, task.K, size=(task.n_pairs, task.L))
    x1 = rng.integers(0, task.K, size=(task.n_pairs, task.L))
    coupling = EmpiricalCoupling(x0, x1, task.K)
    T = task.step_budget
    if rectified:
        exact = coupling.to_exact(cap=1 << 12)
        exact = rectify_exact(exact)
        return FactorizedDenoiser(n_steps=T, context="full_state").fit(exact)
    return FactorizedDenoiser(n_steps=T, context="windowed", window=0).fit(coupling)


def default_config(task: BenchmarkTask) -> SamplerConfig:
    return SamplerConfig(eta_min=1.0, eta_max=20.0, n_steps=task.step_budget,
                         weights=None, balancing="barker", top_p=1.0,
                         monotone=True, scan="random",
                         target_density="factorized_p1", prior_mode="masked")


@dataclass
class RunResult:
    """One (task, method, seed) cell: final population plus quality metrics."""

    task: str
    method: str
    seed: int
    population: np.ndarray          # (m, L) tokens
    scores: np.ndarray              # (m, N) normalized
    evaluations: int
    hypervolume: float
    coverage: float
    objective_means: np.ndarray     # (N,) mean normalized score of the population
    iteration_means: np.ndarray | None = None   # (T, N), guided runs only
    wall_clock: float = 0.0         # informational; never serialized

    def csv_row(self, names: list[str]) -> dict:
        row = {"task": self.task, "method": self.method, "seed": self.seed,
               "population": int(self.population.shape[0]),
               "evaluations": int(self.evaluations),
               "hypervolume": repr(float(self.hypervolume)),
               "coverage": repr(float(self.coverage))}
        for k, n in enumerate(names):
            row[f"mean_{n}"] = repr(float(self.objective_means[k]))
        return row


def _front_or_none(suite: ObjectiveSuite) -> ParetoFront | None:
    if seqspace.n_states(suite.K, suite.L) > (1 << 17):
        return None
    return pareto_front(suite)


def _metrics(task, method, seed, suite, front, population, scores,
             encountered_idx, evaluations, iteration_means=None,
             wall_clock=0.0) -> RunResult:
    hv = hypervolume(scores, np.zeros(suite.N))
    if front is not None and encountered_idx is not None:
        coverage = float(np.isin(front.indices, encountered_idx).mean())
    else:
        coverage = float("nan")
    return RunResult(
        task=task.name, method=method, seed=seed, population=population,
        scores=scores, evaluations=evaluations, hypervolume=hv,
        coverage=coverage, objective_means=scores.mean(axis=0),
        iteration_means=iteration_means, wall_clock=wall_clock,
    )


def run_areuredi(task: BenchmarkTask, seed: int, n_chains: int = 100,
                 config: SamplerConfig | None = None,
                 denoiser: FactorizedDenoiser | None = None,
                 suite: ObjectiveSuite | None = None,
                 resample_weights: bool = False,
                 score_suite: ObjectiveSuite | None = None) -> RunResult:
    """Guided chains on the task's base model.

    `suite` is what guides the chains; `score_suite` (defaulting to it) is
    what the final population is scored with, so ablations that drop an
    objective still report the dropped property.
    """
    t0 = time.perf_counter()
    suite = suite if suite is not None else task.make_suite()
    score_suite = score_suite if score_suite is not None else suite
    d = denoiser if denoiser is not None else build_model(task)
    cfg = config if config is not None else default_config(task)
    suite.reset_count()
    sampler_kw = {}
    if resample_weights:
        sampler_kw["weight_sampler"] = lambda r: sample_weight(r, suite.N)
    trajs = run_chains(cfg, d, suite, seed, n_chains, **sampler_kw)
    finals = np.stack([t.final_tokens for t in trajs])
    evals = suite.eval_count

    fscores = np.stack([score_suite.normalized(x) for x in finals])
    iteration_means = np.mean(np.stack([t.scores for t in trajs]), axis=0)
    visited = np.concatenate([t.visited for t in trajs])
    front = _front_or_none(score_suite)
    enc = (np.unique(seqspace.encode_batch(visited, task.K))
           if front is not None else None)
    return _metrics(task, "areuredi", seed, score_suite, front, finals, fscores,
                    enc, evals, iteration_means, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def _nondominated_mask(scores: np.ndarray) -> np.ndarray:
    m = scores.shape[0]
    keep = np.ones(m, dtype=bool)
    for k in range(m):
        s = scores[k]
        dom = np.all(scores >= s, axis=1) & np.any(scores > s, axis=1)
        if dom.any():
            keep[k] = False
    return keep


def run_baseline(kind: str, task: BenchmarkTask, budget: int, seed: int,
                 weights=None) -> RunResult:
    """random_search, one_plus_one_ea, or nsga2_lite at an exact eval budget."""
    if budget < 1:
        raise DomainError("budget must be >= 1")
    t0 = time.perf_counter()
    suite = task.make_suite()
    suite.reset_count()
    front = _front_or_none(suite)
    rng = stream_rng(seed, 0)
    K, L, N = task.K, task.L, suite.N

    if kind == "random_search":
        draws = rng.integers(0, K, size=(budget, L))
        scores = np.stack([suite.normalized(x) for x in draws])
        keep = _nondominated_mask(scores)
        pop, pscores = draws[keep], scores[keep]
        encountered = draws

    elif kind == "one_plus_one_ea":
        w = (np.asarray(weights, dtype=np.float64) if weights is not None
             else uniform_weights(N))
        if np.any(w <= 0):
            warnings.warn("non-interior weights degrade the weighted-sum climb "
                          "to a subset of objectives", stacklevel=2)
        x = rng.integers(0, K, size=L)
        sx = suite.normalized(x)
        best = float(w @ sx)
        seen = [x.copy()]
        for _ in range(budget - 1):
            child = x.copy()
            i = int(rng.integers(L))
            child[i] = (child[i] + 1 + int(rng.integers(K - 1))) % K
            sc = suite.normalized(child)
            seen.append(child.copy())
            if float(w @ sc) >= best:
                x, sx, best = child, sc, float(w @ sc)
        pop, pscores = x[None, :], sx[None, :]
        encountered = np.stack(seen)

    elif kind == "nsga2_lite":
        pop_size = 50
        if budget < pop_size:
            raise DomainError(f"nsga2_lite needs budget >= population ({pop_size})")
        pop = rng.integers(0, K, size=(pop_size, L))
        scores = np.stack([suite.normalized(x) for x in pop])
        seen = [pop.copy()]
        archive, archive_scores = pop.copy(), scores.copy()
        spent = pop_size
        while spent + pop_size <= budget:
            children = np.empty_like(pop)
            for c in range(pop_size):
                a, b = rng.integers(pop_size, size=2)
                p1 = pop[a] if _nsga_better(scores[a], scores[b], rng) else pop[b]
                a, b = rng.integers(pop_size, size=2)
                p2 = pop[a] if _nsga_better(scores[a], scores[b], rng) else pop[b]
                cut = int(rng.integers(1, L)) if L > 1 else 0
                child = np.concatenate([p1[:cut], p2[cut:]])
                mut = rng.random(L) < (1.0 / L)
                if mut.any():
                    child = child.copy()
                    child[mut] = rng.integers(0, K, size=int(mut.sum()))
                children[c] = child
            cscores = np.stack([suite.normalized(x) for x in children])
            seen.append(children.copy())
            spent += pop_size
            allpop = np.concatenate([pop, children])
            allsc = np.concatenate([scores, cscores])
            sel = _nsga_select(allsc, pop_size, rng)
            pop, scores = allpop[sel], allsc[sel]
            arch = np.concatenate([archive, children])
            arch_s = np.concatenate([archive_scores, cscores])
            keep = _nondominated_mask(arch_s)
            archive, archive_scores = arch[keep], arch_s[keep]
        if spent < budget:  # pad the remainder so the budget is consumed exactly
            extra = rng.integers(0, K, size=(budget - spent, L))
            escores = np.stack([suite.normalized(x) for x in extra])
            seen.append(extra)
            arch = np.concatenate([archive, extra])
            arch_s = np.concatenate([archive_scores, escores])
            keep = _nondominated_mask(arch_s)
            archive, archive_scores = arch[keep], arch_s[keep]
        pop, pscores = archive, archive_scores
        encountered = np.concatenate(seen)

    else:
        raise DomainError(f"unknown baseline {kind!r}")

    if suite.eval_count != budget:
        raise DomainError(
            f"budget accounting violated: consumed {suite.eval_count} != {budget}")
    enc_idx = (np.unique(seqspace.encode_batch(encountered, K))
               if front is not None else None)
    return _metrics(task, kind, seed, suite, front, pop, pscores, enc_idx,
                    suite.eval_count, None, time.perf_counter() - t0)


def _nsga_better(sa: np.ndarray, sb: np.ndarray, rng) -> bool:
    if bool(np.all(sa >= sb) and np.any(sa > sb)):
        return True
    if bool(np.all(sb >= sa) and np.any(sb > sa)):
        return False
    return bool(rng.random() < 0.5)


def _nsga_select(scores: np.ndarray, k: int, rng) -> np.ndarray:
    """Nondominated sorting with crowding-distance tie-break."""
    m = scores.shape[0]
    remaining = np.arange(m)
    chosen: list[int] = []
    while remaining.size and len(chosen) < k:
        keep = _nondominated_mask(scores[remaining])
        front = remaining[keep]
        if len(chosen) + front.size <= k:
            chosen.extend(front.tolist())
        else:
            crowd = _crowding(scores[front])
            order = np.argsort(-crowd, kind="stable")
            chosen.extend(front[order][: k - len(chosen)].tolist())
        remaining = remaining[~keep]
    return np.asarray(chosen[:k], dtype=np.int64)


def _crowding(scores: np.ndarray) -> np.ndarray:
    m, N = scores.shape
    dist = np.zeros(m)
    for n in range(N):
        order = np.argsort(scores[:, n], kind="stable")
        dist[order[0]] = dist[order[-1]] = np.inf
        rng_n = scores[order[-1], n] - scores[order[0], n]
        if rng_n <= 0 or m < 3:
            continue
        gaps = (scores[order[2:], n] - scores[order[:-2], n]) / rng_n
        dist[order[1:-1]] += gaps
    return dist


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ETA_CELLS = {
    "annealed": (1.0, 20.0),
    "fixed_min": (1.0, 1.0),
    "fixed_mid": (10.5, 10.5),
    "fixed_max": (20.0, 20.0),
}


def run_ablation(task: BenchmarkTask, axis: str, seeds, n_chains: int = 25,
                 config: SamplerConfig | None = None,
                 resample_weights: bool = False) -> list[RunResult]:
    """One-axis ablation: guidance (drop each objective), eta schedules,
    monotone on/off, or base model rectified/unrectified."""
    base_cfg = config if config is not None else default_config(task)
    suite = task.make_suite()
    d = build_model(task)
    results = []

    if axis == "guidance":
        cells = [("all", None)] + [(f"drop_{spec.kind}", k)
                                   for k, spec in enumerate(task.objectives)]
        for label, drop in cells:
            if drop is None:
                sub_suite, cfg = suite, base_cfg
            else:
                kept = [s for k, s in enumerate(task.objectives) if k != drop]
                objs = [s.build(task.L) for s in kept]
                sub_suite = ObjectiveSuite(task.K, task.L, objs,
                                           Normalizer.for_objectives(objs))
                if seqspace.n_states(task.K, task.L) <= (1 << 17):
                    sub_suite = sub_suite.tabulate()
                cfg = replace(base_cfg, weights=None)
            for seed in seeds:
                r = run_areuredi(task, seed, n_chains, cfg, d, sub_suite,
                                 resample_weights, score_suite=suite)
                r.method = f"areuredi[guidance={label}]"
                results.append(r)
    elif axis == "eta":
        for label, (lo, hi) in ETA_CELLS.items():
            cfg = replace(base_cfg, eta_min=lo, eta_max=hi)
            for seed in seeds:
                r = run_areuredi(task, seed, n_chains, cfg, d, suite,
                                 resample_weights)
                r.method = f"areuredi[eta={label}]"
                results.append(r)
    elif axis == "monotone":
        for label, flag in (("on", True), ("off", False)):
            cfg = replace(base_cfg, monotone=flag)
            for seed in seeds:
                r = run_areuredi(task, seed, n_chains, cfg, d, suite,
                                 resample_weights)
                r.method = f"areuredi[monotone={label}]"
                results.append(r)
    elif axis == "model":
        for label, rect in (("base", False), ("rectified", True)):
            dd = build_model(task, rectified=rect)
            for seed in seeds:
                r = run_areuredi(task, seed, n_chains, base_cfg, dd, suite,
                                 resample_weights)
                r.method = f"areuredi[model={label}]"
                results.append(r)
    else:
        raise DomainError(f"unknown ablation axis {axis!r}")
    return results
