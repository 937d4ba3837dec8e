"""Choosing which DGs to pin.

The problem: use as few pins as possible while keeping the guaranteed
consensus rate ``G_c * lambda_min(L + c_pin * Psi)`` at or above ``rho_star``,
then take the largest ``lambda_min`` among the smallest feasible sets.
Both stages are solved together by comparing ``(feasible, -count, lambda)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .cybergraph import CommGraph, convergence_rate, format_edges, lambda_min_batch, subsets

TIE_TOL = 1e-12
EXHAUSTIVE_MAX_M = 20
_CHUNK = 8192


@dataclass(frozen=True)
class PinningProblem:
    graph: CommGraph
    G_c: float
    c_pin: float
    rho_star: float

    def __post_init__(self):
        if not (self.G_c > 0 and self.c_pin > 0):
            raise ValueError("G_c and c_pin must be positive")
        if not self.rho_star >= 0:
            raise ValueError("rho_star must be non-negative")

    @property
    def m(self) -> int:
        return self.graph.m


@dataclass(frozen=True)
class Verification:
    feasible: bool
    rate: float


@dataclass(frozen=True)
class PinningResult:
    pins: tuple[int, ...]  # 0-based, sorted
    feasible: bool
    rate: float
    method: str
    seed: int | None = None
    wall_time: float = 0.0

    @property
    def cardinality(self) -> int:
        return len(self.pins)

    def mask(self, m: int) -> np.ndarray:
        p = np.zeros(m, dtype=bool)
        p[list(self.pins)] = True
        return p


def verify(problem: PinningProblem, pins) -> Verification:
    pins = np.asarray(pins, dtype=bool)
    if pins.shape != (problem.m,):
        raise ValueError(f"pin vector has shape {pins.shape}, expected ({problem.m},)")
    if problem.m == 0:
        return Verification(True, 0.0)
    rate = convergence_rate(problem.graph, pins, problem.G_c, problem.c_pin)
    return Verification(rate >= problem.rho_star, rate)


def _pins_tuple(mask) -> tuple[int, ...]:
    return tuple(int(i) for i in np.flatnonzero(mask))


def _batch_lambda(L: np.ndarray, masks: np.ndarray, c_pin: float) -> np.ndarray:
    out = np.empty(len(masks))
    idx = np.arange(L.shape[0])
    for s in range(0, len(masks), _CHUNK):
        blk = masks[s : s + _CHUNK]
        M = np.broadcast_to(L, (len(blk),) + L.shape).copy()
        M[:, idx, idx] += c_pin * blk
        out[s : s + _CHUNK] = lambda_min_batch(M)
    return np.maximum(out, 0.0)


class ProblemTooLarge(ValueError):
    pass


def exhaustive_pinning(problem: PinningProblem) -> PinningResult:
    """Exact answer by enumerating subsets in order of increasing size."""
    m = problem.m
    if m > EXHAUSTIVE_MAX_M:
        raise ProblemTooLarge(f"exhaustive search limited to m <= {EXHAUSTIVE_MAX_M} (got {m})")
    t0 = time.perf_counter()
    L = problem.graph.laplacian()
    for k in range(m + 1):
        masks = subsets(m, k)
        lam = _batch_lambda(L, masks, problem.c_pin)
        order = np.flatnonzero(problem.G_c * lam >= problem.rho_star)
        if not order.size:
            continue
        best = lam[order].max()
        # lexicographically first among ties; re-check with the scalar path
        for i in order[lam[order] >= best - TIE_TOL]:
            v = verify(problem, masks[i])
            if v.feasible:
                return PinningResult(_pins_tuple(masks[i]), True, v.rate, "exhaustive", None, time.perf_counter() - t0)
    v = verify(problem, np.ones(m, dtype=bool))
    return PinningResult(tuple(range(m)), False, v.rate, "exhaustive", None, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# genetic algorithm


@dataclass(frozen=True)
class GaParams:
    population: int = 50
    generations: int = 200
    crossover_prob: float = 0.8
    mutation_prob: float | None = None  # default 1/m
    elitism: int = 2
    tournament: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if self.generations < 0:
            raise ValueError("generations must be non-negative")
        for p in (self.crossover_prob, self.mutation_prob):
            if p is not None and not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if not 0 <= self.elitism <= self.population:
            raise ValueError("elitism must lie in [0, population]")
        if self.tournament < 1:
            raise ValueError("tournament size must be at least 1")


def fitness(problem: PinningProblem, count: int, lam: float) -> float:
    """Scalar score with separated bands.

    Infeasible sets score ``rate / rho_star`` in [0, 1). Feasible sets score
    ``1 + (m - count) + lam / (2 c_pin)``; the last term stays below 1
    because ``lambda_min(L + c Psi) <= c``, so fewer pins always wins.
    """
    rate = problem.G_c * lam
    if rate >= problem.rho_star:
        return 1.0 + (problem.m - count) + lam / (2.0 * problem.c_pin)
    return max(rate, 0.0) / problem.rho_star


def _better(fa: float, ka: tuple, fb: float, kb: tuple) -> bool:
    if fa > fb + TIE_TOL:
        return True
    if fa < fb - TIE_TOL:
        return False
    return (len(ka), ka) < (len(kb), kb)


def ga_pinning(problem: PinningProblem, params: GaParams = GaParams()) -> PinningResult:
    """Binary-chromosome GA (tournament selection, uniform crossover, bit flips)."""
    t0 = time.perf_counter()
    m = problem.m
    rng = np.random.default_rng(params.seed)
    pm = params.mutation_prob if params.mutation_prob is not None else 1.0 / max(m, 1)
    L = problem.graph.laplacian()
    cache: dict[bytes, float] = {}

    def score(pop: np.ndarray) -> np.ndarray:
        keys = [row.tobytes() for row in pop]
        new = [i for i, k in enumerate(keys) if k not in cache]
        if new:
            seen = {}
            for i in new:
                seen.setdefault(keys[i], i)
            idx = list(seen.values())
            lam = _batch_lambda(L, pop[idx], problem.c_pin)
            for i, l in zip(idx, lam):
                cache[keys[i]] = float(l)
        lam = np.array([cache[k] for k in keys])
        rate = problem.G_c * lam
        feas = 1.0 + (m - pop.sum(axis=1)) + lam / (2.0 * problem.c_pin)
        infeas = np.maximum(rate, 0.0) / problem.rho_star if problem.rho_star > 0 else np.zeros_like(rate)
        return np.where(rate >= problem.rho_star, feas, infeas)

    pop = rng.random((params.population, m)) < 0.5
    fit = score(pop)
    best_f, best = -math.inf, None

    def track(pop, fit):
        nonlocal best_f, best
        top = fit.max()
        if best is not None and top < best_f - TIE_TOL:
            return
        for i in np.flatnonzero(fit >= top - TIE_TOL):
            f, k = fit[i], _pins_tuple(pop[i])
            if best is None or _better(f, k, best_f, best):
                best_f, best = f, k

    track(pop, fit)
    for _ in range(params.generations):
        order = np.lexsort((np.arange(len(fit)), -fit))
        elite = pop[order[: params.elitism]]
        n_child = params.population - params.elitism
        # tournament selection of two parents per child
        cand = rng.integers(params.population, size=(n_child, 2, params.tournament))
        winners = np.take_along_axis(cand, np.argmax(fit[cand], axis=-1)[..., None], axis=-1)[..., 0]
        pa, pb = pop[winners[:, 0]], pop[winners[:, 1]]
        cross = rng.random(n_child) < params.crossover_prob
        take_b = (rng.random((n_child, m)) < 0.5) & cross[:, None]
        child = np.where(take_b, pb, pa)
        child ^= rng.random((n_child, m)) < pm
        pop = np.concatenate([elite, child])
        fit = score(pop)
        track(pop, fit)

    mask = np.zeros(m, dtype=bool)
    mask[list(best)] = True
    v = verify(problem, mask)
    return PinningResult(best, v.feasible, v.rate, "ga", params.seed, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# decision report


def graph_hash(g: CommGraph) -> str:
    return hashlib.sha256(format_edges(g.m, g.edges).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class DecisionReport:
    graph_hash: str
    m: int
    edges: list[list[int]]  # 1-based
    rho_star: float
    G_c: float
    c_pin: float
    pins: list[int]  # 1-based
    cardinality: int
    rate: float
    feasible: bool
    method: str
    seed: int | None
    wall_time: float

    @classmethod
    def of(cls, problem: PinningProblem, result: PinningResult) -> "DecisionReport":
        return cls(
            graph_hash=graph_hash(problem.graph),
            m=problem.m,
            edges=[[u + 1, v + 1] for u, v in problem.graph.sorted_edges()],
            rho_star=problem.rho_star,
            G_c=problem.G_c,
            c_pin=problem.c_pin,
            pins=[p + 1 for p in result.pins],
            cardinality=result.cardinality,
            rate=result.rate,
            feasible=result.feasible,
            method=result.method,
            seed=result.seed,
            wall_time=result.wall_time,
        )

    def to_text(self) -> str:
        d = asdict(self)
        body = ",\n".join(f" {json.dumps(k)}: {json.dumps(d[k])}" for k in sorted(d))
        return "{\n" + body + "\n}\n"

    @classmethod
    def from_text(cls, text: str) -> "DecisionReport":
        return cls(**json.loads(text))

    def problem(self) -> PinningProblem:
        g = CommGraph.from_edges(self.m, [(u - 1, v - 1) for u, v in self.edges])
        return PinningProblem(g, self.G_c, self.c_pin, self.rho_star)

    def replay(self) -> Verification:
        """Re-verify the recorded pin set against the recorded problem."""
        p = self.problem()
        mask = np.zeros(self.m, dtype=bool)
        mask[[i - 1 for i in self.pins]] = True
        return verify(p, mask)
