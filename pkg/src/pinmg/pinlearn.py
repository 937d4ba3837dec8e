"""Learned pinning decisions: training data, a small MLP, and a verified decide.

Features are the lower triangle (diagonal included, row-major) of the graph
Laplacian; labels are the optimal pin set as independent per-DG bits. The
network is plain numpy: ReLU hidden layers, logistic outputs, mean binary
cross-entropy, mini-batch gradient descent with momentum.
"""

from __future__ import annotations

import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cybergraph import CommGraph, is_connected, small_world
from .pindecide import GaParams, PinningProblem, exhaustive_pinning, ga_pinning, verify

EXHAUSTIVE_LIMIT = 12


# --------------------------------------------------------------------------
# features


def vectorize_laplacian(L: np.ndarray) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.array_equal(L, L.T):
        raise ValueError("Laplacian must be symmetric")
    return L[np.tril_indices(L.shape[0])]


def feature_length(m: int) -> int:
    return m * (m + 1) // 2


def size_from_features(n: int) -> int:
    m = int((math.isqrt(8 * n + 1) - 1) // 2)
    if feature_length(m) != n:
        raise ValueError(f"{n} is not a triangular number")
    return m


def devectorize_laplacian(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    m = size_from_features(f.size)
    L = np.zeros((m, m))
    L[np.tril_indices(m)] = f
    return L + np.tril(L, -1).T


# --------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class DisruptionPolicy:
    """How many random edges to cut from each drawn graph.

    ``kind`` is ``none`` (keep the lattice-rewired graph), ``connected``
    (cut 0..max_removals edges, never disconnecting) or ``any`` (cut
    0..max_removals uniformly random edges).
    """

    kind: str = "connected"
    max_removals: int = 6

    def __post_init__(self):
        if self.kind not in ("none", "connected", "any"):
            raise ValueError(f"unknown disruption policy {self.kind!r}")
        if self.max_removals < 0:
            raise ValueError("max_removals must be non-negative")


@dataclass(frozen=True)
class DatasetSpec:
    m: int = 10
    mean_degree: int = 4
    rewire_prob: float = 0.2
    policy: DisruptionPolicy = DisruptionPolicy()
    G_c: float = 30.0
    c_pin: float = 1.0
    rho_star: float = 10.0


@dataclass(frozen=True)
class TrainingSample:
    index: int
    key: tuple
    features: np.ndarray
    labels: np.ndarray


@dataclass
class Dataset:
    spec: DatasetSpec
    samples: list[TrainingSample]
    skipped_infeasible: int = 0
    duplicates: int = 0

    @property
    def X(self) -> np.ndarray:
        return np.array([s.features for s in self.samples]).reshape(len(self.samples), -1)

    @property
    def Y(self) -> np.ndarray:
        return np.array([s.labels for s in self.samples], dtype=float).reshape(len(self.samples), -1)


def _disrupt(g: CommGraph, policy: DisruptionPolicy, rng: np.random.Generator) -> CommGraph:
    if policy.kind == "none" or policy.max_removals == 0:
        return g
    k = int(rng.integers(policy.max_removals + 1))
    for _ in range(k):
        edges = g.sorted_edges()
        if policy.kind == "connected":
            edges = [e for e in edges if is_connected(CommGraph(g.m, g.edges - {e}))]
        if not edges:
            break
        e = edges[int(rng.integers(len(edges)))]
        g = CommGraph(g.m, g.edges - {e})
    return g


def solve_label(problem: PinningProblem, seed: int = 0):
    if problem.m <= EXHAUSTIVE_LIMIT:
        return exhaustive_pinning(problem)
    return ga_pinning(problem, GaParams(seed=seed))


def draw_sample(spec: DatasetSpec, seed: int, index: int):
    """One Monte-Carlo draw; returns a TrainingSample or None if infeasible."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
    g = small_world(spec.m, spec.mean_degree, spec.rewire_prob, rng)
    g = _disrupt(g, spec.policy, rng)
    prob = PinningProblem(g, spec.G_c, spec.c_pin, spec.rho_star)
    res = solve_label(prob, seed=int(rng.integers(2**31)))
    if not res.feasible:
        return None
    labels = res.mask(spec.m).astype(np.int8)
    return TrainingSample(index, g.key(), vectorize_laplacian(g.laplacian()), labels)


def _draw_block(args):
    spec, seed, lo, hi = args
    return [draw_sample(spec, seed, i) for i in range(lo, hi)]


def gen_dataset(
    count: int,
    spec: DatasetSpec = DatasetSpec(),
    seed: int = 0,
    workers: int = 1,
    max_draws: int | None = None,
    block: int = 256,
) -> Dataset:
    """Draw samples by index until ``count`` distinct feasible graphs are found.

    Sample ``i`` uses its own stream ``SeedSequence(seed, spawn_key=(i,))``,
    and samples are merged in index order, so ``workers`` never changes the
    result.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    max_draws = max_draws if max_draws is not None else 20 * count + 1000
    out: list[TrainingSample] = []
    seen: set = set()
    skipped = dups = 0
    nxt = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while len(out) < count and nxt < max_draws:
            need = count - len(out)
            span = max(block, need) if pool is None else max(block * workers, need)
            jobs = []
            lo = nxt
            while lo < min(nxt + span, max_draws):
                hi = min(lo + block, nxt + span, max_draws)
                jobs.append((spec, seed, lo, hi))
                lo = hi
            nxt = lo
            results = pool.map(_draw_block, jobs) if pool else map(_draw_block, jobs)
            for blk in results:
                for s in blk:
                    if len(out) >= count:
                        break
                    if s is None:
                        skipped += 1
                    elif s.key in seen:
                        dups += 1
                    else:
                        seen.add(s.key)
                        out.append(s)
    finally:
        if pool is not None:
            pool.shutdown()
    if len(out) < count:
        raise RuntimeError(f"only {len(out)} distinct feasible samples in {max_draws} draws")
    return Dataset(spec, out, skipped, dups)


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def dataset_csv(ds: Dataset) -> str:
    m = ds.spec.m
    nf = feature_length(m)
    buf = io.StringIO()
    buf.write(",".join([f"f{i + 1}" for i in range(nf)] + [f"y{i + 1}" for i in range(m)]) + "\n")
    for s in ds.samples:
        buf.write(",".join([_fmt(v) for v in s.features] + [str(int(y)) for y in s.labels]) + "\n")
    return buf.getvalue()


def write_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(dataset_csv(ds))


def read_dataset(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(X, Y)`` from a dataset CSV."""
    lines = Path(path).read_text().splitlines()
    head = lines[0].split(",")
    nf = sum(1 for h in head if h.startswith("f"))
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()]).reshape(-1, len(head))
    return data[:, :nf], data[:, nf:]


# --------------------------------------------------------------------------
# network


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class MlpModel:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]  # (n_in, n_out)
    biases: list[np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    hidden: str = "relu"
    output: str = "logistic"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        self.layer_sizes = sizes
        if len(sizes) < 2:
            raise ValueError("need at least input and output layers")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("layer count mismatch")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i + 1} has shape {W.shape}/{b.shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i + 1} has non-finite parameters")
        if self.mean.shape != (sizes[0],) or self.std.shape != (sizes[0],):
            raise ValueError("feature statistics do not match the input size")

    @classmethod
    def init(cls, layer_sizes: Sequence[int], rng: np.random.Generator | int | None = 0, mean=None, std=None):
        rng = np.random.default_rng(rng)
        sizes = tuple(int(s) for s in layer_sizes)
        Ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            Ws.append(rng.normal(0.0, math.sqrt(2.0 / a), size=(a, b)))
            bs.append(np.zeros(b))
        mean = np.zeros(sizes[0]) if mean is None else np.asarray(mean, dtype=float)
        std = np.ones(sizes[0]) if std is None else np.asarray(std, dtype=float)
        return cls(sizes, Ws, bs, mean, std)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]):
        sizes = tuple(int(s) for s in layer_sizes)
        return cls(
            sizes,
            [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
            [np.zeros(b) for b in sizes[1:]],
            np.zeros(sizes[0]),
            np.ones(sizes[0]),
        )

    @property
    def m(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        return [p for W, b in zip(self.weights, self.biases) for p in (W, b)]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.layer_sizes,
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.mean.copy(),
            self.std.copy(),
            self.hidden,
            self.output,
        )

    # forward / backward on standardized inputs
    def _forward(self, Z: np.ndarray):
        acts = [Z]
        h = Z
        n = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = np.maximum(z, 0.0) if i < n - 1 else z
            acts.append(h)
        return acts  # last entry holds logits

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"expected {self.layer_sizes[0]} features, got {X.shape[1]}")
        return _sigmoid(self._forward(self.standardize(X))[-1])

    def loss_and_grads(self, Z: np.ndarray, Y: np.ndarray):
        """Mean per-label cross-entropy and its gradients (standardized inputs)."""
        acts = self._forward(Z)
        logits = acts[-1]
        # log(1 + e^z) computed stably
        loss = float(np.mean(np.logaddexp(0.0, logits) - Y * logits))
        delta = (_sigmoid(logits) - Y) / Y.size
        gW, gb = [None] * len(self.weights), [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            gW[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0.0)
        return loss, gW, gb

    def loss(self, Z, Y) -> float:
        logits = self._forward(Z)[-1]
        return float(np.mean(np.logaddexp(0.0, logits) - Y * logits))

    # ---- text format
    def to_text(self) -> str:
        out = [
            "pinmg-mlp 1",
            "layers " + " ".join(str(s) for s in self.layer_sizes),
            f"activations {self.hidden} {self.output}",
            "mean " + " ".join(repr(float(v)) for v in self.mean),
            "std " + " ".join(repr(float(v)) for v in self.std),
        ]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out.append(f"W{i + 1} {W.shape[0]} {W.shape[1]}")
            out += [" ".join(repr(float(v)) for v in row) for row in W]
            out.append(f"b{i + 1} {b.size}")
            out.append(" ".join(repr(float(v)) for v in b))
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MlpModel":
        lines = iter(text.splitlines())
        if next(lines).split()[0] != "pinmg-mlp":
            raise ValueError("not a model file")
        sizes = tuple(int(v) for v in next(lines).split()[1:])
        _, hidden, output = next(lines).split()
        mean = np.array([float(v) for v in next(lines).split()[1:]])
        std = np.array([float(v) for v in next(lines).split()[1:]])
        Ws, bs = [], []
        for _ in range(len(sizes) - 1):
            _, r, c = next(lines).split()
            Ws.append(np.array([[float(v) for v in next(lines).split()] for _ in range(int(r))]).reshape(int(r), int(c)))
            next(lines)
            bs.append(np.array([float(v) for v in next(lines).split()]))
        if hidden != "relu" or output != "logistic":
            raise ValueError(f"unsupported activations {hidden}/{output}")
        return cls(sizes, Ws, bs, mean, std, hidden, output)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "MlpModel":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class TrainParams:
    hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 0.02
    epochs: int = 30
    batch_size: int = 64
    momentum: float = 0.9
    validation_split: float = 0.1
    seed: int = 0


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    n_train: int = 0
    n_val: int = 0

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        for i, (a, b) in enumerate(zip(self.train_loss, self.val_loss)):
            rows.append(f"{i + 1},{a!r},{b!r}")
        return "\n".join(rows) + "\n"


def train(X: np.ndarray, Y: np.ndarray, params: TrainParams = TrainParams()) -> tuple[MlpModel, TrainReport]:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or len(X) == 0 or len(X) != len(Y):
        raise ValueError("dataset is empty or X and Y disagree")
    rng = np.random.default_rng(params.seed)
    n = len(X)
    n_val = int(round(params.validation_split * n)) if n > 1 else 0
    perm = rng.permutation(n)
    val, tr = perm[:n_val], perm[n_val:]
    mean = X[tr].mean(axis=0)
    std = X[tr].std(axis=0)
    std = np.where(std > 0, std, 1.0)
    model = MlpModel.init((X.shape[1], *params.hidden, Y.shape[1]), rng, mean, std)
    Z = model.standardize(X)
    vel = [np.zeros_like(p) for p in model.params()]
    rep = TrainReport(n_train=len(tr), n_val=len(val))
    for epoch in range(params.epochs):
        order = tr[rng.permutation(len(tr))]
        tot = 0.0
        for s in range(0, len(order), params.batch_size):
            b = order[s : s + params.batch_size]
            loss, gW, gb = model.loss_and_grads(Z[b], Y[b])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch + 1)
            tot += loss * len(b)
            grads = [g for pair in zip(gW, gb) for g in pair]
            for p, v, g in zip(model.params(), vel, grads):
                v *= params.momentum
                v -= params.learning_rate * g
                p += v
        tl = tot / len(tr)
        vl = model.loss(Z[val], Y[val]) if n_val else float("nan")
        if not math.isfinite(tl):
            raise TrainingDiverged(epoch + 1)
        rep.train_loss.append(tl)
        rep.val_loss.append(vl)
    return model, rep


def gradient_check(model: MlpModel, Z: np.ndarray, Y: np.ndarray, h: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Measured per parameter tensor as ``|g_a - g_n| / max(|g_a|, |g_n|)`` in the
    2-norm, so entries that are zero up to roundoff do not dominate.
    """
    _, gW, gb = model.loss_and_grads(Z, Y)
    analytic = [g for pair in zip(gW, gb) for g in pair]
    worst = 0.0
    for p, g in zip(model.params(), analytic):
        flat = p.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = model.loss(Z, Y)
            flat[i] = old - h
            lm = model.loss(Z, Y)
            flat[i] = old
            num[i] = (lp - lm) / (2 * h)
        scale = max(np.linalg.norm(num), np.linalg.norm(g), 1e-12)
        worst = max(worst, float(np.linalg.norm(num - g.reshape(-1)) / scale))
    return worst


# --------------------------------------------------------------------------
# inference and decision


def infer(model: MlpModel, L: np.ndarray) -> np.ndarray:
    f = vectorize_laplacian(L)
    if f.size != model.layer_sizes[0]:
        raise ValueError(f"model expects m={model.m}, got a {L.shape[0]}-node Laplacian")
    return model.predict_proba(f[None, :])[0]


@dataclass(frozen=True)
class Decision:
    pins: tuple[int, ...]
    feasible: bool
    rate: float
    source: str  # learned | repaired | fallback
    wall_time: float
    probabilities: np.ndarray


def decide(model: MlpModel, problem: PinningProblem, ga: GaParams = GaParams()) -> Decision:
    """Threshold the predicted pin probabilities, then make the set feasible.

    Below-threshold DGs are added in order of decreasing probability until
    the rate target is met; if even pinning every DG fails, the GA is run
    and its (infeasible) report is returned.
    """
    t0 = time.perf_counter()
    if model.m != problem.m:
        raise ValueError(f"model is for m={model.m}, problem has m={problem.m}")
    prob = infer(model, problem.graph.laplacian())
    mask = prob >= 0.5
    v = verify(problem, mask)
    source = "learned"
    if not v.feasible:
        source = "repaired"
        order = sorted(np.flatnonzero(~mask), key=lambda i: (-prob[i], i))
        for i in order:
            mask[i] = True
            v = verify(problem, mask)
            if v.feasible:
                break
    if not v.feasible:
        res = ga_pinning(problem, ga)
        mask = res.mask(problem.m)
        v = verify(problem, mask)
        source = "fallback"
    pins = tuple(int(i) for i in np.flatnonzero(mask))
    return Decision(pins, v.feasible, v.rate, source, time.perf_counter() - t0, prob)
