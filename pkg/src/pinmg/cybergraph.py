"""Communication layer: undirected graphs over the DGs and their spectra."""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Edge = tuple[int, int]


class GraphError(ValueError):
    pass


def _norm_edge(u: int, v: int) -> Edge:
    u, v = int(u), int(v)
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class CommGraph:
    m: int
    edges: frozenset[Edge]

    def __post_init__(self):
        for u, v in self.edges:
            if u == v:
                raise GraphError(f"self-loop at node {u + 1}")
            if not (0 <= u < self.m and 0 <= v < self.m) or u > v:
                raise GraphError(f"bad edge ({u}, {v}) for m={self.m}")

    @classmethod
    def from_edges(cls, m: int, edges: Iterable[Sequence[int]]) -> "CommGraph":
        out: set[Edge] = set()
        for u, v in edges:
            if u == v:
                raise GraphError(f"self-loop at node {u + 1}")
            e = _norm_edge(u, v)
            if e in out:
                raise GraphError(f"duplicate edge {e[0] + 1}-{e[1] + 1}")
            out.add(e)
        return cls(m, frozenset(out))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def sorted_edges(self) -> list[Edge]:
        return sorted(self.edges)

    def key(self) -> tuple:
        """Canonical hashable identity, used for deduplication."""
        return (self.m, tuple(self.sorted_edges()))

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.m, self.m))
        for u, v in self.edges:
            A[u, v] = A[v, u] = 1.0
        return A

    def degree(self) -> np.ndarray:
        return self.adjacency().sum(axis=1)

    def laplacian(self) -> np.ndarray:
        A = self.adjacency()
        return np.diag(A.sum(axis=1)) - A

    def without(self, edges: Iterable[Sequence[int]]) -> "CommGraph":
        drop = {_norm_edge(u, v) for u, v in edges}
        return CommGraph(self.m, self.edges - drop)


def laplacian(g: CommGraph) -> np.ndarray:
    return g.laplacian()


def components(g: CommGraph) -> list[list[int]]:
    """Connected components, each sorted, ordered by smallest member."""
    nbrs: list[list[int]] = [[] for _ in range(g.m)]
    for u, v in g.edges:
        nbrs[u].append(v)
        nbrs[v].append(u)
    seen = [False] * g.m
    out = []
    for s in range(g.m):
        if seen[s]:
            continue
        stack, comp = [s], []
        seen[s] = True
        while stack:
            a = stack.pop()
            comp.append(a)
            for b in nbrs[a]:
                if not seen[b]:
                    seen[b] = True
                    stack.append(b)
        out.append(sorted(comp))
    return out


def is_connected(g: CommGraph) -> bool:
    return g.m <= 1 or len(components(g)) == 1


# --------------------------------------------------------------------------
# generation and disruption


def ring_lattice(m: int, mean_degree: int) -> CommGraph:
    half = mean_degree // 2
    edges = {_norm_edge(i, (i + j) % m) for i in range(m) for j in range(1, half + 1)}
    return CommGraph(m, frozenset(edges))


def small_world(
    m: int,
    mean_degree: int = 4,
    rewire_prob: float = 0.2,
    rng: np.random.Generator | int | None = None,
    max_tries: int = 1000,
) -> CommGraph:
    """Connected Watts-Strogatz graph; redraws until connected."""
    if mean_degree % 2 or mean_degree < 2 or mean_degree >= m:
        raise GraphError(f"mean_degree must be even with 2 <= k < m (got k={mean_degree}, m={m})")
    if not 0.0 <= rewire_prob <= 1.0:
        raise GraphError("rewire_prob must lie in [0, 1]")
    rng = np.random.default_rng(rng)
    half = mean_degree // 2
    for _ in range(max_tries):
        adj = [set() for _ in range(m)]
        for i in range(m):
            for j in range(1, half + 1):
                w = (i + j) % m
                adj[i].add(w)
                adj[w].add(i)
        # rewire in lattice order: offset j, then node i
        for j in range(1, half + 1):
            for i in range(m):
                w = (i + j) % m
                if w not in adj[i] or rng.random() >= rewire_prob:
                    continue
                choices = [c for c in range(m) if c != i and c not in adj[i]]
                if not choices:
                    continue
                new = choices[int(rng.integers(len(choices)))]
                adj[i].discard(w)
                adj[w].discard(i)
                adj[i].add(new)
                adj[new].add(i)
        g = CommGraph(m, frozenset(_norm_edge(i, w) for i in range(m) for w in adj[i]))
        if is_connected(g):
            return g
    raise GraphError(f"no connected graph after {max_tries} draws")


def remove_edges(g: CommGraph, edges: Iterable[Sequence[int]]) -> CommGraph:
    drop = [_norm_edge(u, v) for u, v in edges]
    for e in drop:
        if e not in g.edges:
            raise GraphError(f"edge {e[0] + 1}-{e[1] + 1} is not in the graph")
    return CommGraph(g.m, g.edges - set(drop))


def remove_random(g: CommGraph, count: int, rng: np.random.Generator | int | None = None) -> CommGraph:
    if not 0 <= count <= g.n_edges:
        raise GraphError(f"cannot remove {count} of {g.n_edges} edges")
    rng = np.random.default_rng(rng)
    edges = g.sorted_edges()
    idx = rng.choice(len(edges), size=count, replace=False) if count else []
    return remove_edges(g, [edges[i] for i in idx])


@dataclass(frozen=True)
class DisconnectionRun:
    last_connected: CommGraph
    removed: tuple[Edge, ...]
    disconnecting_edge: Edge | None
    disconnected: CommGraph | None


def remove_until_disconnected(g: CommGraph, rng: np.random.Generator | int | None = None) -> DisconnectionRun:
    """Remove uniformly random edges until the graph splits.

    Returns the last connected graph, the edges removed before it, and the
    edge whose removal first produced more than one component.
    """
    rng = np.random.default_rng(rng)
    cur = g
    removed: list[Edge] = []
    if not is_connected(cur):
        return DisconnectionRun(cur, (), None, cur)
    while cur.n_edges:
        edges = cur.sorted_edges()
        e = edges[int(rng.integers(len(edges)))]
        nxt = CommGraph(cur.m, cur.edges - {e})
        if not is_connected(nxt):
            return DisconnectionRun(cur, tuple(removed), e, nxt)
        removed.append(e)
        cur = nxt
    return DisconnectionRun(cur, tuple(removed), None, None)


def disrupt(
    g: CommGraph,
    edges: Iterable[Sequence[int]] | None = None,
    count: int | None = None,
    until_disconnected: bool = False,
    rng: np.random.Generator | int | None = None,
):
    """Dispatch to one removal mode: explicit ``edges``, random ``count``, or until split."""
    modes = sum(x is not None for x in (edges, count)) + bool(until_disconnected)
    if modes != 1:
        raise GraphError("choose exactly one of edges, count, until_disconnected")
    if edges is not None:
        return remove_edges(g, edges)
    if count is not None:
        return remove_random(g, count, rng)
    return remove_until_disconnected(g, rng)


# --------------------------------------------------------------------------
# spectra


SYMMETRY_TOL = 1e-10


def lambda_min(M: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("expected a square matrix")
    if M.size == 0:
        raise ValueError("empty matrix")
    if np.max(np.abs(M - M.T)) > SYMMETRY_TOL:
        raise ValueError("matrix is not symmetric")
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def lambda_min_batch(M: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of each matrix in a (k, m, m) stack of symmetric matrices."""
    M = np.asarray(M, dtype=float)
    return np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, -1, -2)))[..., 0]


def pinned_matrix(L: np.ndarray, pins: np.ndarray, c_pin: float) -> np.ndarray:
    return L + c_pin * np.diag(np.asarray(pins, dtype=float))


def convergence_rate(g: CommGraph | np.ndarray, pins, G_c: float, c_pin: float) -> float:
    """Guaranteed consensus decay rate ``G_c * lambda_min(L + c_pin * Psi)``."""
    if not (G_c > 0 and c_pin > 0):
        raise ValueError("gains must be positive")
    L = g.laplacian() if isinstance(g, CommGraph) else np.asarray(g, dtype=float)
    pins = np.asarray(pins, dtype=bool)
    if pins.shape != (L.shape[0],):
        raise ValueError(f"pin vector of length {pins.shape} for m={L.shape[0]}")
    # L + c Psi is positive semidefinite; clamp eigensolver roundoff below 0
    return G_c * max(lambda_min(pinned_matrix(L, pins, c_pin)), 0.0)


def pins_from_indices(m: int, idx: Iterable[int]) -> np.ndarray:
    p = np.zeros(m, dtype=bool)
    p[list(idx)] = True
    return p


@functools.lru_cache(maxsize=64)
def subsets(m: int, k: int) -> np.ndarray:
    """All k-subsets of range(m) as a read-only (C(m,k), m) Boolean array, lexicographic order."""
    combos = list(itertools.combinations(range(m), k))
    out = np.zeros((len(combos), m), dtype=bool)
    for r, c in enumerate(combos):
        out[r, list(c)] = True
    out.flags.writeable = False
    return out


# --------------------------------------------------------------------------
# graph file: first line m, then one "u v" pair per line (1-based)


def format_edges(m: int | None, edges: Iterable[Sequence[int]]) -> str:
    lines = [] if m is None else [str(m)]
    lines += [f"{u + 1} {v + 1}" for u, v in sorted(_norm_edge(u, v) for u, v in edges)]
    return "\n".join(lines) + "\n"


def parse_edge_lines(lines: Iterable[str]) -> list[Edge]:
    out = []
    for ln in lines:
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        u, v = ln.split()
        out.append((int(u) - 1, int(v) - 1))
    return out


def write_graph(g: CommGraph, path: str | Path) -> None:
    Path(path).write_text(format_edges(g.m, g.edges))


def read_graph(path: str | Path) -> CommGraph:
    rows = [r for r in (ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()) if r]
    if not rows:
        raise GraphError(f"{path}: empty graph file")
    m = int(rows[0])
    return CommGraph.from_edges(m, parse_edge_lines(rows[1:]))
