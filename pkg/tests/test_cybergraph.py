import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinmg.cybergraph import (
    CommGraph,
    GraphError,
    components,
    convergence_rate,
    disrupt,
    is_connected,
    lambda_min,
    lambda_min_batch,
    laplacian,
    pins_from_indices,
    read_graph,
    ring_lattice,
    small_world,
    subsets,
    write_graph,
)
from pinmg.netmodel import data_path

FAILED_LINKS = [(1, 3), (1, 5), (1, 10), (2, 3), (2, 10), (4, 5), (6, 8)]


def zb(pairs):
    return [(u - 1, v - 1) for u, v in pairs]


def path(m):
    return CommGraph.from_edges(m, [(i, i + 1) for i in range(m - 1)])


def cycle(m):
    return CommGraph.from_edges(m, [(i, (i + 1) % m) for i in range(m)])


def random_graph(rng, m, p=0.4):
    return CommGraph.from_edges(m, [(i, j) for i in range(m) for j in range(i + 1, m) if rng.random() < p])


def test_laplacian_examples():
    assert np.array_equal(laplacian(CommGraph.from_edges(2, [(0, 1)])), [[1, -1], [-1, 1]])
    assert np.array_equal(laplacian(path(3)), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    assert np.array_equal(laplacian(CommGraph.from_edges(4, [])), np.zeros((4, 4)))


def test_graph_validation():
    with pytest.raises(GraphError):
        CommGraph.from_edges(3, [(0, 0)])
    with pytest.raises(GraphError):
        CommGraph.from_edges(3, [(0, 3)])
    with pytest.raises(GraphError):
        CommGraph.from_edges(3, [(0, 1), (1, 0)])


def test_small_world_ten_nodes_degree_four():
    for seed in range(20):
        g = small_world(10, 4, 0.2, seed)
        assert g.n_edges == 20 and is_connected(g)


def test_small_world_without_rewiring_is_ring():
    assert small_world(10, 4, 0.0, 5) == ring_lattice(10, 4)
    assert np.all(ring_lattice(10, 4).degree() == 4)


def test_small_world_deterministic():
    assert small_world(12, 4, 0.3, 42) == small_world(12, 4, 0.3, 42)


def test_small_world_bad_parameters():
    with pytest.raises(GraphError):
        small_world(10, 3)
    with pytest.raises(GraphError):
        small_world(4, 4)
    with pytest.raises(GraphError):
        small_world(10, 4, 1.5)


def test_disrupt_named_edges():
    g = read_graph(data_path("cyber_ga.txt"))
    assert g.n_edges == 20
    gb = disrupt(g, edges=zb(FAILED_LINKS))
    assert gb.n_edges == 13
    assert disrupt(g, edges=[]) == g
    with pytest.raises(GraphError):
        disrupt(gb, edges=zb([(1, 3)]))


def test_disrupt_modes():
    g = ring_lattice(8, 4)
    assert disrupt(g, count=3, rng=1).n_edges == g.n_edges - 3
    assert disrupt(g, count=3, rng=1) == disrupt(g, count=3, rng=1)
    with pytest.raises(GraphError):
        disrupt(g)
    with pytest.raises(GraphError):
        disrupt(g, edges=[], count=1)
    with pytest.raises(GraphError):
        disrupt(g, count=100)


def test_until_disconnected_on_tree():
    run = disrupt(path(6), until_disconnected=True, rng=3)
    assert run.removed == () and run.last_connected == path(6)
    assert len(components(run.disconnected)) == 2


def test_until_disconnected_general():
    g = small_world(10, 4, 0.2, 9)
    run = disrupt(g, until_disconnected=True, rng=4)
    assert is_connected(run.last_connected)
    assert not is_connected(run.disconnected)
    assert run.last_connected.n_edges == g.n_edges - len(run.removed)


def test_components_examples():
    assert len(components(cycle(6))) == 1
    assert components(CommGraph.from_edges(3, [])) == [[0], [1], [2]]
    g = read_graph(data_path("cyber_ga.txt"))
    cut = g.without([e for e in g.edges if 0 in e])
    assert [0] in components(cut)


def test_lambda_min_examples():
    for seed in range(10):
        g = small_world(10, 4, 0.2, seed)
        assert abs(lambda_min(laplacian(g))) <= 1e-10
    M = laplacian(path(3)) + np.diag([1.0, 0, 0])
    root = min(np.roots([1, -5, 6, -1]).real)  # characteristic polynomial oracle
    assert lambda_min(M) == pytest.approx(root, abs=1e-12)
    assert root == pytest.approx(0.19806, abs=1e-5)
    M = laplacian(cycle(4)) + np.diag([1.0, 0, 1, 0])
    assert lambda_min(M) == pytest.approx((5 - math.sqrt(17)) / 2, abs=1e-12)


def test_lambda_min_rejects_asymmetric():
    with pytest.raises(ValueError):
        lambda_min(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_convergence_rate_examples():
    assert abs(convergence_rate(cycle(5), np.zeros(5, bool), 30, 1)) <= 1e-9
    assert convergence_rate(CommGraph.from_edges(1, []), [True], 1.0, 2.0) == pytest.approx(2.0)
    # rho* = 10 with G_c = 30 needs lambda_min >= 1/3
    g = cycle(4)
    pins = pins_from_indices(4, [0, 2])
    lam = lambda_min(laplacian(g) + np.diag(pins.astype(float)))
    assert (convergence_rate(g, pins, 30, 1) >= 10) == (lam >= 1 / 3)
    with pytest.raises(ValueError):
        convergence_rate(g, pins[:3], 30, 1)


def test_batch_matches_scalar():
    rng = np.random.default_rng(0)
    L = laplacian(random_graph(rng, 7))
    P = subsets(7, 3)
    M = L[None] + P[:, :, None] * np.eye(7)[None]
    batch = lambda_min_batch(M)
    assert np.allclose(batch, [lambda_min(m) for m in M], atol=1e-12)


def test_subsets_order_and_readonly():
    s = subsets(4, 2)
    assert [tuple(np.flatnonzero(r)) for r in s] == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    with pytest.raises(ValueError):
        s[0, 0] = False


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_kernel_multiplicity_is_component_count(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 11))
    g = random_graph(rng, m, float(rng.uniform(0.05, 0.6)))
    ev = np.linalg.eigvalsh(laplacian(g))
    assert abs(ev[0]) <= 1e-10
    assert int(np.sum(np.abs(ev) < 1e-9)) == len(components(g))


def test_pin_and_edge_monotonicity():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        m = int(rng.integers(2, 11))
        g = random_graph(rng, m)
        pins = rng.random(m) < 0.3
        L = laplacian(g)
        lam = lambda_min(L + np.diag(pins.astype(float)))
        k = int(rng.integers(m))
        more = pins.copy()
        more[k] = True
        assert lambda_min(L + np.diag(more.astype(float))) >= lam - 1e-10
        if g.n_edges:
            e = g.sorted_edges()[int(rng.integers(g.n_edges))]
            assert lambda_min(laplacian(g.without([e])) + np.diag(pins.astype(float))) <= lam + 1e-10


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_pinned_positive_iff_every_component_pinned(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 10))
    g = random_graph(rng, m, 0.25)
    pins = rng.random(m) < 0.3
    every = all(pins[c].any() for c in components(g))
    assert (lambda_min(laplacian(g) + np.diag(pins.astype(float))) > 1e-10) == every


def test_graph_file_round_trip(tmp_path):
    g = small_world(10, 4, 0.2, 3)
    p = tmp_path / "g.txt"
    write_graph(g, p)
    assert read_graph(p) == g
    assert p.read_text().splitlines()[0] == "10"
    (tmp_path / "empty.txt").write_text("# nothing\n")
    with pytest.raises(GraphError):
        read_graph(tmp_path / "empty.txt")
