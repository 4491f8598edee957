import numpy as np
import pytest

from hmilnet.ptp import (SHARED, UNIFORM, EdgeBudgetExceeded, PtpScorer, build_ptp_graph,
                         ptp_exact, ptp_graph_from_edges, ptp_iterative)

from conftest import make_collection


def sparse_random_graph(rng, mean_degree=3.0):
    n = int(rng.integers(10, 51))
    p = mean_degree / (n - 1)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    w = rng.integers(1, 4, size=len(edges)).astype(float)
    den = np.zeros(n, bool)
    den[rng.choice(n, size=max(1, n // 10), replace=False)] = True
    return ptp_graph_from_edges(n, edges, w, den)


def _w(graph, i, j):
    k = np.flatnonzero((graph.src == i) & (graph.dst == j))
    return float(graph.weight[k[0]])


def test_pair_sharing_one_client():
    coll = make_collection({"c": ("m2m", [("a", "x"), ("b", "x")])})
    g = build_ptp_graph(coll["c"], np.zeros(2, bool), UNIFORM)
    assert _w(g, 0, 1) == 1.0 and _w(g, 1, 0) == 1.0


def test_star_rows_sum_to_one():
    coll = make_collection({"c": ("m2m", [("a", "x"), ("b", "x"), ("c", "x")])})
    g = build_ptp_graph(coll["c"], np.zeros(3, bool), UNIFORM)
    assert np.allclose(g.row_sums(), 1.0)
    assert np.allclose(g.weight, 0.5)


def test_shared_entity_weights():
    # a-b share 2 entities, a-c share 1
    coll = make_collection({"c": ("m2m", [("a", "x"), ("a", "y"), ("b", "x"), ("b", "y"),
                                          ("c", "y")])})
    a, b, c = (coll.domains.index(n) for n in "abc")
    g = build_ptp_graph(coll["c"], np.zeros(3, bool), SHARED)
    assert _w(g, a, b) == pytest.approx(2 / 3) and _w(g, a, c) == pytest.approx(1 / 3)
    assert _w(g, b, a) == pytest.approx(2 / 3) and _w(g, c, b) == pytest.approx(1 / 2)


def test_edge_budget():
    coll = make_collection({"c": ("m2m", [(f"d{i}", "hub") for i in range(100)])})
    with pytest.raises(EdgeBudgetExceeded, match="degree cap"):
        build_ptp_graph(coll["c"], np.zeros(100, bool), edge_budget=1000)
    g = build_ptp_graph(coll["c"], np.zeros(100, bool), degree_cap=50, edge_budget=1000)
    assert g.n_edges == 0


def test_isolated_vertices_keep_initial_value():
    g = ptp_graph_from_edges(3, [(1, 2)], denylisted=[True, False, False])
    p = ptp_iterative(g, 20).scores
    assert p[0] == 1.0 and p[1] == 0.0 and p[2] == 0.0
    assert ptp_exact(g).scores.tolist() == [1.0, 0.0, 0.0]


def test_first_step_from_denylisted_neighbor():
    g = ptp_graph_from_edges(2, [(0, 1)], denylisted=[True, False])
    assert ptp_iterative(g, 1).scores[1] == 1.0


def test_three_vertex_chain_hand_solution():
    # a(denylisted) - b - c with uniform weights; messages x[b<-a] = 1,
    # x[c<-b] = w_ba * 1 = 0.5 and x[b<-c] = 0, so P(b) = P(c) = 0.5
    g = ptp_graph_from_edges(3, [(0, 1), (1, 2)], denylisted=[True, False, False])
    np.testing.assert_allclose(ptp_exact(g).scores, [1.0, 0.5, 0.5])
    np.testing.assert_allclose(ptp_iterative(g, 20).scores, [1.0, 0.5, 0.5])


def test_no_echo_between_two_clean_vertices():
    # b - c with a denylisted a attached to b: c must not feed b's own threat back
    g = ptp_graph_from_edges(3, [(0, 1), (1, 2)], denylisted=[True, False, False])
    r = ptp_iterative(g, 50)
    assert r.scores[1] == pytest.approx(0.5)


def test_scores_in_unit_interval(rng):
    for _ in range(20):
        g = sparse_random_graph(rng, mean_degree=float(rng.uniform(1, 6)))
        for t in (1, 2, 5, 20):
            p = ptp_iterative(g, t).scores
            assert np.all((p >= 0) & (p <= 1))
        assert np.all(g.denylisted <= (ptp_iterative(g, 3).scores == 1.0))


def test_monotone_in_denylist(rng):
    for _ in range(15):
        g = sparse_random_graph(rng)
        base = ptp_exact(g).scores
        extra = int(rng.choice(np.flatnonzero(~g.denylisted)))
        g.denylisted[extra] = True
        more = ptp_exact(g).scores
        assert np.all(more >= base - 1e-12)


def test_dense_graphs_converge_with_more_iterations(rng):
    for _ in range(5):
        g = sparse_random_graph(rng, mean_degree=8.0)
        exact = ptp_exact(g).scores
        r = ptp_iterative(g, 1000)
        assert np.max(np.abs(r.scores - exact)) < 1e-6
        tail = np.array(r.deltas[50:])
        assert tail[-1] <= tail[0]


def test_exact_solver_limit():
    g = ptp_graph_from_edges(5, [(0, 1)])
    with pytest.raises(ValueError):
        ptp_exact(g, solver_limit=3)


def test_scorer_uses_active_mask():
    coll = make_collection({"c": ("m2m", [("a", "x"), ("b", "x")])})
    sc = PtpScorer(coll["c"], 20, UNIFORM)
    ids = np.array([0, 1])
    assert sc(ids, np.array([True, False])).tolist() == [1.0, 1.0]
    assert sc(ids, np.array([False, False])).tolist() == [0.0, 0.0]
