import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmlp.errors import DimensionError, InvalidEdge, SelfLoopRejected, SplitOverlap
from pmlp.graph import (
    Perturbation,
    Scheme,
    build_graph,
    inductive_split,
    perturb,
    propagate,
    read_edge_list,
    transition_matrix,
    write_edge_list,
)
from strategies import edge_lists, graphs, ring, star

PATH2 = build_graph(2, [(0, 1)])


def dense_oracle(g, scheme, K=10):
    """Transition matrices built densely from the adjacency, independent of the sparse code."""
    n = g.n
    A = np.zeros((n, n))
    for u, v in g.edge_set():
        A[u, v] = A[v, u] = 1.0
    At = A + np.eye(n)
    dt = At.sum(axis=1)
    if scheme is Scheme.SYM:
        return At / np.sqrt(np.outer(dt, dt))
    if scheme is Scheme.NO_LOOP:
        d = A.sum(axis=1)
        s = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1)), 0.0)
        return s[:, None] * A * s[None, :]
    P = At / dt[:, None]
    if scheme is Scheme.RW:
        return P
    M = sum(np.linalg.matrix_power(P, k) / (math.e * math.factorial(k)) for k in range(K + 1))
    return M / M.sum(axis=1, keepdims=True)


class TestBuildGraph:
    def test_two_node_path(self):
        g = build_graph(2, [(0, 1)])
        np.testing.assert_array_equal(g.neighbors(0), [1])
        np.testing.assert_array_equal(g.neighbors(1), [0])
        np.testing.assert_array_equal(g.degrees_tilde, [2, 2])

    def test_duplicates_collapse(self):
        g = build_graph(3, [(0, 1), (1, 0), (1, 2)])
        assert g.num_edges == 2
        assert g.has_edge(1, 0) and g.has_edge(0, 1)

    def test_single_isolated_node(self):
        g = build_graph(1, [])
        assert g.num_edges == 0
        np.testing.assert_array_equal(g.degrees_tilde, [1])

    @pytest.mark.parametrize("edge", [(0, 3), (-1, 0), (5, 1)])
    def test_out_of_range(self, edge):
        with pytest.raises(InvalidEdge):
            build_graph(3, [edge])

    def test_self_loop_rejected(self):
        with pytest.raises(SelfLoopRejected):
            build_graph(3, [(1, 1)])

    def test_read_counter(self):
        g = build_graph(3, [(0, 1)])
        before = g.reads
        g.neighbors(0)
        assert g.reads == before + 1

    @settings(max_examples=200, deadline=None)
    @given(edge_lists())
    def test_graph_invariants(self, data):
        n, edges = data
        g = build_graph(n, edges)
        want = {(min(u, v), max(u, v)) for u, v in edges}
        assert g.edge_set() == want
        assert all(u < v for u, v in g.edge_set())
        for u in range(n):
            nb = g.neighbors(u)
            assert np.all(np.diff(nb) > 0)
            assert u not in nb
            for v in nb:
                assert u in g.neighbors(v)
        assert np.all(g.degrees_tilde >= 1)
        np.testing.assert_array_equal(g.degrees_tilde, [len(g.neighbors(u)) + 1 for u in range(n)])


class TestTransitionMatrix:
    def test_path_sym(self):
        np.testing.assert_allclose(transition_matrix(PATH2, Scheme.SYM).to_dense(), [[0.5, 0.5], [0.5, 0.5]])

    def test_path_no_loop(self):
        np.testing.assert_allclose(transition_matrix(PATH2, Scheme.NO_LOOP).to_dense(), [[0, 1], [1, 0]])

    def test_star_rw(self):
        P = transition_matrix(star(3), Scheme.RW).to_dense()
        np.testing.assert_allclose(P[0], [0.25] * 4)
        for leaf in range(1, 4):
            row = np.zeros(4)
            row[0] = row[leaf] = 0.5
            np.testing.assert_allclose(P[leaf], row)

    def test_isolated_no_loop_warns_zero_row(self):
        g = build_graph(3, [(0, 1)])
        with pytest.warns(RuntimeWarning):
            t = transition_matrix(g, Scheme.NO_LOOP)
        np.testing.assert_array_equal(t.to_dense()[2], 0.0)
        assert t.zero_rows == (2,)

    def test_diff_needs_positive_order(self):
        with pytest.raises(ValueError):
            transition_matrix(PATH2, Scheme.DIFF, diffusion_order=0)

    def test_row_accessor(self):
        t = transition_matrix(star(2), Scheme.RW)
        assert dict(t.row(1)) == pytest.approx({0: 0.5, 1: 0.5})

    @settings(max_examples=200, deadline=None)
    @given(graphs(max_n=20), st.sampled_from(list(Scheme)))
    def test_matches_dense_oracle(self, g, scheme):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            t = transition_matrix(g, scheme)
        np.testing.assert_allclose(t.to_dense(), dense_oracle(g, scheme), atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(graphs(max_n=40))
    def test_scheme_invariants(self, g):
        for scheme in (Scheme.RW, Scheme.DIFF):
            P = transition_matrix(g, scheme).to_dense()
            np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(np.diag(P) > 0)
        S = transition_matrix(g, Scheme.SYM).to_dense()
        np.testing.assert_allclose(S, S.T, atol=1e-15)
        assert np.all(np.diag(S) > 0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            N = transition_matrix(g, Scheme.NO_LOOP).to_dense()
        np.testing.assert_array_equal(np.diag(N), 0.0)

    @settings(max_examples=200, deadline=None)
    @given(graphs(max_n=64))
    def test_diffusion_truncation_converges(self, g):
        a = transition_matrix(g, Scheme.DIFF, 15).to_dense()
        b = transition_matrix(g, Scheme.DIFF, 20).to_dense()
        assert np.max(np.abs(a - b)) < 1e-9


class TestPropagate:
    def test_identity_input(self):
        t = transition_matrix(PATH2, Scheme.SYM)
        np.testing.assert_allclose(propagate(t, np.eye(2)), [[0.5, 0.5], [0.5, 0.5]])

    def test_alpha_one_returns_h0(self):
        t = transition_matrix(star(3), Scheme.SYM)
        rng = np.random.default_rng(0)
        H, H0 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        np.testing.assert_array_equal(propagate(t, H, 1.0, H0), H0)

    def test_star_center_onehot(self):
        t = transition_matrix(star(3), Scheme.RW)
        H = np.zeros((4, 1))
        H[0] = 1.0
        np.testing.assert_allclose(propagate(t, H).ravel(), [0.25, 0.5, 0.5, 0.5])

    def test_input_not_modified(self):
        t = transition_matrix(star(3), Scheme.RW)
        H = np.arange(8.0).reshape(4, 2)
        keep = H.copy()
        propagate(t, H, 0.3, H)
        np.testing.assert_array_equal(H, keep)

    def test_residual_blend(self):
        t = transition_matrix(star(2), Scheme.SYM)
        rng = np.random.default_rng(1)
        H, H0 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        want = 0.7 * t.to_dense() @ H + 0.3 * H0
        np.testing.assert_allclose(propagate(t, H, 0.3, H0), want, atol=1e-14)

    def test_shape_errors(self):
        t = transition_matrix(PATH2, Scheme.SYM)
        with pytest.raises(DimensionError):
            propagate(t, np.zeros((3, 1)))
        with pytest.raises(DimensionError):
            propagate(t, np.zeros((2, 1)), 0.5)
        with pytest.raises(DimensionError):
            propagate(t, np.zeros((2, 1)), 0.5, np.zeros((2, 2)))

    @settings(max_examples=200, deadline=None)
    @given(graphs(max_n=20), st.sampled_from([Scheme.RW, Scheme.DIFF]), st.floats(-5, 5))
    def test_constant_rows_fixed_for_stochastic(self, g, scheme, c):
        t = transition_matrix(g, scheme)
        H = np.full((g.n, 3), c)
        np.testing.assert_allclose(propagate(t, H), H, atol=1e-9 * (1 + abs(c)))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(3, 40))
    def test_constant_rows_fixed_sym_on_rings(self, n):
        t = transition_matrix(ring(n), Scheme.SYM)
        H = np.full((n, 2), 1.5)
        np.testing.assert_allclose(propagate(t, H), H, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(graphs(max_n=20), st.sampled_from(list(Scheme)), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
    def test_linearity(self, g, scheme, a, b, seed):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            t = transition_matrix(g, scheme)
        rng = np.random.default_rng(seed)
        H1, H2 = rng.standard_normal((g.n, 2)), rng.standard_normal((g.n, 2))
        lhs = propagate(t, a * H1 + b * H2)
        rhs = a * propagate(t, H1) + b * propagate(t, H2)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestInductiveSplit:
    def test_path(self):
        s = inductive_split(build_graph(3, [(0, 1), (1, 2)]), [0, 1], [], [2])
        assert s.train_graph.edge_set() == {(0, 1)}

    def test_empty_train(self):
        s = inductive_split(build_graph(3, [(0, 1), (1, 2)]), [], [], [0, 1, 2])
        assert s.train_graph.num_edges == 0

    def test_ring_evens(self):
        s = inductive_split(ring(10), range(0, 10, 2))
        assert s.train_graph.num_edges == 0

    def test_overlap(self):
        with pytest.raises(SplitOverlap):
            inductive_split(ring(4), [0, 1], [1], [2])

    @settings(max_examples=200, deadline=None)
    @given(graphs(min_n=2, max_n=30), st.integers(0, 2**31))
    def test_split_invariants(self, g, seed):
        rng = np.random.default_rng(seed)
        parts = rng.integers(0, 4, size=g.n)
        ids = [np.nonzero(parts == k)[0] for k in range(3)]
        s = inductive_split(g, *ids)
        train = set(s.train_ids.tolist())
        assert s.train_graph.edge_set() <= g.edge_set()
        assert s.train_graph.edge_set() == {(u, v) for u, v in g.edge_set() if u in train and v in train}
        a, b, c = (set(x.tolist()) for x in (s.train_ids, s.valid_ids, s.test_ids))
        assert not (a & b or a & c or b & c)


class TestPerturb:
    @pytest.mark.parametrize("op", list(Perturbation))
    def test_noop_ratios(self, op):
        g = ring(8)
        ratio = 0.0 if op is Perturbation.ADD_NOISE else 1.0
        assert perturb(g, op, ratio, seed=3).edge_set() == g.edge_set()

    def test_ring_noise_reproducible(self):
        a = perturb(ring(6), "add_noise", 0.5, seed=11)
        b = perturb(ring(6), "add_noise", 0.5, seed=11)
        assert a.num_edges == 9
        assert a.edge_set() == b.edge_set()
        assert ring(6).edge_set() <= a.edge_set()

    def test_saturates_on_complete_graph(self):
        k4 = build_graph(4, [(i, j) for i in range(4) for j in range(i + 1, 4)])
        assert perturb(k4, "add_noise", 2.0, seed=0).num_edges == 6

    def test_sparsify_count(self):
        g = ring(10)
        out = perturb(g, "sparsify", 0.25, seed=0)
        assert out.num_edges == 3
        assert out.edge_set() <= g.edge_set()

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            perturb(ring(5), "sparsify", 1.5)
        with pytest.raises(ValueError):
            perturb(ring(5), "add_noise", -0.1)

    @settings(max_examples=200, deadline=None)
    @given(graphs(min_n=2, max_n=30), st.floats(0, 2), st.integers(0, 1000))
    def test_noise_edge_count(self, g, ratio, seed):
        out = perturb(g, "add_noise", ratio, seed)
        cap = g.n * (g.n - 1) // 2
        want = min(cap, g.num_edges + math.floor(ratio * g.num_edges + 1e-12))
        assert out.num_edges == want
        assert g.edge_set() <= out.edge_set()


class TestEdgeListIO:
    def test_round_trip_keeps_isolated_tail(self, tmp_path):
        g = build_graph(6, [(0, 1), (2, 3)])
        p = tmp_path / "e.txt"
        write_edge_list(g, p)
        h = read_edge_list(p)
        assert h.n == 6 and h.edge_set() == g.edge_set()

    def test_comments_ignored(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("# a comment\n0 1\n\n# another\n1 2\n")
        assert read_edge_list(p).edge_set() == {(0, 1), (1, 2)}

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("0 1 2\n")
        with pytest.raises(InvalidEdge):
            read_edge_list(p)
