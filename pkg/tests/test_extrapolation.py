import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmlp.errors import DegenerateFeature, DimensionError, NumericalOverflow
from pmlp.extrapolation import (
    PMLP_PLACEMENT,
    ExtrapolationProbe,
    KernelPredictor,
    NetworkPredictor,
    Wiring,
    attach_test_node,
    convergence_bound,
    degree_factor,
    deviation_series,
    ego_subgraph,
    fitted_bound_constant,
    load_probe,
    make_regression_task,
    probe_slopes,
    rate_bound,
    save_probe,
    train_wide_regressor,
    with_cosine,
)
from pmlp.graph import build_graph
from pmlp.nn import NetConfig, forward, init_network

from strategies import graphs


def factor_oracle(g, u):
    """Degree factor from a dense adjacency in exact rational arithmetic."""
    A = np.zeros((g.n, g.n), dtype=np.int64)
    for a, b in g.edges.tolist():
        A[a, b] = A[b, a] = 1
    dt = A.sum(axis=1) + 1
    closed = [u] + [i for i in range(g.n) if A[u, i]]
    return sum(Fraction(1, int(dt[u] * dt[i])) for i in closed)


@pytest.fixture(scope="module")
def small_net():
    task = make_regression_task(24, 3, seed=1)
    net, _ = train_wide_regressor(task.X, task.y, width=128, seed=1, epochs=100)
    return task, net


class TestWiring:
    def test_parse(self):
        assert Wiring.parse("isolated").num_neighbors == 0
        assert Wiring.parse("star:2").num_neighbors == 2
        assert Wiring.parse("Complete:4").num_neighbors == 3
        assert Wiring.parse("complete:4").label == "complete:4"

    @pytest.mark.parametrize("text", ["ring:3", "star", "star:0", "complete:1"])
    def test_bad(self, text):
        with pytest.raises(ValueError):
            Wiring.parse(text)

    def test_neighbors_checked(self):
        with pytest.raises(ValueError):
            Wiring("star", 2, (1, 1))
        with pytest.raises(ValueError):
            Wiring.parse("star:5").resolve(3)

    def test_attach(self):
        g, t = attach_test_node(build_graph(5, [(0, 1)]), Wiring.parse("complete:3").with_neighbors((2, 4)))
        assert t == 5 and g.n == 6
        assert g.edge_set() == {(0, 1), (2, 5), (4, 5), (2, 4)}

    def test_attach_rejects_foreign_ids(self):
        with pytest.raises(DimensionError):
            attach_test_node(build_graph(3, []), Wiring("star", 1, (7,)))


class TestDegreeFactor:
    @pytest.mark.parametrize("text,expected", [("isolated", 1.0), ("star:2", 4 / 9), ("complete:4", 1 / 4)])
    def test_reference_wirings(self, text, expected):
        g, t = attach_test_node(build_graph(10, []), Wiring.parse(text))
        assert degree_factor(g, t) == pytest.approx(expected, rel=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(graphs(min_n=1, max_n=16), st.data())
    def test_matches_dense_oracle(self, g, data):
        u = data.draw(st.integers(0, g.n - 1))
        f = degree_factor(g, u)
        assert f == pytest.approx(float(factor_oracle(g, u)), rel=1e-12)
        assert 0.0 < f <= 1.0


class TestConvergenceBound:
    def test_isolated_is_one_over_t(self):
        g = build_graph(1, [])
        rb = convergence_bound(g, 0, np.array([[1.0, 2.0]]), 50)
        assert rb.bound == pytest.approx(1 / 50)
        assert rb.d_max == 1

    def test_equal_features_give_one_over_t(self):
        g, t = attach_test_node(build_graph(6, [(0, 1)]), Wiring.parse("complete:4"))
        X = np.tile([0.3, -1.2, 2.0], (g.n, 1)) * np.arange(1, g.n + 1)[:, None]
        rb = convergence_bound(g, t, X, 10)
        assert rb.alpha_min == pytest.approx(1.0)
        assert rb.bound == pytest.approx(1 / 10, abs=1e-7)

    def test_hand_example(self):
        # star:2 with both leaves at cosine 0.6: d_max = 3, alpha_min = 0.6, (1 + 2 * 0.8) / 10
        v = np.array([1.0, 0.0])
        u = np.array([0.0, 1.0])
        X = np.array([0.6 * v + 0.8 * u, 0.6 * v - 0.8 * u, v])
        g = build_graph(3, [(0, 2), (1, 2)])
        rb = convergence_bound(g, 2, X, 10)
        assert rb.d_max == 3
        assert rb.alpha_min == pytest.approx(0.6)
        assert rb.bound == pytest.approx(0.26)

    def test_negative_cosine_clamped(self):
        X = np.array([[1.0, 0.0], [-1.0, 0.1]])
        rb = convergence_bound(build_graph(2, [(0, 1)]), 1, X, 4)
        assert rb.alpha_min_raw < 0
        assert rb.alpha_min == 0.0
        assert rb.bound == pytest.approx(rate_bound(2, 0.0, 4)) == pytest.approx(2 / 4)

    def test_zero_feature(self):
        X = np.array([[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(DegenerateFeature):
            convergence_bound(build_graph(2, [(0, 1)]), 1, X, 4)

    def test_bad_t(self):
        with pytest.raises(ValueError):
            convergence_bound(build_graph(1, []), 0, np.ones((1, 2)), 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 20), st.floats(-1, 1), st.floats(0.5, 1e4))
    def test_rate_bound_shape(self, d, a, t):
        b = rate_bound(d, a, t)
        assert 1 / t - 1e-15 <= b <= d / t + 1e-12
        assert rate_bound(d, a, 2 * t) == pytest.approx(b / 2)


class TestEgoSubgraph:
    @settings(max_examples=60, deadline=None)
    @given(graphs(min_n=1, max_n=14), st.data())
    def test_two_hop_output_matches_full_graph(self, g, data):
        u = data.draw(st.integers(0, g.n - 1))
        seed = data.draw(st.integers(0, 2**31))
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((g.n, 3))
        net = init_network(NetConfig(3, 2, hidden=5, dropout=0.0), rng)
        full, _ = forward(net, X, g, PMLP_PLACEMENT)
        sub, ids, c = ego_subgraph(g, u, 2)
        local, _ = forward(net, X[ids], sub, PMLP_PLACEMENT)
        assert ids[c] == u
        np.testing.assert_allclose(local[c], full[u], rtol=1e-12, atol=1e-13)

    def test_zero_hops(self):
        sub, ids, c = ego_subgraph(build_graph(3, [(0, 1), (1, 2)]), 1, 0)
        assert sub.n == 1 and ids.tolist() == [1] and c == 0


class TestProbe:
    def test_validation(self):
        with pytest.raises(ValueError):
            ExtrapolationProbe(np.array([1.0, 1.0]))
        with pytest.raises(ValueError):
            ExtrapolationProbe(np.array([1.0, 0.0]), t_grid=(10, 5))
        with pytest.raises(ValueError):
            ExtrapolationProbe(np.array([1.0, 0.0]), delta_t=0)
        with pytest.raises(ValueError, match="resolution"):
            ExtrapolationProbe(np.array([1.0, 0.0]), t_grid=(1.0, 1e17))
        assert ExtrapolationProbe(np.array([0.0, 1.0]), wiring="star:2").wiring.k == 2

    def test_dimension(self, small_net):
        task, net = small_net
        with pytest.raises(DimensionError):
            probe_slopes(NetworkPredictor(net, task.X), ExtrapolationProbe(np.array([1.0, 0.0])))

    def test_isolated_matches_mlp(self, small_net):
        task, net = small_net
        s = probe_slopes(NetworkPredictor(net, task.X), ExtrapolationProbe(task.v, (1, 10, 100)))
        np.testing.assert_allclose(s.slopes, s.mlp_slopes, rtol=1e-9)
        assert s.coeff_factor == 1.0 and s.slope_ratio == pytest.approx(1.0, rel=1e-9)

    def test_mlp_slope_settles(self, small_net):
        task, net = small_net
        s = probe_slopes(NetworkPredictor(net, task.X), ExtrapolationProbe(task.v, (10, 100, 1000, 10000)))
        steps = np.abs(np.diff(s.mlp_slopes))
        assert steps[-1] <= steps[0] + 1e-12
        assert steps[-1] < 1e-3 * abs(s.mlp_slopes[-1])

    def test_overflow(self, small_net):
        task, _ = small_net

        class Blowup:
            X_train = task.X
            train_graph = build_graph(task.X.shape[0], [])

            def __call__(self, X, g, node, mode):
                return math.inf if np.linalg.norm(X[node]) > 50 else 0.0

        with pytest.raises(NumericalOverflow) as info:
            probe_slopes(Blowup(), ExtrapolationProbe(task.v, (1, 100)))
        assert info.value.t == 100

    def test_json_round_trip(self, small_net, tmp_path):
        task, net = small_net
        s = probe_slopes(NetworkPredictor(net, task.X), ExtrapolationProbe(task.v, (1, 10), wiring="star:2"))
        path = tmp_path / "probe.json"
        save_probe(path, [s])
        back = load_probe(path)
        assert back == json.loads(json.dumps([s.to_dict()]))
        assert back[0]["wiring"] == "star:2" and back[0]["neighbors"] == [0, 1]
        np.testing.assert_allclose(back[0]["deviations"], deviation_series(s))

    def test_fitted_constant_covers_grid(self, small_net):
        task, net = small_net
        s = probe_slopes(NetworkPredictor(net, task.X), ExtrapolationProbe(task.v, (1, 10, 100), wiring="star:2"))
        C = fitted_bound_constant(s)
        bounds = [rate_bound(s.d_max, s.alpha_min, t) for t in s.t_grid]
        assert np.all(deviation_series(s) <= C * np.array(bounds) * (1 + 1e-12))


class TestKernelPredictor:
    @pytest.mark.parametrize("text,expected", [("isolated", 1.0), ("star:2", 4 / 9), ("complete:4", 1 / 4)])
    def test_slope_ratio_tends_to_degree_factor(self, text, expected):
        task = make_regression_task(64, 4, seed=0)
        s = probe_slopes(KernelPredictor(task.X, task.y), ExtrapolationProbe(task.v, (10, 100, 1000), wiring=text))
        assert s.slope_ratio == pytest.approx(expected, rel=1e-5)
        dev = deviation_series(s)
        assert dev[-1] <= dev[0]


class TestRegressionTask:
    def test_anchor_cosines(self):
        task = make_regression_task(10, 5, seed=3, anchor_cosines=(0.95, 0.3), anchors_per_cosine=2)
        assert task.X.shape == (14, 5)
        np.testing.assert_allclose(np.linalg.norm(task.X, axis=1), 1.0)
        for c, ids in task.anchors.items():
            np.testing.assert_allclose(task.X[ids] @ task.v, c, atol=1e-12)
        w = task.neighbors_for(Wiring.parse("complete:3"), 0.3)
        assert w.neighbors == tuple(task.anchors[0.3])
        with pytest.raises(ValueError):
            task.neighbors_for(Wiring.parse("star:3"), 0.3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 8), st.floats(-1, 1), st.integers(0, 1000))
    def test_with_cosine(self, d, c, seed):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        u = with_cosine(v, c, rng)
        assert u @ v == pytest.approx(c, abs=1e-12)
        assert np.linalg.norm(u) == pytest.approx(1.0)


@pytest.mark.slow
def test_wide_network_is_linear_at_large_t():
    # at width 4096 the message-passing slope stops moving once t is large
    task = make_regression_task(64, 4, seed=0)
    net, _ = train_wide_regressor(task.X, task.y, 4096, seed=0)
    s = probe_slopes(NetworkPredictor(net, task.X), ExtrapolationProbe(task.v, (50, 100), wiring="star:2"))
    assert abs(s.slopes[1] - s.slopes[0]) < 1e-2 * abs(s.slopes[1])
