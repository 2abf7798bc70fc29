"""Directional slope probes for predictions far outside the training support.

A synthetic test node ``x0 = t * v`` is attached to a fixed training set via
a wiring (isolated, a star onto ``k`` training nodes, or a clique with ``k - 1``
training nodes) and the finite-difference slope
``(f(x0 + dt * v) - f(x0)) / dt`` is recorded along a grid of ``t``.  With
random-walk aggregation before each layer, the asymptotic slope of the
message-passing prediction equals the MLP slope times
``sum_{i in N~(0)} 1 / (d~_0 d~_i)``.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFeature, DimensionError, NumericalOverflow
from .gntk import cross_kernel, gntk_node, kernel_fit
from .graph import Graph, Scheme, build_graph, inductive_split
from .nn import NO_MP, Loss, MpPlacement, NetConfig, Placement, TrainConfig, forward, train
from .numerics import make_rng

PMLP_PLACEMENT = MpPlacement(Placement.PER_LAYER, scheme=Scheme.RW)
DEFAULT_T_GRID = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0)


@dataclass(frozen=True)
class Wiring:
    """How the synthetic test node connects to the training nodes.

    ``star`` links the test node to ``k`` training nodes; ``complete`` forms a
    clique of ``k`` nodes, the test node plus ``k - 1`` training nodes.
    """

    kind: str = "isolated"
    k: int = 0
    neighbors: tuple = None

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in ("isolated", "star", "complete"):
            raise ValueError(f"unknown wiring kind {self.kind!r}")
        if kind == "isolated":
            object.__setattr__(self, "k", 0)
        elif kind == "star" and self.k < 1:
            raise ValueError("star wiring needs k >= 1")
        elif kind == "complete" and self.k < 2:
            raise ValueError("complete wiring needs k >= 2")
        if self.neighbors is not None:
            nb = tuple(int(i) for i in self.neighbors)
            if len(nb) != self.num_neighbors or len(set(nb)) != len(nb):
                raise ValueError(f"{self} needs {self.num_neighbors} distinct neighbors, got {nb}")
            object.__setattr__(self, "neighbors", nb)

    @classmethod
    def parse(cls, text):
        text = str(text).strip().lower()
        if text == "isolated":
            return cls("isolated")
        kind, _, k = text.partition(":")
        if not k:
            raise ValueError(f"wiring {text!r} needs a size, e.g. star:2")
        return cls(kind, int(k))

    @property
    def num_neighbors(self):
        return {"isolated": 0, "star": self.k, "complete": self.k - 1}[self.kind]

    @property
    def label(self):
        return "isolated" if self.kind == "isolated" else f"{self.kind}:{self.k}"

    def with_neighbors(self, ids):
        return Wiring(self.kind, self.k, tuple(ids))

    def resolve(self, n_train):
        """Default neighbors: the first training ids."""
        if self.neighbors is not None:
            return self
        if self.num_neighbors > n_train:
            raise ValueError(f"{self.label} needs {self.num_neighbors} training nodes, have {n_train}")
        return self.with_neighbors(range(self.num_neighbors))


def attach_test_node(train_graph, wiring):
    """Graph with one extra node (id ``n``) wired into ``train_graph``."""
    n = train_graph.n
    wiring = wiring.resolve(n)
    nb = list(wiring.neighbors)
    if any(not 0 <= i < n for i in nb):
        raise DimensionError("wiring neighbors must be training node ids")
    new = [(i, n) for i in nb]
    if wiring.kind == "complete":
        new += [(a, b) for x, a in enumerate(nb) for b in nb[x + 1 :]]
    old = [tuple(e) for e in train_graph.edges.tolist()]
    return build_graph(n + 1, old + new), n


def ego_subgraph(g, center, hops):
    """Nodes within ``hops`` of ``center`` and the edges among them.

    For an ``L``-layer network with one aggregation per layer, the output at
    ``center`` on the ego graph with ``hops = L`` equals the full-graph output.
    Returns ``(local_graph, node_ids, local_center)``.
    """
    seen = {int(center)}
    frontier = [int(center)]
    for _ in range(hops):
        nxt = []
        for u in frontier:
            for v in g.neighbors(u).tolist():
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    ids = np.array(sorted(seen), dtype=np.int64)
    pos = {u: i for i, u in enumerate(ids.tolist())}
    edges = [(pos[u], pos[v]) for u in ids.tolist() for v in g.neighbors(u).tolist() if v in pos and u < v]
    return build_graph(len(ids), edges), ids, pos[int(center)]


def degree_factor(g, test_node):
    """Degree factor ``sum_{i in N(0) + {0}} 1 / (d~_0 d~_i)``."""
    dt = g.degrees_tilde
    nodes = np.append(g.neighbors(test_node), test_node)
    return float(np.sum(1.0 / (dt[test_node] * dt[nodes])))


@dataclass(frozen=True)
class RateBound:
    bound: float
    alpha_min: float
    alpha_min_raw: float
    d_max: int
    alphas: tuple = ()


def neighborhood_alphas(g, X, nodes):
    """Cosine between each node's unit feature and its neighbours' mean unit feature.

    Isolated nodes get 1.  A neighbourhood whose mean cancels to zero gets 0.
    """
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    need = set(int(i) for i in nodes)
    for i in list(need):
        need.update(g.neighbors(i).tolist())
    for i in need:
        if norms[i] == 0.0:
            raise DegenerateFeature(f"node {i} has a zero feature vector")
    out = []
    for i in nodes:
        nb = g.neighbors(i)
        if nb.size == 0:
            out.append(1.0)
            continue
        mean = (X[nb] / norms[nb, None]).mean(axis=0)
        mnorm = np.linalg.norm(mean)
        out.append(0.0 if mnorm == 0 else float(X[i] @ mean / (norms[i] * mnorm)))
    return np.array(out)


def rate_bound(d_max, alpha_min, t):
    """``(1 + (d_max - 1) * sqrt(1 - alpha_min^2)) / t``."""
    a = min(max(float(alpha_min), 0.0), 1.0)
    return (1.0 + (d_max - 1) * math.sqrt(1.0 - a * a)) / float(t)


def convergence_bound(g, test_node, X, t):
    """Rate bound at ``t`` for the neighbourhood of ``test_node``.

    ``X`` holds features for every node of ``g`` (only the closed
    neighbourhood and its neighbours are read); rows are normalized to unit
    length before taking cosines.  Negative cosines are clamped to 0 for the
    bound and reported raw as ``alpha_min_raw``.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != g.n:
        raise DimensionError("X must have one row per graph node")
    nodes = np.append(g.neighbors(test_node), test_node)
    alphas = neighborhood_alphas(g, X, nodes)
    raw = float(alphas.min())
    d_max = int(g.degrees_tilde[nodes].max())
    return RateBound(rate_bound(d_max, raw, t), max(raw, 0.0), raw, d_max, tuple(alphas.tolist()))


@dataclass
class ExtrapolationProbe:
    v: np.ndarray
    t_grid: tuple = DEFAULT_T_GRID
    delta_t: float = 1.0
    wiring: Wiring = field(default_factory=Wiring)
    probe_id: str = "probe"

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64).ravel()
        if abs(np.linalg.norm(self.v) - 1.0) > 1e-12:
            raise ValueError("v must be a unit vector")
        grid = np.asarray(self.t_grid, dtype=np.float64)
        if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
            raise ValueError("t_grid must be positive and strictly increasing")
        self.t_grid = tuple(grid.tolist())
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")
        if np.any(grid + self.delta_t == grid):
            raise ValueError("delta_t is below float resolution at the largest t")
        if isinstance(self.wiring, str):
            self.wiring = Wiring.parse(self.wiring)


@dataclass
class SlopeSeries:
    probe_id: str
    wiring: str
    t_grid: tuple
    slopes: np.ndarray
    mlp_slopes: np.ndarray
    c_v_hat: float
    coeff_factor: float
    alpha_min: float
    alpha_min_raw: float
    d_max: int
    neighbors: tuple = ()

    def to_dict(self):
        return {
            "probe_id": self.probe_id,
            "wiring": self.wiring,
            "neighbors": list(self.neighbors),
            "t_grid": list(self.t_grid),
            "slopes": self.slopes.tolist(),
            "mlp_slopes": self.mlp_slopes.tolist(),
            "c_v_hat": self.c_v_hat,
            "coeff_factor": self.coeff_factor,
            "alpha_min": self.alpha_min,
            "alpha_min_raw": self.alpha_min_raw,
            "d_max": self.d_max,
            "deviations": deviation_series(self).tolist(),
        }

    @property
    def slope_ratio(self):
        """PMLP slope over the MLP estimate at the largest ``t``."""
        return float(self.slopes[-1] / self.c_v_hat)


class NetworkPredictor:
    """Scalar predictions of a trained network in MLP or message-passing mode."""

    def __init__(self, net, X_train, train_graph=None, placement=PMLP_PLACEMENT):
        self.net = net
        self.X_train = np.asarray(X_train, dtype=np.float64)
        n = self.X_train.shape[0]
        self.train_graph = train_graph if train_graph is not None else build_graph(n, [])
        self.placement = placement
        self.hops = len(net.weights) if placement.mode is Placement.PER_LAYER else None

    def __call__(self, X, g, node, mode):
        if mode == "mlp":
            out, _ = forward(self.net, X[node : node + 1], None, NO_MP)
            return float(out[0, 0])
        if self.hops is not None:
            g, ids, node = ego_subgraph(g, node, self.hops)
            X = X[ids]
        out, _ = forward(self.net, X, g, self.placement)
        return float(out[node, 0])


class KernelPredictor:
    """Infinite-width predictions from one min-norm fit with the MLP NTK.

    The same coefficients serve both modes; only the test-side feature map
    changes, aggregating over the probe graph in message-passing mode.
    """

    def __init__(self, X_train, y, train_graph=None, ridge=1e-10, bias=True, placement=PMLP_PLACEMENT):
        self.X_train = np.asarray(X_train, dtype=np.float64)
        n = self.X_train.shape[0]
        self.train_graph = train_graph if train_graph is not None else build_graph(n, [])
        self.bias = bias
        self.placement = placement
        K = gntk_node(self.X_train, None, None, bias=bias)
        self.reg = kernel_fit(K, np.asarray(y, dtype=np.float64), ridge)

    def __call__(self, X, g, node, mode):
        if mode == "mlp":
            col = cross_kernel(self.X_train, X[node : node + 1], bias=self.bias)[:, 0]
        else:
            g, ids, node = ego_subgraph(g, node, 2)
            col = cross_kernel(self.X_train, X[ids], None, g, None, self.placement, bias=self.bias)[:, node]
        return float(self.reg.coefficients @ col)


def probe_slopes(predictor, probe):
    """Finite-difference slopes along ``probe.v`` in both modes.

    The message-passing slope at every ``t`` goes to ``slopes`` and the MLP
    slope to ``mlp_slopes``; ``c_v_hat`` is the MLP slope at the largest ``t``.

    Raises:
        NumericalOverflow: a prediction is not finite.
    """
    X_train = predictor.X_train
    if probe.v.shape[0] != X_train.shape[1]:
        raise DimensionError("probe direction does not match the feature dimension")
    wiring = probe.wiring.resolve(X_train.shape[0])
    g, test = attach_test_node(predictor.train_graph, wiring)
    X = np.vstack([X_train, np.zeros((1, X_train.shape[1]))])
    slopes, mlp = [], []
    for t in probe.t_grid:
        vals = {}
        for mode in ("pmlp", "mlp"):
            pair = []
            for tt in (t, t + probe.delta_t):
                X[test] = tt * probe.v
                f = predictor(X, g, test, mode)
                if not math.isfinite(f):
                    raise NumericalOverflow(tt)
                pair.append(f)
            vals[mode] = (pair[1] - pair[0]) / probe.delta_t
        slopes.append(vals["pmlp"])
        mlp.append(vals["mlp"])
    X[test] = probe.v
    rb = convergence_bound(g, test, X, probe.t_grid[-1])
    return SlopeSeries(
        probe.probe_id,
        wiring.label,
        probe.t_grid,
        np.array(slopes),
        np.array(mlp),
        float(mlp[-1]),
        degree_factor(g, test),
        rb.alpha_min,
        rb.alpha_min_raw,
        rb.d_max,
        wiring.neighbors,
    )


def deviation_series(series):
    """``|s(t) / (c_v_hat * coeff_factor) - 1|`` per ``t``."""
    denom = series.c_v_hat * series.coeff_factor
    if denom == 0:
        raise ZeroDivisionError("slope estimate or degree factor is zero")
    return np.abs(np.asarray(series.slopes) / denom - 1.0)


def fitted_bound_constant(series):
    """Smallest ``C`` with ``deviation(t) <= C * bound(t)`` on the grid."""
    dev = deviation_series(series)
    bounds = np.array([rate_bound(series.d_max, series.alpha_min, t) for t in series.t_grid])
    return float(np.max(dev / bounds))


def save_probe(path, series_list):
    with open(path, "w") as fh:
        json.dump([s.to_dict() for s in series_list], fh, indent=2)


def load_probe(path):
    with open(path) as fh:
        return json.load(fh)


# regression task used by the probes


def unit_rows(X):
    X = np.asarray(X, dtype=np.float64)
    n = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateFeature("zero feature vector")
    return X / n


def with_cosine(v, cos, rng):
    """A unit vector whose cosine with unit ``v`` is ``cos``."""
    u = rng.standard_normal(v.shape[0])
    u -= (u @ v) * v
    u /= np.linalg.norm(u)
    return cos * v + math.sqrt(max(1.0 - cos * cos, 0.0)) * u


@dataclass
class RegressionTask:
    X: np.ndarray
    y: np.ndarray
    v: np.ndarray
    anchors: dict = field(default_factory=dict)

    def neighbors_for(self, wiring, cos):
        """Pick the anchor nodes built with cosine ``cos`` to ``v``."""
        ids = self.anchors[cos][: wiring.num_neighbors]
        if len(ids) < wiring.num_neighbors:
            raise ValueError(f"only {len(ids)} anchors at cosine {cos}")
        return wiring.with_neighbors(ids)


def make_regression_task(n=64, d=4, seed=0, anchor_cosines=(), anchors_per_cosine=3):
    """Unit-norm training features with a smooth scalar target.

    The target is ``sin(2 x.u1) + (x.u2)^2`` for fixed random directions.
    For every cosine in ``anchor_cosines``, ``anchors_per_cosine`` extra
    training nodes are placed at that cosine to the probe direction ``v``.
    """
    rng = make_rng(seed)
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    X = unit_rows(rng.standard_normal((n, d)))
    anchors = {}
    rows = [X]
    for c in anchor_cosines:
        pts = np.array([with_cosine(v, c, rng) for _ in range(anchors_per_cosine)])
        start = sum(r.shape[0] for r in rows)
        anchors[c] = list(range(start, start + anchors_per_cosine))
        rows.append(pts)
    X = np.vstack(rows)
    u1, u2 = unit_rows(rng.standard_normal((2, d)))
    y = np.sin(2 * X @ u1) + (X @ u2) ** 2
    return RegressionTask(X, y, v, anchors)


def train_wide_regressor(X, y, width=4096, seed=0, epochs=500, lr=1e-2, weight_decay=0.0):
    """Two-layer ReLU network trained with the squared loss on an edgeless graph."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    g = build_graph(n, [])
    split = inductive_split(g, np.arange(n))
    netcfg = NetConfig(X.shape[1], 1, hidden=width, num_layers=2, dropout=0.0)
    cfg = TrainConfig(
        epochs=epochs,
        learning_rate=lr,
        weight_decay=weight_decay,
        loss=Loss.SQUARED,
        seed=seed,
        early_stop_patience=None,
    )
    net, hist = train(netcfg, cfg, (X, np.asarray(y, dtype=np.float64), split))
    return net, hist
