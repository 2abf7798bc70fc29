"""Infinite-width kernels for ReLU networks with message passing.

The kernels are computed by the layer recursion on dense covariance
matrices.  Each side of a kernel evaluation carries its own node features and
message-passing operators, which covers the MLP NTK (no operators on either
side), the node-level GNTK (the same operators on both sides) and the cross
kernel between an MLP feature map and a message-passing feature map.

Message passing inside the kernel always uses random-walk averaging with
self-loops, ``P = D~^-1 A~``, and the ReLU expectations are scaled by
``c = 2``.
"""

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FactorizationError
from .graph import Scheme, transition_matrix
from .nn import MpPlacement, Placement
from .numerics import AUTO, auto_ridge, cholesky, make_rng, save_dense, solve_spd

SCALE_C = 2.0
VALIDATED_DEPTH = 2
_COLLINEAR_TOL = 32 * np.finfo(np.float64).eps

GNN_PLACEMENT = MpPlacement(Placement.PER_LAYER, scheme=Scheme.RW)


class KernelKind(enum.Enum):
    MLP_NTK = "mlp_ntk"
    GNTK = "gntk"
    CROSS = "cross"


def relu_moments_closed(lam):
    """Arc-cosine closed form of the ReLU moments for a 2x2 covariance.

    Returns ``(E[relu(u) relu(v)], E[step(u) step(v)])`` for
    ``(u, v) ~ N(0, lam)``, without the scale constant.  A zero variance
    gives ``(0, 0)`` because ``step(0) = 0``.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (2, 2):
        raise DimensionError("lam must be 2x2")
    if lam[0, 0] < 0 or lam[1, 1] < 0:
        raise ValueError("variances must be non-negative")
    m1, m0 = _arccos_moments(
        np.array([lam[0, 0]]), np.array([lam[1, 1]]), np.array([[0.5 * (lam[0, 1] + lam[1, 0])]])
    )
    return float(m1[0, 0]), float(m0[0, 0])


def _arccos_moments(diag_a, diag_b, cross):
    # theta = atan2(|a||b| sin, |a||b| cos) avoids arccos of a ratio that rounds
    # just below 1; on the diagonal ab - c^2 is then exactly 0
    ab = np.maximum(diag_a, 0.0)[:, None] * np.maximum(diag_b, 0.0)[None, :]
    live = ab > 0
    c = np.clip(cross, -np.sqrt(ab), np.sqrt(ab))
    gap = ab - c * c
    # angles below ~sqrt(eps) are rounding noise in the Gram entries: treat as collinear
    gap[gap <= _COLLINEAR_TOL * ab] = 0.0
    s = np.sqrt(gap)
    theta = np.arctan2(s, c)
    m1 = np.where(live, np.maximum(s + (math.pi - theta) * c, 0.0) / (2 * math.pi), 0.0)
    m0 = np.where(live, (math.pi - theta) / (2 * math.pi), 0.0)
    return m1, m0


@dataclass
class KernelState:
    """Covariances at one hidden layer.

    ``lam_a``/``lam_b`` are the variances on each side and ``lam_cross`` the
    covariance, so ``Lambda(i, j) = [[lam_a[i], lam_cross[i, j]],
    [lam_cross[i, j], lam_b[j]]]``.
    """

    sigma: np.ndarray
    sigma_dot: np.ndarray
    ntk: np.ndarray
    lam_a: np.ndarray
    lam_b: np.ndarray
    lam_cross: np.ndarray

    def lam(self, i, j):
        c = self.lam_cross[i, j]
        return np.array([[self.lam_a[i], c], [c, self.lam_b[j]]])


@dataclass
class KernelMatrix:
    K: np.ndarray
    kind: KernelKind
    node_ids: np.ndarray
    col_ids: np.ndarray = None
    experimental: bool = False
    states: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.col_ids is None:
            self.col_ids = self.node_ids

    @property
    def shape(self):
        return self.K.shape

    def is_symmetric(self, tol=1e-9):
        K = self.K
        return K.shape[0] == K.shape[1] and bool(
            np.all(np.abs(K - K.T) <= tol * max(1.0, np.abs(K).max(initial=0.0)))
        )

    def check_psd(self, rel_ridge=1e-10):
        """True when ``K + rel_ridge * trace / m * I`` admits a Cholesky factor."""
        m = self.K.shape[0]
        ridge = rel_ridge * max(float(np.trace(self.K)), 0.0) / m
        try:
            cholesky(self.K + ridge * np.eye(m))
        except FactorizationError:
            return False
        return True


@dataclass
class _Side:
    X: np.ndarray
    # ops[l] lists the operators applied to the input of FF layer l; ops[L] is post-processing
    ops: list


def _layer_ops(placement, g, num_ff_layers):
    ops = [[] for _ in range(num_ff_layers + 1)]
    if placement is None or not placement.uses_graph:
        return ops
    if g is None:
        raise DimensionError("a message-passing placement needs a graph")
    P = transition_matrix(g, Scheme.RW).matrix
    if placement.mode is Placement.PER_LAYER:
        for l in range(num_ff_layers):
            ops[l].append(P)
    elif placement.mode is Placement.PRE:
        ops[0].extend([P] * placement.num_mp)
    else:
        ops[num_ff_layers].extend([P] * placement.num_mp)
    return ops


def _left(ops, M):
    for P in ops:
        M = np.asarray(P @ M)
    return M


def _right(M, ops):
    for P in ops:
        M = np.asarray((P @ M.T).T)
    return M


def _recursion(a, b, num_ff_layers, keep_states=False):
    """NTK recursion between two sides; returns ``(ntk, states)``."""
    same = a is b
    # first-layer aggregation acts on the features, not the Gram: P S P^T
    # cancels badly when neighbour features have opposite signs
    Xa = _left(a.ops[0], a.X)
    Xb = Xa if same else _left(b.ops[0], b.X)
    Saa = Xa @ Xa.T
    Sbb = Saa if same else Xb @ Xb.T
    Sab = Saa if same else Xa @ Xb.T
    T = Sab
    states = []
    L = num_ff_layers
    for l in range(L):
        oa, ob = a.ops[l], b.ops[l]
        if l > 0 and (oa or ob):
            Sab = _right(_left(oa, Sab), ob)
            T = _right(_left(oa, T), ob)
            if same:
                Saa = Sbb = Sab
            else:
                Saa = _right(_left(oa, Saa), oa)
                Sbb = _right(_left(ob, Sbb), ob)
        if l == L - 1:
            break
        # hidden ReLU layer
        da, db = np.diag(Saa).copy(), np.diag(Sbb).copy()
        m1, m0 = _arccos_moments(da, db, Sab)
        sig, sig_dot = SCALE_C * m1, SCALE_C * m0
        T = T * sig_dot + sig
        if keep_states:
            states.append(KernelState(sig, sig_dot, T.copy(), da, db, Sab.copy()))
        if same:
            Sab = Saa = Sbb = sig
        else:
            Sab = sig
            Saa = SCALE_C * _arccos_moments(da, da, Saa)[0]
            Sbb = SCALE_C * _arccos_moments(db, db, Sbb)[0]
    T = _right(_left(a.ops[L], T), b.ops[L])
    if same:
        T = 0.5 * (T + T.T)
    return T, states


def augment_bias(X):
    """Append a constant-one column, ``[x | 1]``."""
    X = np.asarray(X, dtype=np.float64)
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _prep(X, bias):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError("X must be a 2-D array")
    return augment_bias(X) if bias else X


def gntk_node(X, g=None, placement=GNN_PLACEMENT, num_ff_layers=2, nodes=None, bias=False, keep_states=False):
    """Node-level kernel of a ReLU network with message passing.

    ``placement`` fixes where aggregation steps enter (its scheme is
    ignored: the kernel always averages with ``D~^-1 A~``).  A placement of
    mode NONE gives the MLP NTK.  ``nodes`` restricts the returned matrix to
    a subset of rows and columns.  Depths other than 2 are computed by the
    same recursion but flagged ``experimental``.
    """
    if num_ff_layers < 1:
        raise ValueError("num_ff_layers must be >= 1")
    X = _prep(X, bias)
    if g is not None and g.n != X.shape[0]:
        raise DimensionError(f"graph has {g.n} nodes but X has {X.shape[0]} rows")
    side = _Side(X, _layer_ops(placement, g, num_ff_layers))
    T, states = _recursion(side, side, num_ff_layers, keep_states)
    ids = np.arange(X.shape[0]) if nodes is None else np.asarray(nodes, dtype=np.int64)
    if nodes is not None:
        T = T[np.ix_(ids, ids)]
    kind = KernelKind.GNTK if placement is not None and placement.uses_graph else KernelKind.MLP_NTK
    return KernelMatrix(T, kind, ids, experimental=num_ff_layers != VALIDATED_DEPTH, states=states)


def mlp_ntk(X, num_ff_layers=2, bias=False):
    return gntk_node(X, None, None, num_ff_layers, bias=bias)


def cross_kernel(X_a, X_b, g_a=None, g_b=None, placement_a=None, placement_b=None, num_ff_layers=2, bias=False):
    """Kernel between two feature maps built on different graph contexts.

    Row ``i`` is node ``i`` of side ``a`` and column ``j`` node ``j`` of side
    ``b``; each side aggregates over its own graph with its own placement.
    """
    a = _Side(_prep(X_a, bias), _layer_ops(placement_a, g_a, num_ff_layers))
    b = _Side(_prep(X_b, bias), _layer_ops(placement_b, g_b, num_ff_layers))
    if a.X.shape[1] != b.X.shape[1]:
        raise DimensionError("both sides need the same feature dimension")
    T, _ = _recursion(a, b, num_ff_layers)
    return T


def cross_kernel_pmlp_matrix(X_train, X_full, g_full, test_ids, placement=GNN_PLACEMENT, num_ff_layers=2, bias=False):
    """``(m, q)`` kernel between MLP feature maps of the training rows and
    message-passing feature maps of ``test_ids`` on the full graph."""
    T = cross_kernel(X_train, X_full, None, g_full, None, placement, num_ff_layers, bias)
    return T[:, np.asarray(test_ids, dtype=np.int64)]


def cross_kernel_pmlp(X_train, g_train, X_test_ctx, g_full, train_ids, test_id, placement=GNN_PLACEMENT, num_ff_layers=2, bias=False):
    """Cross-kernel vector for one test node.

    Entry ``i`` pairs the MLP feature map of training node ``train_ids[i]``
    (features ``X_train[i]``) with the message-passing feature map of
    ``test_id`` over ``g_full``.  ``g_train`` is accepted for symmetry with
    the train-side context; the MLP map never reads it.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    if X_train.shape[0] != len(train_ids):
        raise DimensionError("X_train rows must align with train_ids")
    if not 0 <= int(test_id) < g_full.n:
        raise DimensionError(f"test node {test_id} not in the full graph")
    return cross_kernel_pmlp_matrix(X_train, X_test_ctx, g_full, [int(test_id)], placement, num_ff_layers, bias)[:, 0]


def _mc_ops(placement, g):
    ops = _layer_ops(placement, g, 2)
    return ops[0], ops[1] + ops[2]


def feature_maps_mc(X, g, width, seed=0, placement=GNN_PLACEMENT, nodes=None, bias=False):
    """Finite-width feature maps of a two-layer ReLU network, one row per node.

    For ``w_k ~ N(0, I)``, ``k = 1..width``, with aggregated inputs
    ``h_j = (P X)_j``, node ``j`` first gets the blocks
    ``sqrt(c / width) * [h_j * step(w_k.h_j), relu(w_k.h_j)]`` and the map of
    node ``i`` is the ``P``-weighted sum of its neighbours' blocks (the
    ``1 / d~_i`` weights are the degree-dependent constant).  Inner products
    converge to :func:`gntk_node` as ``width`` grows.  The same ``w_k`` are
    shared by all nodes, so a fixed ``seed`` gives comparable maps.
    """
    X = _prep(X, bias)
    width = int(width)
    if width < 1:
        raise ValueError("width must be >= 1")
    pre, post = _mc_ops(placement, g)
    H = _left(pre, X)
    W = make_rng(seed).standard_normal((width, X.shape[1]))
    Z = H @ W.T
    on = Z > 0
    scale = math.sqrt(SCALE_C / width)
    grad_block = (on[:, :, None] * H[:, None, :]).reshape(X.shape[0], -1)
    phi = scale * np.hstack([grad_block, np.where(on, Z, 0.0)])
    phi = _left(post, phi)
    if nodes is not None:
        phi = phi[np.asarray(nodes, dtype=np.int64)]
    return phi


def feature_map_mc(X, g, node_id, width, seed=0, placement=GNN_PLACEMENT, bias=False):
    return feature_maps_mc(X, g, width, seed, placement, [node_id], bias)[0]


def mc_kernel(X, g, width, seed=0, placement=GNN_PLACEMENT, bias=False, chunk=4096):
    """Gram matrix of :func:`feature_maps_mc` without storing the maps.

    Uses ``<phi1_i, phi1_j> = c / width * sum_k (h_i.h_j step_ik step_jk +
    relu_ik relu_jk)`` and then applies the post-aggregation on both sides.
    Draws the same ``w_k`` as the explicit map for a given seed.
    """
    X = _prep(X, bias)
    pre, post = _mc_ops(placement, g)
    H = _left(pre, X)
    W = make_rng(seed).standard_normal((int(width), X.shape[1]))
    G = H @ H.T
    A = np.zeros_like(G)
    B = np.zeros_like(G)
    for lo in range(0, W.shape[0], chunk):
        Z = H @ W[lo : lo + chunk].T
        on = (Z > 0).astype(np.float64)
        A += on @ on.T
        r = np.where(Z > 0, Z, 0.0)
        B += r @ r.T
    K1 = SCALE_C / W.shape[0] * (G * A + B)
    return _right(_left(post, K1), post)


@dataclass(frozen=True)
class KernelRegressor:
    """Min-norm (ridge-stabilized) kernel regression solution."""

    coefficients: np.ndarray
    train_ids: np.ndarray
    ridge: float
    context: dict = field(default_factory=dict, repr=False)

    def residual(self, K, y):
        K = K.K if isinstance(K, KernelMatrix) else np.asarray(K)
        A = K.astype(np.longdouble) + self.ridge * np.eye(K.shape[0], dtype=np.longdouble)
        return float(np.max(np.abs(A @ self.coefficients - y)))


def kernel_fit(K_train, y, ridge=AUTO, **context):
    """Solve ``(K + ridge I) lam = y``; extra keywords are kept as context."""
    if isinstance(K_train, KernelMatrix):
        K, ids = K_train.K, K_train.node_ids
    else:
        K = np.asarray(K_train, dtype=np.float64)
        ids = np.arange(K.shape[0])
    ridge_value = auto_ridge(K) if isinstance(ridge, str) and ridge.lower() == AUTO else float(ridge)
    lam = solve_spd(K, y, ridge_value)
    return KernelRegressor(lam, np.asarray(ids), ridge_value, dict(context))


def kernel_predict(reg, cross):
    """``lam . cross``; ``cross`` may hold one column per test point."""
    cross = np.asarray(cross, dtype=np.float64)
    lam = reg.coefficients
    if cross.shape[0] != lam.shape[0]:
        raise DimensionError(f"cross has {cross.shape[0]} rows, regressor has {lam.shape[0]} points")
    out = lam.T @ cross if lam.ndim > 1 else lam @ cross
    return float(out) if np.ndim(out) == 0 else out


def save_kernel(path, km, ridge=None):
    """Write ``K`` in the dense text format plus a ``<path>.json`` sidecar."""
    save_dense(path, km.K)
    meta = {
        "kind": km.kind.value,
        "node_ids": [int(i) for i in km.node_ids],
        "col_ids": [int(i) for i in km.col_ids],
        "ridge": ridge,
        "experimental": km.experimental,
    }
    with open(f"{path}.json", "w") as fh:
        json.dump(meta, fh, indent=2)


def load_kernel(path):
    from .numerics import load_dense

    K = load_dense(path)
    with open(f"{path}.json") as fh:
        meta = json.load(fh)
    km = KernelMatrix(
        K,
        KernelKind(meta["kind"]),
        np.array(meta["node_ids"], dtype=np.int64),
        np.array(meta.get("col_ids", meta["node_ids"]), dtype=np.int64),
        bool(meta.get("experimental", False)),
    )
    return km, meta.get("ridge")
