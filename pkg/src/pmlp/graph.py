"""Undirected graphs, transition matrices and message passing.

A :class:`Graph` stores each undirected edge once as ``(u, v)`` with ``u < v``
and never stores self-loops; self-loops are a property of the transition
scheme, not of the data.  Every structural accessor bumps ``Graph.reads`` so
callers can audit whether a code path touched the edges of a given graph.
"""

import enum
import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, InvalidEdge, SelfLoopRejected, SplitOverlap

DEFAULT_DIFFUSION_ORDER = 10


class Scheme(enum.Enum):
    SYM = "sym"
    NO_LOOP = "no_loop"
    RW = "rw"
    DIFF = "diff"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for member in cls:
            if key in (member.value, member.name.lower()):
                return member
        raise ValueError(f"unknown transition scheme: {value!r}")

    @property
    def has_self_loops(self):
        return self is not Scheme.NO_LOOP


class Graph:
    """Immutable undirected graph on nodes ``0..n-1``."""

    __slots__ = ("n", "_edges", "_nbrs", "_deg", "_reads", "_cache")

    def __init__(self, n, edges):
        self.n = int(n)
        self._edges = edges
        self._edges.setflags(write=False)
        order = [[] for _ in range(self.n)]
        for u, v in edges:
            order[u].append(v)
            order[v].append(u)
        self._nbrs = tuple(np.array(sorted(x), dtype=np.int64) for x in order)
        for a in self._nbrs:
            a.setflags(write=False)
        self._deg = np.array([len(x) for x in self._nbrs], dtype=np.int64)
        self._deg.setflags(write=False)
        self._reads = [0]
        self._cache = {}

    def __repr__(self):
        return f"Graph(n={self.n}, num_edges={self.num_edges})"

    def _touch(self):
        self._reads[0] += 1

    @property
    def reads(self):
        """Number of structural reads performed on this graph so far."""
        return self._reads[0]

    @property
    def num_edges(self):
        return len(self._edges)

    @property
    def edges(self):
        """``(m, 2)`` array of edges with ``u < v``, lexicographically sorted."""
        self._touch()
        return self._edges

    def edge_set(self):
        self._touch()
        return {(int(u), int(v)) for u, v in self._edges}

    def has_edge(self, u, v):
        self._touch()
        if u > v:
            u, v = v, u
        nb = self._nbrs[u]
        i = np.searchsorted(nb, v)
        return bool(i < len(nb) and nb[i] == v)

    def neighbors(self, u):
        self._touch()
        return self._nbrs[u]

    @property
    def degrees(self):
        """Degrees without self-loops, ``|N_u|``."""
        self._touch()
        return self._deg

    @property
    def degrees_tilde(self):
        """Degrees counting the implicit self-loop, ``|N_u| + 1``."""
        self._touch()
        return self._deg + 1

    def adjacency(self):
        """Symmetric 0/1 adjacency as a CSR matrix (no self-loops)."""
        self._touch()
        if not len(self._edges):
            return sp.csr_matrix((self.n, self.n))
        u, v = self._edges[:, 0], self._edges[:, 1]
        data = np.ones(2 * len(u))
        return sp.csr_matrix(
            (data, (np.concatenate([u, v]), np.concatenate([v, u]))), shape=(self.n, self.n)
        )

    def subgraph_edges(self, keep):
        """Edges whose endpoints are both flagged in the boolean mask ``keep``."""
        self._touch()
        if not len(self._edges):
            return self._edges
        both = keep[self._edges[:, 0]] & keep[self._edges[:, 1]]
        return self._edges[both]


def _canonical_edges(n, edge_list):
    arr = np.asarray(list(edge_list) if not isinstance(edge_list, np.ndarray) else edge_list)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    arr = arr.reshape(-1, 2)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise InvalidEdge("edge endpoints must be integers")
    arr = arr.astype(np.int64)
    bad = (arr < 0) | (arr >= n)
    if bad.any():
        row = int(np.nonzero(bad.any(axis=1))[0][0])
        raise InvalidEdge(f"edge {tuple(arr[row])} out of range for n={n}")
    loops = arr[:, 0] == arr[:, 1]
    if loops.any():
        row = int(np.nonzero(loops)[0][0])
        raise SelfLoopRejected(f"self-loop {tuple(arr[row])} in edge list")
    arr = np.sort(arr, axis=1)
    return np.unique(arr, axis=0)


def build_graph(n, edge_list=()):
    """Build a deduplicated undirected graph.

    Raises:
        InvalidEdge: an endpoint lies outside ``0..n-1``.
        SelfLoopRejected: an edge joins a node to itself.
    """
    if int(n) < 1:
        raise ValueError("a graph needs at least one node")
    return Graph(n, _canonical_edges(int(n), edge_list))


@dataclass(frozen=True)
class TransitionMatrix:
    """One message-passing step as a sparse row operator."""

    scheme: Scheme
    matrix: sp.csr_matrix
    diffusion_order: int = 0
    zero_rows: tuple = ()

    @property
    def n(self):
        return self.matrix.shape[0]

    def row(self, u):
        """Sparse row ``u`` as a list of ``(neighbor, weight)`` pairs."""
        lo, hi = self.matrix.indptr[u], self.matrix.indptr[u + 1]
        return list(zip(self.matrix.indices[lo:hi].tolist(), self.matrix.data[lo:hi].tolist()))

    def to_dense(self):
        return self.matrix.toarray()


def _rw_with_loops(g):
    a = g.adjacency() + sp.identity(g.n, format="csr")
    inv = 1.0 / np.asarray(a.sum(axis=1)).ravel()
    return sp.diags(inv) @ a


def transition_matrix(g, scheme=Scheme.SYM, diffusion_order=DEFAULT_DIFFUSION_ORDER):
    """Normalized adjacency operator for ``scheme``.

    SYM is ``D~^-1/2 A~ D~^-1/2``, NO_LOOP is ``D^-1/2 A D^-1/2``, RW is
    ``D~^-1 A~`` and DIFF is the heat-kernel series ``sum_k P_rw^k / (e k!)``
    truncated after ``diffusion_order`` terms and renormalized to unit row sums.
    Under NO_LOOP an isolated node gets an all-zero row and a ``RuntimeWarning``.
    """
    scheme = Scheme.parse(scheme)
    if scheme is Scheme.DIFF and int(diffusion_order) < 1:
        raise ValueError("diffusion_order must be >= 1")
    key = (scheme, int(diffusion_order) if scheme is Scheme.DIFF else 0)
    cached = g._cache.get(key)
    if cached is not None:
        g._touch()
        return cached

    zero_rows = ()
    if scheme is Scheme.SYM:
        # one rounding per weight: 1/sqrt(d_u d_v) rather than a product of two roots
        a = sp.coo_matrix(g.adjacency() + sp.identity(g.n, format="csr"))
        dt = g.degrees_tilde.astype(np.float64)
        m = sp.csr_matrix((1.0 / np.sqrt(dt[a.row] * dt[a.col]), (a.row, a.col)), shape=a.shape)
    elif scheme is Scheme.NO_LOOP:
        a = g.adjacency()
        deg = g.degrees.astype(float)
        isolated = np.nonzero(deg == 0)[0]
        if len(isolated):
            zero_rows = tuple(int(i) for i in isolated)
            warnings.warn(
                f"NO_LOOP transition on graph with {len(isolated)} isolated node(s); "
                "their rows are zero",
                RuntimeWarning,
                stacklevel=2,
            )
        inv = np.zeros_like(deg)
        inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
        s = sp.diags(inv)
        m = s @ a @ s
    elif scheme is Scheme.RW:
        m = _rw_with_loops(g)
    else:
        p = _rw_with_loops(g)
        term = sp.identity(g.n, format="csr")
        m = term / math.e
        for k in range(1, int(diffusion_order) + 1):
            term = term @ p
            m = m + term / (math.e * math.factorial(k))
        m = sp.csr_matrix(m)
        rs = np.asarray(m.sum(axis=1)).ravel()
        # divide rather than scale by 1/rs so a lone diagonal entry becomes exactly 1
        m.data /= np.repeat(rs, np.diff(m.indptr))

    m = sp.csr_matrix(m)
    m.sort_indices()
    m.eliminate_zeros()
    out = TransitionMatrix(scheme, m, key[1], zero_rows)
    g._cache[key] = out
    return out


def propagate(t, H, residual_alpha=0.0, H0=None):
    """Apply one MP step: ``(1 - alpha) * P @ H + alpha * H0``.

    The input arrays are never modified.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.shape[0] != t.n:
        raise DimensionError(f"H has {H.shape[0]} rows, operator expects {t.n}")
    alpha = float(residual_alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("residual_alpha must lie in [0, 1]")
    if alpha > 0.0:
        if H0 is None:
            raise DimensionError("residual_alpha > 0 requires H0")
        H0 = np.asarray(H0, dtype=np.float64)
        if H0.shape != H.shape:
            raise DimensionError(f"H0 shape {H0.shape} does not match H shape {H.shape}")
        if alpha == 1.0:
            return H0.copy()
        return (1.0 - alpha) * (t.matrix @ H) + alpha * H0
    return np.asarray(t.matrix @ H)


@dataclass(frozen=True)
class InductiveSplit:
    train_ids: np.ndarray
    valid_ids: np.ndarray
    test_ids: np.ndarray
    train_graph: Graph
    full_graph: Graph = field(repr=False)


def _id_array(ids, n, name):
    arr = np.unique(np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64))
    if arr.size and (arr[0] < 0 or arr[-1] >= n):
        raise InvalidEdge(f"{name} ids out of range for n={n}")
    return arr


def inductive_split(g, train_ids, valid_ids=(), test_ids=()):
    """Restrict training to the subgraph induced by ``train_ids``."""
    tr = _id_array(train_ids, g.n, "train")
    va = _id_array(valid_ids, g.n, "valid")
    te = _id_array(test_ids, g.n, "test")
    for a, b, name in ((tr, va, "train/valid"), (tr, te, "train/test"), (va, te, "valid/test")):
        common = np.intersect1d(a, b)
        if common.size:
            raise SplitOverlap(f"{name} share {common.size} node(s), e.g. {int(common[0])}")
    keep = np.zeros(g.n, dtype=bool)
    keep[tr] = True
    train_graph = Graph(g.n, np.array(g.subgraph_edges(keep)))
    return InductiveSplit(tr, va, te, train_graph, g)


class Perturbation(enum.Enum):
    ADD_NOISE = "add_noise"
    SPARSIFY = "sparsify"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for member in cls:
            if key in (member.value, member.name.lower(), member.name.lower().replace("_", "")):
                return member
        if key == "noise":
            return cls.ADD_NOISE
        raise ValueError(f"unknown perturbation: {value!r}")


def _sample_non_edges(g, k, rng):
    n = g.n
    existing = {(int(u), int(v)) for u, v in g.edges}
    capacity = n * (n - 1) // 2 - len(existing)
    k = min(k, capacity)
    if k <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    if k > capacity // 4:
        iu, iv = np.triu_indices(n, 1)
        free = np.array([(a, b) not in existing for a, b in zip(iu.tolist(), iv.tolist())])
        cand = np.stack([iu[free], iv[free]], axis=1)
        pick = rng.choice(len(cand), size=k, replace=False)
        return cand[np.sort(pick)]
    added = []
    seen = set(existing)
    while len(added) < k:
        need = k - len(added)
        pairs = rng.integers(0, n, size=(2 * need + 8, 2))
        for a, b in pairs.tolist():
            if a == b:
                continue
            e = (a, b) if a < b else (b, a)
            if e in seen:
                continue
            seen.add(e)
            added.append(e)
            if len(added) == k:
                break
    return np.array(added, dtype=np.int64)


def perturb(g, op, ratio, seed=0):
    """Add random edges or drop edges, deterministically for a given seed.

    ADD_NOISE inserts ``floor(ratio * |E|)`` new edges (fewer if the graph
    saturates).  SPARSIFY keeps a uniform sample of ``ceil(ratio * |E|)``
    edges, so ``ratio`` is the kept fraction.
    """
    op = Perturbation.parse(op)
    ratio = float(ratio)
    if ratio < 0:
        raise ValueError("ratio must be non-negative")
    rng = np.random.default_rng(seed)
    edges = np.array(g.edges)
    m = len(edges)
    if op is Perturbation.ADD_NOISE:
        k = int(math.floor(ratio * m + 1e-12))
        new = _sample_non_edges(g, k, rng)
        return build_graph(g.n, np.concatenate([edges, new]) if len(new) else edges)
    if ratio > 1:
        raise ValueError("SPARSIFY ratio is a kept fraction in [0, 1]")
    keep = min(m, int(math.ceil(ratio * m - 1e-12)))
    idx = np.sort(rng.choice(m, size=keep, replace=False)) if keep < m else np.arange(m)
    return Graph(g.n, edges[idx])


def read_edge_list(path, n=None):
    """Read a whitespace-separated edge list; ``#`` lines are comments.

    A ``# nodes <n> ...`` comment, as written by :func:`write_edge_list`,
    fixes the node count so trailing isolated nodes survive a round trip.
    """
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                hit = re.match(r"#\s*nodes\s+(\d+)", s)
                if hit and n is None:
                    n = int(hit.group(1))
                continue
            parts = s.split()
            if len(parts) != 2:
                raise InvalidEdge(f"{path}:{lineno}: expected two node ids, got {s!r}")
            pairs.append((int(parts[0]), int(parts[1])))
    if n is None:
        n = 1 + max((max(p) for p in pairs), default=0)
    return build_graph(n, pairs)


def write_edge_list(g, path, header=True):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# nodes {g.n} edges {g.num_edges}\n")
        for u, v in g.edges:
            fh.write(f"{u} {v}\n")
