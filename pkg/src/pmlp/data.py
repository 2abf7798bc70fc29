"""Datasets: file ingestion, contextual SBM generation and preprocessing.

On disk a dataset is four files bound by a ``dataset.json`` manifest:

* edges: edge-list text (see :func:`pmlp.graph.read_edge_list`)
* features: CSV, one node per row
* labels: CSV with rows ``node_id,class``
* split: JSON ``{"train": [...], "valid": [...], "test": [...]}``

The manifest stores SHA-256 checksums of the four files and the
normalization already applied to the stored features.
"""

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import LabelError, SchemaError, StratificationError
from .graph import Graph, build_graph, inductive_split, perturb, read_edge_list, write_edge_list
from .numerics import make_rng

NORM_NONE = "none"
NORM_ROW_L1_COL_STD = "row_l1+col_std_train"
MANIFEST = "dataset.json"
DATA_DIR_ENV = "PMLP_DATA_DIR"


@dataclass(frozen=True)
class Dataset:
    graph: Graph
    X: np.ndarray
    labels: np.ndarray
    split: object
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.graph.n

    @property
    def num_classes(self):
        return int(self.meta.get("num_classes", int(self.labels.max()) + 1))

    @property
    def name(self):
        return self.meta.get("name", "dataset")

    def with_graph(self, g):
        """Same nodes, features and ids on a new graph; the split is recomputed."""
        s = self.split
        return replace(self, graph=g, split=inductive_split(g, s.train_ids, s.valid_ids, s.test_ids))

    def with_split(self, train, valid, test):
        return replace(self, split=inductive_split(self.graph, train, valid, test))


def normalize_features(X, train_ids):
    """Scale rows to unit L1 norm, then standardize columns with train-node statistics.

    Zero rows stay zero; columns with zero spread on the training nodes are
    only centred.
    """
    X = np.asarray(X, dtype=np.float64)
    l1 = np.abs(X).sum(axis=1, keepdims=True)
    X = np.divide(X, l1, out=np.zeros_like(X), where=l1 > 0)
    ref = X[np.asarray(train_ids, dtype=np.int64)] if len(train_ids) else X
    mu = ref.mean(axis=0)
    sd = ref.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - mu) / sd


def perturb_dataset(ds, op, ratio, seed):
    """Perturb the full graph and recompute the training subgraph."""
    return ds.with_graph(perturb(ds.graph, op, ratio, seed))


# contextual stochastic block model


@dataclass(frozen=True)
class CsbmParams:
    n: int = 1000
    num_classes: int = 2
    intra_p: float = 0.02
    inter_q: float = 0.002
    feature_dim: int = 16
    feature_signal: float = 0.5
    seed: int = 0
    train_per_class: int = 20
    valid_per_class: int = 30

    def __post_init__(self):
        if not 0.0 <= self.inter_q <= self.intra_p <= 1.0:
            raise ValueError("need 0 <= inter_q <= intra_p <= 1")
        if self.n < 1 or self.num_classes < 1 or self.feature_dim < 1:
            raise ValueError("n, num_classes and feature_dim must be positive")

    @classmethod
    def parse(cls, text):
        """Parse ``key=value`` pairs separated by commas, e.g. ``n=500,p=0.03``."""
        aliases = {"p": "intra_p", "q": "inter_q", "c": "num_classes", "d": "feature_dim", "signal": "feature_signal"}
        kw = {}
        for part in filter(None, (s.strip() for s in str(text).split(","))):
            key, _, val = part.partition("=")
            if not val:
                raise ValueError(f"bad CSBM field {part!r}; expected key=value")
            key = aliases.get(key.strip(), key.strip())
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown CSBM field {key!r}")
            typ = int if key in ("n", "num_classes", "feature_dim", "seed", "train_per_class", "valid_per_class") else float
            kw[key] = typ(val)
        return cls(**kw)


def _class_means(rng, c, d, signal):
    # centred simplex: orthonormal directions minus their mean, so the means
    # sum to zero (two classes give +mu and -mu)
    G = rng.standard_normal((d, c))
    if c <= d:
        Q, _ = np.linalg.qr(G)
        M = Q[:, :c].T
    else:
        M = (G / np.linalg.norm(G, axis=0)).T
    if c > 1:
        M = M - M.mean(axis=0)
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    return signal * M / norms


def _sbm_edges(rng, y, p, q):
    n = len(y)
    rows = []
    for i in range(n - 1):
        prob = np.where(y[i + 1 :] == y[i], p, q)
        hit = np.nonzero(rng.random(n - i - 1) < prob)[0]
        if hit.size:
            rows.append(np.stack([np.full(hit.size, i), hit + i + 1], axis=1))
    return np.concatenate(rows) if rows else np.zeros((0, 2), dtype=np.int64)


def per_class_split(labels, train_per_class, valid_per_class, rng):
    """``train_per_class`` and ``valid_per_class`` random nodes per class; the rest is test."""
    labels = np.asarray(labels)
    train, valid, test = [], [], []
    for c in np.unique(labels[labels >= 0]):
        ids = rng.permutation(np.nonzero(labels == c)[0])
        train.extend(ids[:train_per_class])
        valid.extend(ids[train_per_class : train_per_class + valid_per_class])
        test.extend(ids[train_per_class + valid_per_class :])
    return np.sort(train), np.sort(valid), np.sort(test)


def csbm_generate(p):
    """Sample a contextual SBM.

    Classes are balanced and assigned uniformly at random; an edge appears with probability ``intra_p``
    inside a class and ``inter_q`` across classes; features are the class
    mean (norm ``feature_signal``) plus standard Gaussian noise.
    """
    rng = make_rng(p.seed)
    y = rng.permutation(np.arange(p.n) % p.num_classes)
    means = _class_means(rng, p.num_classes, p.feature_dim, p.feature_signal)
    X = means[y] + rng.standard_normal((p.n, p.feature_dim))
    g = Graph(p.n, _sbm_edges(rng, y, p.intra_p, p.inter_q))
    tr, va, te = per_class_split(y, p.train_per_class, p.valid_per_class, rng)
    meta = {"name": "csbm", "normalization": NORM_NONE, "num_classes": p.num_classes, "params": p.__dict__.copy()}
    return Dataset(g, X, y, inductive_split(g, tr, va, te), meta)


def random_graph(n, avg_degree, seed=0):
    """Uniform random graph with about ``n * avg_degree / 2`` distinct edges."""
    rng = make_rng(seed)
    m = int(round(n * avg_degree / 2))
    cap = n * (n - 1) // 2
    m = min(m, cap)
    have = np.zeros((0, 2), dtype=np.int64)
    while len(have) < m:
        pairs = rng.integers(0, n, size=(int(1.2 * (m - len(have))) + 16, 2))
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        pairs = np.sort(pairs, axis=1)
        have = np.unique(np.concatenate([have, pairs]), axis=0)
    if len(have) > m:
        have = have[np.sort(rng.choice(len(have), size=m, replace=False))]
    return Graph(n, have)


# stratified label-fraction splits


def _largest_remainder(total, sizes):
    sizes = np.asarray(sizes, dtype=np.float64)
    quota = total * sizes / sizes.sum()
    base = np.floor(quota).astype(np.int64)
    rest = total - base.sum()
    order = np.argsort(-(quota - base), kind="stable")
    base[order[:rest]] += 1
    return base


def labeled_fraction_split(ds, fraction, seed=0, valid_per_class=30, min_test_per_class=1):
    """Redraw the split with ``floor(fraction * n)`` class-stratified training nodes.

    Training counts per class follow the class sizes (largest remainder).
    From what is left, ``valid_per_class`` nodes per class go to validation
    (fewer if the class runs short) and the rest to test.

    Raises:
        StratificationError: a class would get no training node, or a class
            could not keep ``min_test_per_class`` test nodes.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    labels = np.asarray(ds.labels)
    classes = np.unique(labels[labels >= 0])
    members = [np.nonzero(labels == c)[0] for c in classes]
    total = int(math.floor(fraction * ds.n))
    counts = _largest_remainder(total, [len(m) for m in members])
    rng = make_rng(seed)
    train, valid, test = [], [], []
    for c, ids, k in zip(classes, members, counts):
        if k == 0:
            raise StratificationError(f"fraction {fraction} leaves class {int(c)} without training nodes")
        if len(ids) - k < min_test_per_class:
            raise StratificationError(f"class {int(c)} has {len(ids)} nodes, cannot keep {k} for training")
        ids = rng.permutation(ids)
        nv = min(valid_per_class, len(ids) - k - min_test_per_class)
        train.extend(ids[:k])
        valid.extend(ids[k : k + nv])
        test.extend(ids[k + nv :])
    meta = dict(ds.meta, split_fraction=fraction, split_seed=seed)
    return replace(ds.with_split(np.sort(train), np.sort(valid), np.sort(test)), meta=meta)


# file formats


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def read_features(path):
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or (row[0].startswith("#")):
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                raise SchemaError(path, f"line {lineno}: non-numeric feature value") from None
    if not rows:
        raise SchemaError(path, "no feature rows")
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise SchemaError(path, f"rows have differing lengths {sorted(width)}")
    X = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise SchemaError(path, "non-finite feature value")
    return X


def write_features(path, X):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(X, dtype=np.float64):
            w.writerow([repr(float(x)) for x in row])


def read_labels(path, n, num_classes=None):
    """Per-node class ids; nodes without a row get -1."""
    labels = np.full(n, -1, dtype=np.int64)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#") or row[0].strip() == "node_id":
                continue
            if len(row) != 2:
                raise SchemaError(path, f"line {lineno}: expected node_id,class")
            try:
                node = int(row[0])
            except ValueError:
                raise SchemaError(path, f"line {lineno}: bad node id {row[0]!r}") from None
            if not 0 <= node < n:
                raise SchemaError(path, f"line {lineno}: node {node} outside 0..{n - 1}")
            try:
                c = int(row[1])
            except ValueError:
                raise LabelError(f"{path}:{lineno}: unknown label {row[1]!r}") from None
            if c < 0 or (num_classes is not None and c >= num_classes):
                raise LabelError(f"{path}:{lineno}: unknown label id {c}")
            labels[node] = c
    return labels


def write_labels(path, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "class"])
        for i, c in enumerate(np.asarray(labels).tolist()):
            if c >= 0:
                w.writerow([i, c])


def read_split(path):
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(path, f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict) or "train" not in obj:
        raise SchemaError(path, 'expected {"train": [...], "valid": [...], "test": [...]}')
    return [np.asarray(obj.get(k, []), dtype=np.int64) for k in ("train", "valid", "test")]


def write_split(path, split):
    obj = {
        "train": split.train_ids.tolist(),
        "valid": split.valid_ids.tolist(),
        "test": split.test_ids.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(obj, fh)


def load_dataset(edges_path, features_path, labels_path, split_path, normalization=NORM_ROW_L1_COL_STD, num_classes=None, name=None):
    """Read and validate the four dataset files.

    ``normalization`` is applied after loading (``NORM_NONE`` to skip).

    Raises:
        SchemaError: a file does not parse or node counts disagree.
        LabelError: a class id is negative, non-integer or out of range.
        SplitOverlap: split id sets intersect.
    """
    X = read_features(features_path)
    n = X.shape[0]
    g = read_edge_list(edges_path)
    if g.n > n:
        raise SchemaError(edges_path, f"edges reference {g.n} nodes, features have {n} rows")
    if g.n < n:
        g = Graph(n, np.array(g.edges))
    labels = read_labels(labels_path, n, num_classes)
    tr, va, te = read_split(split_path)
    for ids in (tr, va, te):
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise SchemaError(split_path, f"split ids outside 0..{n - 1}")
    split = inductive_split(g, tr, va, te)
    used = np.concatenate([split.train_ids, split.valid_ids, split.test_ids])
    if np.any(labels[used] < 0):
        raise LabelError(f"{labels_path}: split node {int(used[labels[used] < 0][0])} has no label")
    if normalization == NORM_ROW_L1_COL_STD:
        X = normalize_features(X, split.train_ids)
    elif normalization != NORM_NONE:
        raise ValueError(f"unknown normalization {normalization!r}")
    classes = num_classes if num_classes is not None else int(labels.max()) + 1
    meta = {"name": name or os.path.basename(os.path.dirname(os.path.abspath(features_path))), "normalization": normalization, "num_classes": classes}
    return Dataset(g, X, labels, split, meta)


def load_manifest(path):
    """Load a dataset from its ``dataset.json`` (or the directory holding it).

    Checksums are verified, and the stored normalization tag says the
    features are already preprocessed, so they are not normalized again.
    """
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST)
    root = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        try:
            man = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(path, f"invalid JSON: {exc}") from None
    files = man.get("files", {})
    for key in ("edges", "features", "labels", "split"):
        if key not in files:
            raise SchemaError(path, f"manifest lacks files.{key}")
    paths = {k: os.path.join(root, files[k]) for k in files}
    for key, want in man.get("checksums", {}).items():
        if key in paths and _sha256(paths[key]) != want:
            raise SchemaError(paths[key], "checksum mismatch")
    stored = man.get("normalization", NORM_NONE)
    # raw inputs (no stored tag) get the default preprocessing
    apply = man.get("apply_normalization", NORM_ROW_L1_COL_STD if stored == NORM_NONE else NORM_NONE)
    ds = load_dataset(
        paths["edges"], paths["features"], paths["labels"], paths["split"],
        normalization=apply,
        num_classes=man.get("num_classes"),
        name=man.get("name"),
    )
    return replace(ds, meta=dict(ds.meta, normalization=apply if apply != NORM_NONE else stored))


def save_dataset(ds, directory, name=None):
    """Write the four files plus the manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    files = {"edges": "edges.txt", "features": "features.csv", "labels": "labels.csv", "split": "split.json"}
    p = {k: os.path.join(directory, v) for k, v in files.items()}
    write_edge_list(ds.graph, p["edges"])
    write_features(p["features"], ds.X)
    write_labels(p["labels"], ds.labels)
    write_split(p["split"], ds.split)
    man = {
        "name": name or ds.name,
        "num_nodes": ds.n,
        "num_edges": ds.graph.num_edges,
        "num_features": int(ds.X.shape[1]),
        "num_classes": ds.num_classes,
        "normalization": ds.meta.get("normalization", NORM_NONE),
        "apply_normalization": NORM_NONE,
        "files": files,
        "checksums": {k: _sha256(v) for k, v in p.items()},
    }
    out = os.path.join(directory, MANIFEST)
    with open(out, "w") as fh:
        json.dump(man, fh, indent=2)
    return out


def resolve_dataset(spec, data_dir=None):
    """Dataset from ``csbm:<fields>``, a manifest path, or a name under ``$PMLP_DATA_DIR``."""
    spec = str(spec)
    if spec == "csbm" or spec.startswith("csbm:"):
        return csbm_generate(CsbmParams.parse(spec[5:]))
    if os.path.exists(spec):
        return load_manifest(spec)
    root = data_dir or os.environ.get(DATA_DIR_ENV)
    if root:
        cand = os.path.join(root, spec)
        if os.path.exists(cand):
            return load_manifest(cand)
    raise FileNotFoundError(f"dataset {spec!r} not found (set {DATA_DIR_ENV} or pass a manifest path)")
