"""Feed-forward networks with optional message passing, trained with Adam.

The same :class:`Network` weights run in MLP mode (no message passing) or with
MP steps inserted before every layer, before the first layer or after the last
layer.  Gradients are computed by hand-written reverse mode through the affine
layers, activations, dropout and the (linear) MP operators.
"""

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, EmptyMask, MissingGraph
from .graph import DEFAULT_DIFFUSION_ORDER, Graph, Scheme, propagate, transition_matrix
from .numerics import make_rng, read_dense_block, save_dense, xavier_init


class Activation(enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    COS = "cos"
    ELU = "elu"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown activation: {value!r}") from None


def _act(kind, z):
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    if kind is Activation.COS:
        return np.cos(z)
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _act_grad(kind, z):
    if kind is Activation.RELU:
        return (z > 0).astype(np.float64)
    if kind is Activation.TANH:
        return 1.0 - np.tanh(z) ** 2
    if kind is Activation.COS:
        return -np.sin(z)
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


class Placement(enum.Enum):
    NONE = "none"
    PER_LAYER = "per_layer"
    PRE = "pre"
    POST = "post"


@dataclass(frozen=True)
class MpPlacement:
    """Where message passing runs relative to the feed-forward layers.

    PER_LAYER applies one MP step before every layer (``num_mp`` is ignored),
    PRE applies ``num_mp`` steps to the input features and POST applies
    ``num_mp`` steps to the output logits.  With ``residual_alpha > 0`` each
    step becomes ``(1 - alpha) * P h + alpha * h0`` where ``h0`` is the input
    features (PRE), the layer input (PER_LAYER) or the pre-propagation logits
    (POST).
    """

    mode: Placement = Placement.NONE
    num_mp: int = 2
    scheme: Scheme = Scheme.SYM
    residual_alpha: float = 0.0
    diffusion_order: int = DEFAULT_DIFFUSION_ORDER

    def __post_init__(self):
        object.__setattr__(self, "mode", Placement(self.mode))
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        if not 0.0 <= self.residual_alpha <= 1.0:
            raise ValueError("residual_alpha must lie in [0, 1]")
        if self.mode in (Placement.PRE, Placement.POST) and self.num_mp < 1:
            raise ValueError("PRE/POST placements need num_mp >= 1")

    @property
    def uses_graph(self):
        return self.mode is not Placement.NONE

    def operator(self, g):
        return transition_matrix(g, self.scheme, self.diffusion_order)


NO_MP = MpPlacement()


@dataclass
class Network:
    """Stack of affine layers ``h @ W + b``; the last layer is linear."""

    weights: list
    biases: list
    activation: Activation = Activation.RELU
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.activation = Activation.parse(self.activation)
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need matching, non-empty weight and bias lists")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[1],):
                raise DimensionError(f"layer {i}: bias shape {b.shape} vs W {W.shape}")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise DimensionError(f"layer {i} input {W.shape[0]} != previous output")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def layers(self):
        return list(zip(self.weights, self.biases))

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def params(self):
        return [*self.weights, *self.biases]

    def copy(self):
        return Network(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.dropout_rate,
        )

    def with_params(self, params):
        k = len(self.weights)
        return Network(list(params[:k]), list(params[k:]), self.activation, self.dropout_rate)


@dataclass(frozen=True)
class NetConfig:
    in_dim: int
    out_dim: int
    hidden: int = 64
    num_layers: int = 2
    activation: Activation = Activation.RELU
    dropout: float = 0.5

    @property
    def dims(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        return [self.in_dim] + [self.hidden] * (self.num_layers - 1) + [self.out_dim]


def init_network(netcfg, rng):
    """Xavier-uniform weights, zero biases."""
    rng = make_rng(rng)
    dims = netcfg.dims
    weights = [xavier_init(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    return Network(weights, biases, Activation.parse(netcfg.activation), netcfg.dropout)


def _mp_steps(op, h, steps, alpha):
    h0 = h
    for _ in range(steps):
        h = propagate(op, h, alpha, h0)
    return h


def forward(net, X, g=None, placement=NO_MP, training=False, rng=None):
    """Run the network on all rows of ``X``.

    Returns ``(logits, cache)``; ``cache`` holds what :func:`loss_and_grad`
    needs for the backward pass.  Dropout (inverted scaling) is only active
    when ``training`` is true and then requires ``rng``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.weights[0].shape[0]:
        raise DimensionError(f"X shape {X.shape} does not match input dim {net.weights[0].shape[0]}")
    op = None
    if placement.uses_graph:
        if g is None:
            raise MissingGraph(f"placement {placement.mode.name} needs a graph")
        if g.n != X.shape[0]:
            raise DimensionError(f"graph has {g.n} nodes but X has {X.shape[0]} rows")
        op = placement.operator(g)
    p = net.dropout_rate if training else 0.0
    if p > 0 and rng is None:
        raise ValueError("training with dropout needs an rng")
    alpha = placement.residual_alpha
    mode = placement.mode

    h = X
    if mode is Placement.PRE:
        h = _mp_steps(op, h, placement.num_mp, alpha)
    inputs, pre, masks = [], [], []
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(net.layers):
        if mode is Placement.PER_LAYER:
            h = propagate(op, h, alpha, h)
        if p > 0:
            mask = (rng.random(h.shape) >= p) / (1.0 - p)
            h = h * mask
        else:
            mask = None
        inputs.append(h)
        masks.append(mask)
        z = h @ W + b
        pre.append(z)
        h = z if i == last else _act(net.activation, z)
    if mode is Placement.POST:
        h = _mp_steps(op, h, placement.num_mp, alpha)
    cache = {"inputs": inputs, "pre": pre, "masks": masks, "op": op, "placement": placement}
    return h, cache


def _mp_backward(op, grad, steps, alpha):
    # h_k = (1 - a) P h_{k-1} + a h_0  =>  dh_0 = sum_k a dh_k + (1 - a)^k P^T ... chain
    acc = np.zeros_like(grad) if alpha > 0 else None
    for _ in range(steps):
        if alpha > 0:
            acc += alpha * grad
            grad = (1.0 - alpha) * (op.matrix.T @ grad) if alpha < 1 else np.zeros_like(grad)
        else:
            grad = op.matrix.T @ grad
    return grad + acc if acc is not None else np.asarray(grad)


class Loss(enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    SQUARED = "squared"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"ce": "cross_entropy", "mse": "squared", "square": "squared"}
        return cls(aliases.get(key, key))


def _targets(labels, logits, ids):
    lab = np.asarray(labels)
    if np.issubdtype(lab.dtype, np.integer):
        onehot = np.zeros((len(ids), logits.shape[1]))
        onehot[np.arange(len(ids)), lab[ids]] = 1.0
        return onehot
    lab = lab.astype(np.float64)
    if lab.ndim == 1:
        lab = lab[:, None]
    return lab[ids]


def loss_and_grad(net, logits, cache, labels, mask, loss_kind=Loss.CROSS_ENTROPY, weight_decay=0.0):
    """Mean loss over ``mask`` plus ``weight_decay / 2 * ||theta||^2``.

    Integer ``labels`` are class ids; float ``labels`` are regression
    targets for the squared loss.  Returns ``(loss, grads)`` with
    ``grads[i] = (dW_i, db_i)``.
    """
    ids = np.asarray(mask, dtype=np.int64).ravel()
    if ids.size == 0:
        raise EmptyMask("loss mask is empty")
    loss_kind = Loss.parse(loss_kind)
    m = ids.size
    out = logits[ids]
    g_logits = np.zeros_like(logits)
    if loss_kind is Loss.CROSS_ENTROPY:
        lab = np.asarray(labels)[ids].astype(np.int64)
        shifted = out - out.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(logz - shifted[np.arange(m), lab]))
        probs = np.exp(shifted - logz[:, None])
        probs[np.arange(m), lab] -= 1.0
        np.add.at(g_logits, ids, probs / m)
    else:
        resid = out - _targets(labels, logits, ids)
        loss = float(0.5 * np.sum(resid * resid) / m)
        np.add.at(g_logits, ids, resid / m)
    if weight_decay:
        loss += 0.5 * weight_decay * sum(float(np.sum(p * p)) for p in net.params())
    return loss, _backward(net, cache, g_logits, weight_decay)


def _backward(net, cache, grad, weight_decay):
    placement, op = cache["placement"], cache["op"]
    alpha = placement.residual_alpha
    if placement.mode is Placement.POST:
        grad = _mp_backward(op, grad, placement.num_mp, alpha)
    grads = [None] * len(net.weights)
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        W, b = net.weights[i], net.biases[i]
        z = cache["pre"][i]
        dz = grad if i == last else grad * _act_grad(net.activation, z)
        dW = cache["inputs"][i].T @ dz
        db = dz.sum(axis=0)
        if weight_decay:
            dW = dW + weight_decay * W
            db = db + weight_decay * b
        grads[i] = (dW, db)
        if i == 0:
            break
        grad = dz @ W.T
        if cache["masks"][i] is not None:
            grad = grad * cache["masks"][i]
        if placement.mode is Placement.PER_LAYER:
            grad = _mp_backward(op, grad, 1, alpha)
    return grads


@dataclass
class AdamState:
    params: list
    m: list
    v: list
    step: int = 0

    @classmethod
    def create(cls, params):
        return cls(list(params), [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state, grads, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update; returns a new :class:`AdamState`."""
    if len(grads) != len(state.params):
        raise DimensionError("gradient list does not match parameters")
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    params, ms, vs = [], [], []
    for p, m, v, g in zip(state.params, state.m, state.v, grads):
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        params.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        ms.append(m)
        vs.append(v)
    return AdamState(params, ms, vs, t)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    ``dropout_rate=None`` keeps the network config's dropout.
    ``early_stop_patience=None`` disables early stopping and returns the
    final-epoch weights.
    """

    epochs: int = 200
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    dropout_rate: float = None
    loss: Loss = Loss.CROSS_ENTROPY
    seed: int = 0
    early_stop_patience: int = 50

    def __post_init__(self):
        object.__setattr__(self, "loss", Loss.parse(self.loss))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def predict(logits):
    """Arg-max class per row; ties go to the smallest index."""
    return np.argmax(logits, axis=1)


def accuracy(logits, labels, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return float("nan")
    return float(np.mean(predict(logits[ids]) == np.asarray(labels)[ids]))


def _local_graph(g, ids):
    # relabel the subgraph induced by ids; degrees and weights are unchanged
    # because train_graph only contains edges among ids
    pos = np.full(g.n, -1, dtype=np.int64)
    pos[ids] = np.arange(len(ids))
    e = g.edges
    keep = (pos[e[:, 0]] >= 0) & (pos[e[:, 1]] >= 0) if len(e) else np.zeros(0, dtype=bool)
    local = pos[e[keep]] if len(e) else e
    return Graph(len(ids), np.sort(local, axis=1) if len(local) else np.zeros((0, 2), dtype=np.int64))


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    valid_acc: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1


def train(netcfg, traincfg, data, placement_train=NO_MP, placement_valid=NO_MP):
    """Train a network on the training nodes of an inductive split.

    ``data`` is ``(X, labels, split)``.  The training pass only sees
    ``split.train_graph`` (and only when ``placement_train`` uses a graph);
    validation runs ``placement_valid`` on ``split.full_graph``.  Returns
    ``(network, history)``.
    """
    X, labels, split = data
    X = np.asarray(X, dtype=np.float64)
    if traincfg.dropout_rate is not None:
        netcfg = replace(netcfg, dropout=traincfg.dropout_rate)
    rng = make_rng(traincfg.seed)
    net = init_network(netcfg, rng)
    history = History()
    if traincfg.epochs <= 0:
        return net, history

    tr = split.train_ids
    if tr.size == 0:
        raise EmptyMask("split has no training nodes")
    X_tr = X[tr]
    local_ids = np.arange(tr.size)
    labels_arr = np.asarray(labels)
    lab_tr = labels_arr[tr]
    g_tr = _local_graph(split.train_graph, tr) if placement_train.uses_graph else None

    va = split.valid_ids
    if va.size and not placement_valid.uses_graph:
        X_va = X[va]
        va_rows, g_va = np.arange(va.size), None
        lab_va = labels_arr[va]
    else:
        X_va, va_rows, g_va, lab_va = X, va, split.full_graph, labels_arr

    state = AdamState.create(net.params())
    best_acc, best_params, since_best = -math.inf, None, 0
    patience = traincfg.early_stop_patience
    for epoch in range(traincfg.epochs):
        logits, cache = forward(net, X_tr, g_tr, placement_train, training=True, rng=rng)
        loss, grads = loss_and_grad(
            net, logits, cache, lab_tr, local_ids, traincfg.loss, traincfg.weight_decay
        )
        flat = [dW for dW, _ in grads] + [db for _, db in grads]
        state = adam_step(state, flat, traincfg.learning_rate)
        net = net.with_params(state.params)
        history.train_loss.append(loss)
        if va.size:
            out, _ = forward(net, X_va, g_va, placement_valid, training=False)
            if traincfg.loss is Loss.CROSS_ENTROPY or np.issubdtype(labels_arr.dtype, np.integer):
                acc = accuracy(out, lab_va, va_rows)
            else:
                acc = -float(np.mean((out[va_rows, 0] - lab_va[va_rows]) ** 2))
            history.valid_acc.append(acc)
            if acc > best_acc:
                best_acc, best_params, since_best = acc, state.params, 0
                history.best_epoch = epoch
            else:
                since_best += 1
            if patience is not None and since_best >= patience:
                history.stopped_epoch = epoch
                break
    if patience is not None and best_params is not None:
        net = net.with_params(best_params)
    return net, history


CHECKPOINT_MAGIC = "pmlp-checkpoint 1"


def save_checkpoint(path, net):
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        fh.write(f"activation {net.activation.value}\n")
        fh.write(f"dropout {net.dropout_rate!r}\n")
        fh.write("dims " + " ".join(str(d) for d in net.dims) + "\n")
        for W, b in net.layers:
            save_dense(fh, W)
            save_dense(fh, b[None, :])


def load_checkpoint(path):
    with open(path) as fh:
        if fh.readline().strip() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        activation = fh.readline().split()[1]
        dropout = float(fh.readline().split()[1])
        dims = [int(x) for x in fh.readline().split()[1:]]
        tokens = iter(fh.read().split())
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        W = read_dense_block(tokens)
        bias = read_dense_block(tokens)
        if W.shape != (a, b) or bias.shape != (1, b):
            raise ValueError(f"{path}: block shapes do not match header dims")
        weights.append(W)
        biases.append(bias[0])
    return Network(weights, biases, activation, dropout)
