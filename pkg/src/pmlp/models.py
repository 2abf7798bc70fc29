"""Named model family as (train placement, inference placement) pairs.

Every model shares the plain :class:`~pmlp.nn.Network`; the name only decides
where message passing runs while training and while predicting.
"""

from dataclasses import dataclass

import numpy as np

from .errors import MissingLabels, UnknownModel
from .graph import Scheme
from .nn import NO_MP, MpPlacement, NetConfig, Placement, forward, predict, train

DEFAULT_RES_ALPHA = 0.1

# name -> (placement mode, train uses MP, train alpha is residual, infer alpha is residual)
_FAMILY = {
    "MLP": (Placement.NONE, False, False, False),
    "PMLP_GCN": (Placement.PER_LAYER, False, False, False),
    "PMLP_SGC": (Placement.PRE, False, False, False),
    "PMLP_APP": (Placement.POST, False, False, False),
    "GCN": (Placement.PER_LAYER, True, False, False),
    "SGC": (Placement.PRE, True, False, False),
    "APPNP": (Placement.POST, True, False, False),
    "SGC_RES": (Placement.PRE, True, True, True),
    "SGC_RESINF": (Placement.PRE, True, False, True),
    "APPNP_RES": (Placement.POST, True, True, True),
    "PMLP_SGC_RES": (Placement.PRE, False, False, True),
    "PMLP_APP_RES": (Placement.POST, False, False, True),
}

MODEL_NAMES = tuple(_FAMILY)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    train_placement: MpPlacement
    infer_placement: MpPlacement
    netcfg: NetConfig

    @property
    def is_pmlp(self):
        return not self.train_placement.uses_graph and self.infer_placement.uses_graph

    @property
    def is_gnn(self):
        return self.train_placement.uses_graph

    @property
    def valid_placement(self):
        """Placement used for model selection: PMLPs validate as MLPs."""
        return NO_MP if self.is_pmlp else self.train_placement


def make_model(name, netcfg, num_mp=2, scheme=Scheme.SYM, alpha=None, diffusion_order=None):
    """Build the :class:`ModelSpec` for a named model.

    ``alpha`` is the residual weight.  It defaults to 0 for the plain models
    (APPNP therefore runs without its teleport term) and to 0.1 for the
    ``_RES``/``_RESINF`` variants.  For the plain models an explicit alpha is
    applied to every MP step.
    """
    key = str(name).strip().upper()
    if key not in _FAMILY:
        raise UnknownModel(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    mode, train_mp, train_res, infer_res = _FAMILY[key]
    residual = infer_res or train_res
    if alpha is None:
        alpha = DEFAULT_RES_ALPHA if residual else 0.0
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if mode is not Placement.NONE and int(num_mp) < 1:
        raise ValueError("num_mp must be >= 1 for message-passing models")
    if mode is Placement.NONE:
        return ModelSpec(key, NO_MP, NO_MP, netcfg)
    extra = {} if diffusion_order is None else {"diffusion_order": int(diffusion_order)}

    def placement(a):
        return MpPlacement(mode, int(num_mp), Scheme.parse(scheme), a, **extra)

    infer_alpha = alpha
    if residual:
        train_alpha = alpha if train_res else 0.0
    else:
        train_alpha = alpha
    infer = placement(infer_alpha)
    trainp = placement(train_alpha) if train_mp else NO_MP
    return ModelSpec(key, trainp, infer, netcfg)


def fit(spec, traincfg, X, labels, split):
    """Train the network for ``spec``; returns ``(network, history)``."""
    return train(
        spec.netcfg, traincfg, (X, labels, split), spec.train_placement, spec.valid_placement
    )


def infer(spec, net, X, graph):
    """Logits for every node with the inference placement on ``graph``."""
    logits, _ = forward(net, X, graph, spec.infer_placement, training=False)
    return logits


def evaluate(spec, net, X, labels, split):
    """Test accuracy with inference on the full graph.

    Returns ``(accuracy, predictions)`` where ``predictions`` covers all
    nodes; ties in the logits go to the smallest class index.
    """
    test = split.test_ids
    lab = None if labels is None else np.asarray(labels)
    if lab is None or (test.size and (test.max() >= lab.shape[0] or np.any(lab[test] < 0))):
        raise MissingLabels("labels are not defined for every test node")
    preds = predict(infer(spec, net, X, split.full_graph))
    acc = float(np.mean(preds[test] == lab[test])) if test.size else float("nan")
    return acc, preds
