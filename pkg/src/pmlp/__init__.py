"""MLPs trained without a graph and given message passing at inference.

Also provides node-level neural tangent kernels, min-norm kernel regression
and extrapolation probes for predictions far from the training data.
"""

from .graph import Graph, InductiveSplit, Scheme, build_graph, inductive_split, propagate, transition_matrix
from .models import MODEL_NAMES, ModelSpec, evaluate, fit, make_model
from .nn import Activation, MpPlacement, NetConfig, Network, Placement, TrainConfig, forward, train

__version__ = "0.1.0"
