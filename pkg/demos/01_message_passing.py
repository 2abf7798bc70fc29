"""Graphs, transition matrices and one round of neighbour averaging.

Run with ``python3 demos/01_message_passing.py``.
"""

# %%
import numpy as np

from pmlp.graph import Scheme, build_graph, inductive_split, propagate, transition_matrix

# A path 0-1-2 plus a pendant node 3 on node 1.
g = build_graph(4, [(0, 1), (1, 2), (1, 3)])
print(g, "degrees with self-loop:", g.degrees_tilde)

# %% Each scheme normalizes the adjacency differently.
for scheme in Scheme:
    P = transition_matrix(g, scheme).to_dense()
    print(f"\n{scheme.value}\n{np.round(P, 3)}")
    print("row sums:", np.round(P.sum(axis=1), 6))

# %% One step of averaging pulls node features toward their neighbours.
X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
P = transition_matrix(g, Scheme.RW)
print("\nP X =\n", propagate(P, X))
# with a residual weight, each step keeps a share of the input
print("0.9 P X + 0.1 X =\n", propagate(P, X, residual_alpha=0.1, H0=X))

# %% Training only sees edges among training nodes.
split = inductive_split(g, [0, 1], [3], [2])
print("\nfull edges:", sorted(split.full_graph.edge_set()))
print("train edges:", sorted(split.train_graph.edge_set()))
