"""Train as an MLP, infer with message passing.

PMLP models share the MLP's training run bit for bit; only inference
changes.  On a homophilous synthetic graph that alone closes most of the
gap to a GCN trained with message passing.
"""

# %%
import numpy as np

from pmlp.data import CsbmParams, csbm_generate
from pmlp.models import evaluate, fit, make_model
from pmlp.nn import NetConfig, TrainConfig

ds = csbm_generate(CsbmParams(n=1500, num_classes=3, intra_p=0.02, inter_q=0.002, feature_dim=16, feature_signal=1.0, seed=0))
cfg = NetConfig(ds.X.shape[1], ds.num_classes, hidden=64)
tc = TrainConfig(epochs=200, seed=0)
print(ds.name, "nodes:", ds.n, "edges:", ds.graph.num_edges, "train nodes:", len(ds.split.train_ids))

# %% One training run serves MLP and every PMLP variant.
mlp = make_model("MLP", cfg)
net, hist = fit(mlp, tc, ds.X, ds.labels, ds.split)
_, hist_pmlp = fit(make_model("PMLP_GCN", cfg), tc, ds.X, ds.labels, ds.split)
print("identical loss curves:", hist.train_loss == hist_pmlp.train_loss)

for name in ("MLP", "PMLP_GCN", "PMLP_SGC", "PMLP_APP"):
    acc, _ = evaluate(make_model(name, cfg), net, ds.X, ds.labels, ds.split)
    print(f"{name:10s} {100 * acc:5.1f}%")

# %% A GCN trains with message passing in the loop.
gcn = make_model("GCN", cfg)
gnet, _ = fit(gcn, tc, ds.X, ds.labels, ds.split)
print(f"{'GCN':10s} {100 * evaluate(gcn, gnet, ds.X, ds.labels, ds.split)[0]:5.1f}%")
