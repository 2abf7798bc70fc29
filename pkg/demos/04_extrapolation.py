"""Slopes far from the data.

A ReLU network is linear along a ray ``t v`` once ``t`` is large.  With
aggregation at inference, the slope at a test node shrinks by a factor set
only by the degrees around it: 1 alone, 4/9 with two leaf neighbours,
1/4 inside a 4-clique.
"""

# %%
import numpy as np

from pmlp.extrapolation import (
    ExtrapolationProbe,
    KernelPredictor,
    NetworkPredictor,
    Wiring,
    deviation_series,
    make_regression_task,
    probe_slopes,
    train_wide_regressor,
)

task = make_regression_task(64, 4, seed=0)
net, _ = train_wide_regressor(task.X, task.y, width=2048, seed=0, epochs=300)
predictors = {"network": NetworkPredictor(net, task.X), "kernel": KernelPredictor(task.X, task.y)}

# %%
for label, pred in predictors.items():
    print(f"\n{label} predictor")
    for text in ("isolated", "star:2", "complete:4"):
        s = probe_slopes(pred, ExtrapolationProbe(task.v, (1, 10, 100), wiring=text))
        dev = deviation_series(s)
        print(f"  {text:10s} ratio {s.slope_ratio:.4f} (factor {s.coeff_factor:.4f}); deviation t=1,10,100: {np.round(dev, 4)}")
