"""Command-line entry point: ``pmlp {train,sweep,ntk,extrapolate,bench}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (kernel
factorization), 4 overflow in an extrapolation probe.
"""

import argparse
import concurrent.futures
import csv
import json
import os
import subprocess
import sys
import time
import warnings

import numpy as np

from . import __version__
from .data import CsbmParams, labeled_fraction_split, perturb_dataset, random_graph, resolve_dataset
from .errors import FactorizationError, NumericalOverflow, PMLPError
from .graph import Scheme, inductive_split
from .models import MODEL_NAMES, evaluate, fit, make_model
from .nn import Activation, AdamState, NetConfig, TrainConfig, adam_step, forward, init_network, loss_and_grad
from .numerics import child_seed

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OVERFLOW = 0, 2, 3, 4
SWEEP_KINDS = ("layers", "hidden", "activation", "scheme", "split_fraction", "sparsify", "noise")
SWEEP_FIELDS = [
    "sweep", "value", "model", "seed", "status", "accuracy", "train_loss_final",
    "wallclock_train_ms", "wallclock_infer_ms", "error",
]


class ConfigError(Exception):
    pass


def source_revision():
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True, text=True, timeout=5
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"git:{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"version:{__version__}"


# shared flags


def _add_train_flags(p):
    p.add_argument("--dataset", default="csbm", help="manifest path, name under $PMLP_DATA_DIR, or csbm:<k=v,...>")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--activation", default="relu", choices=[a.value for a in Activation])
    p.add_argument("--scheme", default="sym", choices=[s.value for s in Scheme])
    p.add_argument("--alpha", type=float, default=None, help="residual weight (default 0, or 0.1 for _RES models)")
    p.add_argument("--num-mp", type=int, default=None, help="MP steps for PRE/POST models (default: --layers)")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--patience", type=int, default=50, help="early-stopping patience; 0 disables")


def _config(args, **override):
    cfg = {
        "dataset": args.dataset,
        "layers": args.layers,
        "hidden": args.hidden,
        "activation": args.activation,
        "scheme": args.scheme,
        "alpha": args.alpha,
        "num_mp": args.num_mp,
        "epochs": args.epochs,
        "lr": args.lr,
        "dropout": args.dropout,
        "weight_decay": args.weight_decay,
        "patience": args.patience,
        "split_fraction": None,
        "sparsify": None,
        "noise": None,
    }
    cfg.update(override)
    return cfg


def _validate(cfg):
    if cfg["layers"] < 1 or cfg["hidden"] < 1:
        raise ConfigError("--layers and --hidden must be positive")
    if cfg["epochs"] < 0:
        raise ConfigError("--epochs must be non-negative")
    if cfg["lr"] <= 0:
        raise ConfigError("--lr must be positive")
    if not 0 <= cfg["dropout"] < 1:
        raise ConfigError("--dropout must lie in [0, 1)")
    if cfg["weight_decay"] < 0:
        raise ConfigError("--weight-decay must be non-negative")
    if cfg["alpha"] is not None and not 0 <= cfg["alpha"] <= 1:
        raise ConfigError("--alpha must lie in [0, 1]")


def _load(cfg, seed):
    try:
        ds = resolve_dataset(cfg["dataset"])
    except (FileNotFoundError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.get("split_fraction") is not None:
        ds = labeled_fraction_split(ds, float(cfg["split_fraction"]), seed)
    if cfg.get("sparsify") is not None:
        ds = perturb_dataset(ds, "sparsify", float(cfg["sparsify"]), child_seed(seed, 1))
    if cfg.get("noise") is not None:
        ds = perturb_dataset(ds, "add_noise", float(cfg["noise"]), child_seed(seed, 2))
    return ds


def run_cell(model, cfg, seed, dataset=None):
    """Train and evaluate one model; returns the RunResult dict."""
    _validate(cfg)
    ds = dataset if dataset is not None else _load(cfg, seed)
    netcfg = NetConfig(
        ds.X.shape[1], ds.num_classes, cfg["hidden"], cfg["layers"], Activation.parse(cfg["activation"]), cfg["dropout"]
    )
    num_mp = cfg["num_mp"] if cfg["num_mp"] is not None else cfg["layers"]
    try:
        spec = make_model(model, netcfg, num_mp, cfg["scheme"], cfg["alpha"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    tc = TrainConfig(
        epochs=cfg["epochs"],
        learning_rate=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        seed=seed,
        early_stop_patience=cfg["patience"] or None,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        t0 = time.perf_counter()
        net, hist = fit(spec, tc, ds.X, ds.labels, ds.split)
        t1 = time.perf_counter()
        acc, _ = evaluate(spec, net, ds.X, ds.labels, ds.split)
        t2 = time.perf_counter()
    return {
        "schema": SCHEMA_VERSION,
        "model_name": spec.name,
        "seed": seed,
        "dataset": ds.name,
        "accuracy": acc,
        "train_loss_final": hist.train_loss[-1] if hist.train_loss else None,
        "best_epoch": hist.best_epoch,
        "epochs_run": len(hist.train_loss),
        "wallclock_train_ms": 1000 * (t1 - t0),
        "wallclock_infer_ms": 1000 * (t2 - t1),
        "config": dict(cfg, model=spec.name, seed=seed),
        "train_placement": _placement_dict(spec.train_placement),
        "infer_placement": _placement_dict(spec.infer_placement),
        "revision": source_revision(),
    }


def _placement_dict(p):
    return {"mode": p.mode.value, "num_mp": p.num_mp, "scheme": p.scheme.value, "residual_alpha": p.residual_alpha}


def _write_json(path, obj):
    if path in (None, "-"):
        json.dump(obj, sys.stdout, indent=2)
        sys.stdout.write("\n")
        return
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)


def cmd_train(args):
    model = args.model
    if model.upper() not in MODEL_NAMES:
        raise ConfigError(f"unknown model {model!r}; choose from {', '.join(MODEL_NAMES)}")
    result = run_cell(model, _config(args), args.seed)
    _write_json(args.out, result)
    return EXIT_OK


# sweeps


def _sweep_value(kind, raw):
    if kind in ("layers", "hidden"):
        return int(raw)
    if kind in ("split_fraction", "sparsify", "noise"):
        return float(raw)
    if kind == "activation":
        return Activation.parse(raw).value
    return Scheme.parse(raw).value


def _sweep_job(job):
    kind, value, model, seed, cfg = job
    row = {"sweep": kind, "value": value, "model": model, "seed": seed}
    try:
        res = run_cell(model, cfg, seed)
        row.update(
            status="OK",
            accuracy=res["accuracy"],
            train_loss_final=res["train_loss_final"],
            wallclock_train_ms=res["wallclock_train_ms"],
            wallclock_infer_ms=res["wallclock_infer_ms"],
            error="",
        )
    except Exception as exc:  # a failed cell is recorded and the sweep goes on
        row.update(status="FAILED", accuracy="", train_loss_final="", wallclock_train_ms="", wallclock_infer_ms="", error=f"{type(exc).__name__}: {exc}")
    return row


def sweep_jobs(kind, values, models, seeds, base_cfg):
    jobs = []
    for raw in values:
        value = _sweep_value(kind, raw)
        cfg = dict(base_cfg)
        cfg[kind] = value
        for model in models:
            for seed in seeds:
                jobs.append((kind, value, model, seed, cfg))
    return jobs


def run_sweep(jobs, parallel=1):
    if parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallel) as ex:
            rows = list(ex.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    # rows come back in job order already; the sort keeps the output stable by cell key
    order = {id(j): i for i, j in enumerate(jobs)}
    return [r for _, r in sorted(zip((order[id(j)] for j in jobs), rows))]


def write_sweep_csv(path, rows):
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in SWEEP_FIELDS})
    finally:
        if fh is not sys.stdout:
            fh.close()


def read_sweep_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_sweep(args):
    models = [m.strip().upper() for m in args.models.split(",") if m.strip()]
    bad = [m for m in models if m not in MODEL_NAMES]
    if bad:
        raise ConfigError(f"unknown model(s) {', '.join(bad)}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    try:
        [_sweep_value(args.sweep, v) for v in values]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    base = _config(args)
    _validate(base)
    seeds = list(range(args.seed, args.seed + args.seeds))
    rows = run_sweep(sweep_jobs(args.sweep, values, models, seeds, base), args.parallel)
    write_sweep_csv(args.out, rows)
    return EXIT_OK


# kernels


def _parse_ridge(text):
    if str(text).lower() == "auto":
        return "auto"
    try:
        r = float(text)
    except ValueError:
        raise ConfigError(f"--ridge must be a number or 'auto', got {text!r}") from None
    if r < 0:
        raise ConfigError("--ridge must be non-negative")
    return r


def ntk_predictions(ds, mode, ridge, layers=2, bias=False):
    """Infinite-width predictions on the test nodes for one kernel mode.

    Targets are one-hot class indicators.  ``mlp`` and ``pmlp-cross`` share
    the coefficients fit with the MLP NTK on the training nodes; ``gntk``
    refits with the GNTK of the training subgraph.  Returns
    ``(train_kernel, predictions, coefficients)``.
    """
    from .gntk import GNN_PLACEMENT, KernelKind, KernelMatrix, cross_kernel, kernel_fit, kernel_predict

    s = ds.split
    tr, te = s.train_ids, s.test_ids
    Y = np.eye(ds.num_classes)[ds.labels[tr]]
    X = ds.X
    if mode in ("mlp", "pmlp-cross"):
        K = cross_kernel(X[tr], X[tr], num_ff_layers=layers, bias=bias)
        kind = KernelKind.MLP_NTK
    else:
        # the training subgraph only links training nodes, so its restriction is exact
        from .nn import _local_graph

        g_tr = _local_graph(s.train_graph, tr)
        K = cross_kernel(X[tr], X[tr], g_tr, g_tr, GNN_PLACEMENT, GNN_PLACEMENT, layers, bias)
        kind = KernelKind.GNTK
    km = KernelMatrix(0.5 * (K + K.T), kind, tr, experimental=layers != 2)
    reg = kernel_fit(km, Y, ridge)
    if mode == "mlp":
        C = cross_kernel(X[tr], X[te], num_ff_layers=layers, bias=bias)
    elif mode == "pmlp-cross":
        C = cross_kernel(X[tr], X, None, s.full_graph, None, GNN_PLACEMENT, layers, bias)[:, te]
    else:
        C = cross_kernel(X[tr], X, g_tr, s.full_graph, GNN_PLACEMENT, GNN_PLACEMENT, layers, bias)[:, te]
    return km, np.atleast_2d(kernel_predict(reg, C)).reshape(len(te), -1), reg


def cmd_ntk(args):
    from .gntk import save_kernel

    ridge = _parse_ridge(args.ridge)
    try:
        ds = resolve_dataset(args.dataset)
    except (FileNotFoundError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if not len(ds.split.test_ids):
        raise ConfigError(f"dataset {ds.name!r} has no test nodes")
    km, pred, reg = ntk_predictions(ds, args.mode, ridge, args.layers, args.bias)
    os.makedirs(args.out, exist_ok=True)
    save_kernel(os.path.join(args.out, "kernel.txt"), km, reg.ridge)
    te = ds.split.test_ids
    Y = np.eye(ds.num_classes)[ds.labels[te]]
    with open(os.path.join(args.out, "predictions.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id"] + [f"out{k}" for k in range(pred.shape[1])])
        for i, row in zip(te.tolist(), pred):
            w.writerow([i] + [repr(float(x)) for x in row])
    summary = {
        "schema": SCHEMA_VERSION,
        "mode": args.mode,
        "dataset": ds.name,
        "ridge": reg.ridge,
        "layers": args.layers,
        "test_mse": float(np.mean(np.sum((pred - Y) ** 2, axis=1))),
        "test_accuracy": float(np.mean(pred.argmax(axis=1) == ds.labels[te])),
        "revision": source_revision(),
    }
    _write_json(os.path.join(args.out, "summary.json"), summary)
    return EXIT_OK


# extrapolation


def run_extrapolation(wirings, width, t_grid, seeds, predictor="network", n_train=64, dim=4, epochs=500, lr=1e-2, cosine=None):
    from .extrapolation import (
        ExtrapolationProbe, KernelPredictor, NetworkPredictor, Wiring, deviation_series,
        fitted_bound_constant, make_regression_task, probe_slopes, train_wide_regressor,
    )

    series = []
    anchor = (cosine,) if cosine is not None else ()
    for seed in seeds:
        task = make_regression_task(n_train, dim, seed, anchor_cosines=anchor)
        if predictor == "kernel":
            pred = KernelPredictor(task.X, task.y)
        else:
            net, _ = train_wide_regressor(task.X, task.y, width, seed, epochs, lr)
            pred = NetworkPredictor(net, task.X)
        for text in wirings:
            w = Wiring.parse(text)
            if cosine is not None and w.num_neighbors:
                w = task.neighbors_for(w, cosine)
            probe = ExtrapolationProbe(task.v, t_grid, 1.0, w, f"{w.label}/seed{seed}")
            series.append(probe_slopes(pred, probe))
    summary = {}
    for text in wirings:
        label = Wiring.parse(text).label
        group = [s for s in series if s.wiring == label]
        devs = np.array([deviation_series(s) for s in group])
        summary[label] = {
            "coeff_factor": group[0].coeff_factor,
            "mean_slope_ratio": float(np.mean([s.slope_ratio for s in group])),
            "median_deviations": np.median(devs, axis=0).tolist(),
            "fitted_bound_constant": float(max(fitted_bound_constant(s) for s in group)),
        }
    return series, summary


def cmd_extrapolate(args):
    try:
        t_grid = tuple(float(x) for x in args.t_grid.split(","))
    except ValueError:
        raise ConfigError(f"bad --t-grid {args.t_grid!r}") from None
    wirings = [w.strip() for w in args.wiring.split(",") if w.strip()]
    try:
        from .extrapolation import Wiring

        [Wiring.parse(w) for w in wirings]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seeds = list(range(args.seed, args.seed + args.seeds))
    series, summary = run_extrapolation(
        wirings, args.width, t_grid, seeds, args.predictor, args.n_train, args.dim, args.epochs, args.lr, args.neighbor_cosine
    )
    out = {
        "schema": SCHEMA_VERSION,
        "config": {
            "wirings": wirings, "width": args.width, "t_grid": list(t_grid), "seeds": seeds,
            "predictor": args.predictor, "n_train": args.n_train, "dim": args.dim,
            "epochs": args.epochs, "lr": args.lr, "delta_t": 1.0, "neighbor_cosine": args.neighbor_cosine,
        },
        "probes": [s.to_dict() for s in series],
        "summary": summary,
        "revision": source_revision(),
    }
    _write_json(args.out, out)
    return EXIT_OK


# timing


def bench_step_times(model, n, d, steps, hidden=64, layers=2, avg_degree=14.0, seed=0, classes=8):
    """Per-step wallclock (ms) of full-batch training steps, after 3 warm-ups."""
    rng = np.random.default_rng(seed)
    g = random_graph(n, avg_degree, seed)
    X = rng.standard_normal((n, d))
    y = rng.integers(0, classes, size=n)
    ids = np.arange(n)
    spec = make_model(model, NetConfig(d, classes, hidden, layers, dropout=0.5), layers)
    place = spec.train_placement
    net = init_network(spec.netcfg, rng)
    state = AdamState.create(net.params())
    times = []
    for step in range(steps + 3):
        t0 = time.perf_counter()
        logits, cache = forward(net, X, g if place.uses_graph else None, place, training=True, rng=rng)
        _, grads = loss_and_grad(net, logits, cache, y, ids, weight_decay=5e-4)
        state = adam_step(state, [a for a, _ in grads] + [b for _, b in grads], 0.01)
        net = net.with_params(state.params)
        if step >= 3:
            times.append(1000 * (time.perf_counter() - t0))
    return times


def cmd_bench(args):
    models = [m.strip().upper() for m in args.models.split(",") if m.strip()]
    bad = [m for m in models if m not in MODEL_NAMES]
    if bad:
        raise ConfigError(f"unknown model(s) {', '.join(bad)}")
    if args.steps < 1 or args.n < 2 or args.d < 1:
        raise ConfigError("--steps, --n and --d must be positive (n >= 2)")
    per = {}
    for m in models:
        t = bench_step_times(m, args.n, args.d, args.steps, args.hidden, args.layers, args.avg_degree, args.seed)
        per[m] = {"median_step_ms": float(np.median(t)), "steps_ms": t}
    ref = per.get("MLP", {}).get("median_step_ms")
    report = {
        "schema": SCHEMA_VERSION,
        "n": args.n,
        "d": args.d,
        "layers": args.layers,
        "hidden": args.hidden,
        "steps": args.steps,
        "warmup_steps": 3,
        "models": per,
        "ratio_to_mlp": {m: (v["median_step_ms"] / ref if ref else None) for m, v in per.items()},
        "revision": source_revision(),
    }
    _write_json(args.out, report)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="pmlp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"pmlp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model and write a RunResult JSON")
    _add_train_flags(t)
    t.add_argument("--model", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="-")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="cross product of models, values and seeds to long-format CSV")
    _add_train_flags(s)
    s.add_argument("--sweep", required=True, choices=SWEEP_KINDS)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--models", default="MLP,PMLP_GCN,GCN")
    s.add_argument("--seeds", type=int, default=5, help="number of seeds")
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_sweep)

    k = sub.add_parser("ntk", help="infinite-width kernel regression")
    k.add_argument("--dataset", default="csbm")
    k.add_argument("--mode", required=True, choices=("mlp", "gntk", "pmlp-cross"))
    k.add_argument("--ridge", default="auto")
    k.add_argument("--layers", type=int, default=2)
    k.add_argument("--bias", action="store_true", help="append a constant-one feature")
    k.add_argument("--out", required=True, help="output directory")
    k.set_defaults(func=cmd_ntk)

    e = sub.add_parser("extrapolate", help="directional slope probes")
    e.add_argument("--wiring", default="isolated,star:2,complete:4", help="comma list of isolated|star:k|complete:k")
    e.add_argument("--width", type=int, default=4096)
    e.add_argument("--t-grid", default="1,2,5,10,20,50,100")
    e.add_argument("--seeds", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--predictor", choices=("network", "kernel"), default="network")
    e.add_argument("--n-train", type=int, default=64)
    e.add_argument("--dim", type=int, default=4)
    e.add_argument("--epochs", type=int, default=500)
    e.add_argument("--lr", type=float, default=1e-2)
    e.add_argument("--neighbor-cosine", type=float, default=None, help="wire to anchors at this cosine to v")
    e.add_argument("--out", default="-")
    e.set_defaults(func=cmd_extrapolate)

    b = sub.add_parser("bench", help="per-step training time")
    b.add_argument("--n", type=int, default=20000)
    b.add_argument("--d", type=int, default=128)
    b.add_argument("--models", default="MLP,GCN")
    b.add_argument("--steps", type=int, default=10)
    b.add_argument("--hidden", type=int, default=64)
    b.add_argument("--layers", type=int, default=2)
    b.add_argument("--avg-degree", type=float, default=14.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="-")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"pmlp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FactorizationError as exc:
        print(f"pmlp: {exc}; retry with a larger --ridge (e.g. --ridge auto or 1e-6)", file=sys.stderr)
        return EXIT_NUMERICAL
    except NumericalOverflow as exc:
        print(f"pmlp: overflow: {exc}", file=sys.stderr)
        return EXIT_OVERFLOW
    except ZeroDivisionError as exc:
        print(f"pmlp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (PMLPError, ValueError) as exc:
        print(f"pmlp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
