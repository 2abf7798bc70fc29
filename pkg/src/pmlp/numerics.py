"""Seeded randomness, initialization, SPD solves and Monte-Carlo oracles.

All randomness flows through :func:`make_rng`, a NumPy ``Generator`` over the
PCG64 bit generator (PCG XSL RR 128/64, multiplier
``0x2360ED051FC65DA44385DF649FCCF645``, seeded through ``SeedSequence``).
Arrays are float64 throughout.
"""

from collections import namedtuple

import numpy as np
from scipy.linalg import lapack

from .errors import DimensionError, FactorizationError

AUTO = "auto"

MonteCarloMoments = namedtuple("MonteCarloMoments", ["m1", "m0", "se1", "se0"])


def make_rng(seed=0):
    """Return a PCG64-backed generator; an existing generator passes through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def child_seed(master_seed, *keys):
    """Derive a stable integer seed from a master seed and a key path."""
    ss = np.random.SeedSequence([int(master_seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def xavier_init(rng, fan_in, fan_out):
    """Glorot-uniform ``(fan_in, fan_out)`` matrix on ``[-a, a]``, ``a = sqrt(6 / (fan_in + fan_out))``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be positive")
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return make_rng(rng).uniform(-a, a, size=(int(fan_in), int(fan_out)))


def cholesky(K):
    """Lower Cholesky factor of ``K``.

    Raises:
        FactorizationError: carrying the 0-based index of the first
            non-positive pivot.
    """
    K = np.asarray(K, dtype=np.float64)
    c, info = lapack.dpotrf(K, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise FactorizationError(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return c


REFINE_STEPS = 5


def auto_ridge(K):
    K = np.asarray(K)
    return 1e-8 * float(np.trace(K)) / K.shape[0]


def solve_spd(K, y, ridge=0.0):
    """Solve ``(K + ridge * I) x = y`` for symmetric positive definite ``K``.

    ``ridge=AUTO`` uses ``1e-8 * trace(K) / n``.  ``y`` may be a vector or a
    matrix of right-hand sides.
    """
    K = np.asarray(K, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionError(f"K must be square, got shape {K.shape}")
    if y.shape[0] != K.shape[0]:
        raise DimensionError(f"y has {y.shape[0]} rows, K is {K.shape[0]}x{K.shape[0]}")
    if not np.allclose(K, K.T, rtol=0, atol=1e-8 * max(1.0, np.abs(K).max(initial=0.0))):
        raise ValueError("K is not symmetric")
    if isinstance(ridge, str):
        if ridge.lower() != AUTO:
            raise ValueError(f"unknown ridge setting {ridge!r}")
        ridge = auto_ridge(K)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    A = K + ridge * np.eye(K.shape[0]) if ridge else K
    L = cholesky(A)
    x, info = lapack.dpotrs(L, y, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs: illegal argument {-info}")
    # refinement with extended-precision residuals reaches the rounding floor
    # of y even when ridge makes the system ill-conditioned
    A_ext = A.astype(np.longdouble)
    y_ext = y.astype(np.longdouble)
    r = (y_ext - A_ext @ x).astype(np.float64)
    best = np.abs(r).max(initial=0.0)
    for _ in range(REFINE_STEPS):
        dx, _ = lapack.dpotrs(L, r, lower=1)
        x_new = x + dx
        r_new = (y_ext - A_ext @ x_new).astype(np.float64)
        err = np.abs(r_new).max(initial=0.0)
        if not err < best:
            break
        x, r, best = x_new, r_new, err
    return x


def mc_relu_moments(a, b, samples, rng, chunk=1 << 16):
    """Monte-Carlo estimates of ReLU moments under ``w ~ N(0, I)``.

    Estimates ``E[relu(w.a) relu(w.b)]`` (``m1``) and
    ``E[step(w.a) step(w.b)]`` (``m0``) with their standard errors.
    ``step`` is the strict indicator, so ``step(0) = 0``.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError("a and b must have the same dimension")
    samples = int(samples)
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = make_rng(rng)
    ab = np.stack([a, b], axis=1)
    s1 = s1sq = s0 = 0.0
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        uv = rng.standard_normal((k, a.size)) @ ab
        pos = uv > 0
        p1 = np.where(pos[:, 0] & pos[:, 1], uv[:, 0] * uv[:, 1], 0.0)
        p0 = (pos[:, 0] & pos[:, 1]).astype(np.float64)
        s1 += p1.sum()
        s1sq += (p1 * p1).sum()
        s0 += p0.sum()
        done += k
    m1 = s1 / samples
    m0 = s0 / samples
    if samples > 1:
        var1 = max(s1sq / samples - m1 * m1, 0.0) * samples / (samples - 1)
        var0 = m0 * (1.0 - m0) * samples / (samples - 1)
        se1, se0 = np.sqrt(var1 / samples), np.sqrt(var0 / samples)
    else:
        se1 = se0 = np.inf
    return MonteCarloMoments(m1, m0, se1, se0)


def save_dense(path_or_file, M):
    """Write a matrix as ``rows cols`` followed by row-major values."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w") if own else path_or_file
    try:
        fh.write(f"{M.shape[0]} {M.shape[1]}\n")
        for row in M:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
    finally:
        if own:
            fh.close()


def read_dense_block(tokens):
    """Consume one matrix from an iterator of whitespace tokens."""
    rows, cols = int(next(tokens)), int(next(tokens))
    vals = [float(next(tokens)) for _ in range(rows * cols)]
    return np.array(vals, dtype=np.float64).reshape(rows, cols)


def load_dense(path):
    with open(path) as fh:
        tokens = iter(fh.read().split())
    M = read_dense_block(tokens)
    if next(tokens, None) is not None:
        raise ValueError(f"{path}: trailing data after matrix")
    return M
