"""Independent reference computations used by the tests.

Nothing here imports the code under test beyond plain data containers; each
oracle recomputes its quantity the slow, obvious way.
"""

import math

import numpy as np


def central_difference(f, x: np.ndarray, index, h: float = 1e-5) -> float:
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-4) -> float:
    """Relative error; below ``floor`` in magnitude it becomes absolute error scaled by 1/floor.

    So at the 1e-4 tolerance, gradients smaller than 1e-4 must agree to 1e-8
    absolute, which is above finite-difference round-off.
    """
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(params: dict, analytic: dict, loss, rng: np.random.Generator, n_coords: int = 12) -> float:
    """Largest relative error over ``n_coords`` random coordinates of every parameter in ``analytic``.

    ``loss()`` must read the arrays in ``params`` at call time.
    """
    worst = 0.0
    for name, g in analytic.items():
        x = params[name]
        for flat in rng.choice(x.size, size=min(n_coords, x.size), replace=False):
            idx = np.unravel_index(flat, x.shape)
            worst = max(worst, rel_err(g[idx], central_difference(loss, x, idx)))
    return worst


def matmul_loops(a, b, bias=None):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s + (bias[j] if bias is not None else 0.0)
    return np.array(out)


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def softplus_direct(x, beta):
    return math.log1p(math.exp(beta * x)) / beta


# ------------------------------------------------------------------ fusion


def fuse_by_enumeration(f: dict, hats: dict, has_ir: bool, has_d: bool) -> dict:
    """Fused features as the plain mean of the contributing vectors, listed by hand."""
    rgb = [f["rgb"]] + ([hats["rgb_hat"]] if has_ir else [])
    ir = ([f["ir"]] if has_ir else []) + [hats["ir_hat"]]
    d = ([f["d"]] if has_d else []) + [hats["dr_hat"]] + ([hats["di_hat"]] if has_ir else [])
    return {k: sum(v) / len(v) for k, v in (("rgb", rgb), ("ir", ir), ("d", d))}


# ------------------------------------------------------------- pseudo-labels


def pseudo_record(p, passes, h=0.5):
    """Hand-composed record for one sample: ``p`` deterministic scores, ``passes`` K x 3 dropout scores."""
    k = len(passes)
    mu = [sum(passes[i][j] for i in range(k)) / k for j in range(3)]
    v = [sum((passes[i][j] - mu[j]) ** 2 for i in range(k)) / k for j in range(3)]
    lo, hi = min(v), max(v)
    w = [1.0, 1.0, 1.0] if hi == lo else [1 - (x - lo) / (hi - lo) for x in v]
    z = sum(math.exp(x) for x in w)
    psi = [math.exp(x) / z for x in w]
    p_hat = sum(a * b for a, b in zip(psi, p))
    return {"mu": mu, "v": v, "w": w, "psi": psi, "p_hat": p_hat, "y_hat": int(p_hat >= h),
            "y_naive": int(sum(p) / 3 >= h)}


# ------------------------------------------------------------------ metrics


def pairwise_auc(scores, labels) -> float:
    live = [s for s, y in zip(scores, labels) if y == 1]
    spoof = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in live:
        for b in spoof:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(live) * len(spoof))


def counting_hter(scores, labels, t):
    fa = sum(1 for s, y in zip(scores, labels) if y == 0 and s >= t)
    fr = sum(1 for s, y in zip(scores, labels) if y == 1 and s < t)
    n0 = sum(1 for y in labels if y == 0)
    n1 = sum(1 for y in labels if y == 1)
    far, frr = fa / n0, fr / n1
    return (far + frr) / 2, far, frr


def exhaustive_youden(scores, labels) -> float:
    u = sorted(set(float(s) for s in scores))
    cands = sorted({0.0, 1.0} | {(a + b) / 2 for a, b in zip(u, u[1:])})
    best, best_j = None, -math.inf
    for t in cands:
        _, far, frr = counting_hter(scores, labels, t)
        j = (1 - frr) - far
        if j > best_j:
            best, best_j = t, j
    return best


# ------------------------------------------------------------- two-sample


def mmd2_rbf(x: np.ndarray, y: np.ndarray, gamma: float) -> float:
    """Biased squared maximum mean discrepancy with an RBF kernel."""
    from sklearn.metrics.pairwise import rbf_kernel

    return float(rbf_kernel(x, x, gamma=gamma).mean() + rbf_kernel(y, y, gamma=gamma).mean()
                 - 2 * rbf_kernel(x, y, gamma=gamma).mean())
