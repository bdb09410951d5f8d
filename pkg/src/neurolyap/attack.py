"""Projected-gradient falsification.

Two searches over the region of interest B:

* boundary descent on V to estimate the largest sublevel value whose set
  stays inside B (``estimate_rho``);
* ascent on the derivative-condition violation to produce counterexamples
  (``find_counterexamples``).

Steps are sign-of-gradient steps with per-dimension length
``step * width / 2`` so the same settings work across systems.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import Certificate


@dataclass(frozen=True)
class PgdConfig:
    alpha: float = 0.05  # boundary descent step (fraction of half-width)
    beta: float = 0.02  # violation ascent step
    boundary_iters: int = 20
    attack_iters: int = 20
    restarts: int = 2048
    n_boundary: int = 4096
    batch_size: int = 8192
    multiscale: float = 0.25  # fraction of restarts started in boxes shrunk toward the centre
    min_scale: float = 1e-3

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("PGD step sizes must be positive")
        if self.boundary_iters < 1 or self.attack_iters < 1:
            raise ValueError("PGD iteration counts must be >= 1")
        if self.restarts < 1 or self.n_boundary < 1 or self.batch_size < 1:
            raise ValueError("restart, sample and batch counts must be >= 1")
        if not 0 <= self.multiscale <= 1 or not 0 < self.min_scale <= 1:
            raise ValueError("multiscale must lie in [0, 1] and min_scale in (0, 1]")


def project_box(xi, lo, up):
    return np.minimum(np.maximum(xi, lo), up)


def project_boundary(xi, lo, up):
    """Nearest point of the box boundary.

    Interior points move to the face nearest relative to the half-width; ties
    go to the lowest dimension index, and a coordinate equidistant from both
    faces moves to the upper face.
    """
    lo, up = np.asarray(lo, float), np.asarray(up, float)
    xi = project_box(np.asarray(xi, float), lo, up)
    single = xi.ndim == 1
    X = np.atleast_2d(xi).copy()
    half = 0.5 * (up - lo)
    d_lo = (X - lo) / half
    d_up = (up - X) / half
    on_face = np.any((X <= lo) | (X >= up), axis=1)
    dist = np.minimum(d_lo, d_up)
    k = np.argmin(dist, axis=1)
    rows = np.nonzero(~on_face)[0]
    ks = k[rows]
    to_up = d_up[rows, ks] <= d_lo[rows, ks]
    X[rows, ks] = np.where(to_up, up[ks], lo[ks])
    return X[0] if single else X


def sample_boundary(lo, up, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the box surface (faces weighted by their measure)."""
    lo, up = np.asarray(lo, float), np.asarray(up, float)
    d = lo.size
    w = up - lo
    meas = np.array([np.prod(np.delete(w, i)) for i in range(d)])
    if meas.sum() <= 0:
        meas = np.ones(d)
    face_p = np.repeat(meas / meas.sum() / 2.0, 2)
    faces = rng.choice(2 * d, size=n, p=face_p)
    X = lo + w * rng.uniform(size=(n, d))
    dims = faces // 2
    upper = faces % 2 == 1
    X[np.arange(n), dims] = np.where(upper, up[dims], lo[dims])
    return X


def _v_and_grad(cert: Certificate, X):
    tr = cert.trace(X)
    v = cert.values(tr)["V"]
    (g,), _ = cert.graph.backward(tr, {"V": np.ones((X.shape[0], 1))}, wrt_params=False)
    return v, g


def estimate_rho(cert: Certificate, lo, up, gamma: float, cfg: PgdConfig, rng: np.random.Generator,
                 return_point: bool = False):
    """``gamma`` times the smallest V found on the boundary of [lo, up]."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    lo, up = np.asarray(lo, float), np.asarray(up, float)
    X = sample_boundary(lo, up, cfg.n_boundary, rng)
    step = cfg.alpha * 0.5 * (up - lo)
    best_v, best_x = np.inf, None
    for it in range(cfg.boundary_iters + 1):
        v, g = _v_and_grad(cert, X)
        i = int(np.argmin(v))
        if v[i] < best_v:
            best_v, best_x = float(v[i]), X[i].copy()
        if it == cfg.boundary_iters:
            break
        X = project_boundary(X - step * np.sign(g), lo, up)
    rho = gamma * best_v
    return (rho, best_x) if return_point else rho


def _surrogate_grad(cert: Certificate, X):
    """L_V̇ values and the ascent direction of min(F + c0 H, rho - V)."""
    tr = cert.trace(X)
    vals = cert.values(tr)
    c0 = cert.weights.c0
    a = vals["F"] + c0 * vals["H"]
    b = cert.rho - vals["V"]
    first = a <= b
    n = X.shape[0]
    cot = {
        "F": np.where(first, 1.0, 0.0)[:, None],
        "H": np.where(first, c0, 0.0)[:, None],
        "V": np.where(first, 0.0, -1.0)[:, None],
    }
    (g,), _ = cert.graph.backward(tr, cot, wrt_params=False)
    return vals["Lvdot"], g.reshape(n, -1)


@dataclass
class Counterexamples:
    points: np.ndarray
    values: np.ndarray
    max_violation: float

    def __len__(self):
        return self.points.shape[0]


def _order(points, values):
    keys = [points[:, j] for j in range(points.shape[1] - 1, -1, -1)] + [-values]
    return np.lexsort(keys)


def _restart_scales(m: int, cfg: PgdConfig, rng: np.random.Generator) -> np.ndarray:
    s = np.ones(m)
    k = int(round(cfg.multiscale * m))
    if k and cfg.min_scale < 1:
        s[m - k:] = np.exp(rng.uniform(np.log(cfg.min_scale), 0.0, size=k))
    return s


def find_counterexamples(cert: Certificate, lo, up, cfg: PgdConfig, rng: np.random.Generator,
                         restarts: int | None = None, keep_zero: bool = False,
                         center=None) -> Counterexamples:
    """PGD ascent on the derivative-condition violation over [lo, up].

    A ``cfg.multiscale`` fraction of restarts starts in copies of the box
    shrunk toward ``center`` (default: box centre) by log-uniform factors, with
    steps shrunk alike, so violations that scale with V near the equilibrium
    are not missed.

    Returns points sorted by descending violation (ties broken by
    lexicographic point order); zero-violation points are dropped unless
    ``keep_zero``.
    """
    lo, up = np.asarray(lo, float), np.asarray(up, float)
    c = 0.5 * (lo + up) if center is None else np.asarray(center, float)
    n_total = cfg.restarts if restarts is None else restarts
    step0 = cfg.beta * 0.5 * (up - lo)
    pts, vals = [], []
    done = 0
    while done < n_total:
        m = min(cfg.batch_size, n_total - done)
        s = _restart_scales(m, cfg, rng)[:, None]
        X = lo + (up - lo) * rng.uniform(size=(m, lo.size))
        X = project_box(c + s * (X - c), lo, up)
        step = step0 * s
        best_x, best_v = X.copy(), np.full(m, -np.inf)
        for it in range(cfg.attack_iters + 1):
            L, g = _surrogate_grad(cert, X)
            better = L > best_v
            best_x[better] = X[better]
            best_v[better] = L[better]
            if it == cfg.attack_iters:
                break
            X = project_box(X + step * np.sign(g), lo, up)
        pts.append(best_x)
        vals.append(best_v)
        done += m
    P = np.concatenate(pts)
    Vv = cert.evaluate(P)["Lvdot"]
    if not keep_zero:
        mask = Vv > 0
        P, Vv = P[mask], Vv[mask]
    order = _order(P, Vv)
    P, Vv = P[order], Vv[order]
    return Counterexamples(P, Vv, float(Vv.max()) if Vv.size else 0.0)
