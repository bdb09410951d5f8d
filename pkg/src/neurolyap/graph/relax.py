"""Linear relaxations and interval extensions of the graph primitives.

Every unary relaxation is returned as four arrays ``(al, bl, au, bu)`` with

    al * z + bl <= op(z) <= au * z + bu     for all z in [l, u]

elementwise. Slopes follow the usual secant/tangent choices; offsets are then
computed *exactly* by maximising ``op(z) - s * z`` over the endpoints and the
finitely many stationary points inside the interval, so every relaxation is
sound by construction (up to a tiny rounding pad).
"""
from __future__ import annotations

import numpy as np

from .core import LEAKY_SLOPE, GraphError, Node, effective_weight, quadform_matrix

TWO_PI = 2.0 * np.pi
HALF_PI = 0.5 * np.pi

RELAXABLE_UNARY = ("leaky_relu", "clamp", "sin", "cos", "tan", "abs", "reciprocal")


def _check(l, u):
    l = np.asarray(l, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if np.any(l > u):
        raise ValueError("relaxation interval has l > u")
    return np.broadcast_arrays(l, u)


def _pad(b, s, l, u, vals):
    scale = 1.0 + np.abs(b) + np.abs(s) * np.maximum(np.abs(l), np.abs(u)) + vals
    return 1e-12 * scale


def _offsets(fn, l, u, s_lo, s_up, cands):
    """Exact min of fn(z) - s_lo z and max of fn(z) - s_up z over [l, u].

    ``cands`` has shape ``l.shape + (k,)``; entries outside [l, u] or NaN are
    ignored. Endpoints are always included.
    """
    pts = np.concatenate([l[..., None], u[..., None], cands], axis=-1)
    valid = (pts >= l[..., None]) & (pts <= u[..., None]) & np.isfinite(pts)
    safe = np.where(valid, pts, l[..., None])
    with np.errstate(all="ignore"):
        f = fn(safe)
    lo_obj = np.where(valid, f - s_lo[..., None] * safe, np.inf)
    up_obj = np.where(valid, f - s_up[..., None] * safe, -np.inf)
    bl = lo_obj.min(axis=-1)
    bu = up_obj.max(axis=-1)
    mag = np.where(valid, np.abs(f), 0.0).max(axis=-1)
    bl = bl - _pad(bl, s_lo, l, u, mag)
    bu = bu + _pad(bu, s_up, l, u, mag)
    return bl, bu


def _secant(fn, dfn, l, u):
    w = u - l
    thin = w <= 1e-12 * (1.0 + np.abs(l) + np.abs(u))
    with np.errstate(all="ignore"):
        s = (fn(u) - fn(l)) / np.where(thin, 1.0, w)
    return np.where(thin, dfn(0.5 * (l + u)), s)


def _periodic(a, l, period=TWO_PI, reps=(-1, 0, 1, 2)):
    """Translates a + k*period near [l, u] (enough copies for width <= period)."""
    k0 = np.floor((l - a) / period)
    return np.stack([a + (k0 + j) * period for j in reps], axis=-1)


def _sin_crosses_extremum(l, u):
    k = np.ceil((l - HALF_PI) / np.pi)
    return HALF_PI + k * np.pi < u


def _relax_sin(l, u):
    wide = _sin_crosses_extremum(l, u)
    s = np.where(wide, 0.0, _secant(np.sin, np.cos, l, u))
    a = np.arccos(np.clip(s, -1.0, 1.0))
    cands = np.concatenate([_periodic(a, l), _periodic(-a, l)], axis=-1)
    # extrema for the flat (wide) case
    ext = _periodic(np.full_like(l, HALF_PI), l, period=np.pi, reps=(-1, 0, 1, 2, 3))
    big = (u - l) >= TWO_PI
    bl, bu = _offsets(np.sin, l, u, s, s, np.concatenate([cands, ext], axis=-1))
    bl = np.where(big, -1.0, bl)
    bu = np.where(big, 1.0, bu)
    return s, bl, s, bu


def _relax_tan(l, u):
    if np.any(l <= -HALF_PI) or np.any(u >= HALF_PI):
        raise GraphError("tan relaxation requires the interval inside (-pi/2, pi/2)")
    s = _secant(np.tan, lambda z: 1.0 + np.tan(z) ** 2, l, u)
    a = np.arccos(np.clip(1.0 / np.sqrt(np.maximum(s, 1.0)), -1.0, 1.0))
    cands = np.stack([a, -a], axis=-1)
    bl, bu = _offsets(np.tan, l, u, s, s, cands)
    return s, bl, s, bu


def _relax_reciprocal(l, u):
    if np.any((l <= 0) & (u >= 0)):
        raise GraphError("reciprocal relaxation requires an interval excluding 0")
    s = _secant(lambda z: 1.0 / z, lambda z: -1.0 / z ** 2, l, u)
    r = np.sqrt(np.maximum(-1.0 / np.where(s < 0, s, -1.0), 0.0))
    cands = np.stack([r, -r], axis=-1)
    bl, bu = _offsets(lambda z: 1.0 / z, l, u, s, s, cands)
    return s, bl, s, bu


def relax(op: str, l, u, **attrs):
    """Sound linear lower/upper bounds of a unary primitive on ``[l, u]``."""
    l, u = _check(l, u)
    if op == "leaky_relu":
        alpha = attrs.get("slope", LEAKY_SLOPE)
        fn = lambda z: np.where(z >= 0, z, alpha * z)
        s_up = _secant(fn, lambda z: np.where(z >= 0, 1.0, alpha), l, u)
        s_up = np.where(u <= 0, alpha, np.where(l >= 0, 1.0, s_up))
        s_lo = np.where(u <= 0, alpha, np.where(l >= 0, 1.0, np.where(u >= -l, 1.0, alpha)))
        cands = np.zeros(l.shape + (1,))
        bl, bu = _offsets(fn, l, u, s_lo, s_up, cands)
        return s_lo, bl, s_up, bu
    if op == "abs":
        s = _secant(np.abs, np.sign, l, u)
        s = np.where(l >= 0, 1.0, np.where(u <= 0, -1.0, s))
        bl, bu = _offsets(np.abs, l, u, s, s, np.zeros(l.shape + (1,)))
        return s, bl, s, bu
    if op == "clamp":
        lo = np.broadcast_to(np.asarray(attrs["lo"], float), l.shape)
        hi = np.broadcast_to(np.asarray(attrs["hi"], float), l.shape)
        fn = lambda z: np.minimum(np.maximum(z, lo[..., None]), hi[..., None])
        fn1 = lambda z: np.minimum(np.maximum(z, lo), hi)
        s = _secant(fn1, lambda z: ((z >= lo) & (z < hi)).astype(float), l, u)
        inside = (l >= lo) & (u <= hi)
        s = np.where(inside, 1.0, s)
        s = np.where((u <= lo) | (l >= hi), 0.0, s)
        cands = np.stack([lo, hi], axis=-1)
        bl, bu = _offsets(fn, l, u, s, s, cands)
        return s, bl, s, bu
    if op == "sin":
        return _relax_sin(l, u)
    if op == "cos":
        al, bl, au, bu = _relax_sin(l + HALF_PI, u + HALF_PI)
        return al, bl + al * HALF_PI, au, bu + au * HALF_PI
    if op == "tan":
        return _relax_tan(l, u)
    if op == "reciprocal":
        return _relax_reciprocal(l, u)
    raise GraphError(f"no unary relaxation for {op!r}")


def relax_binary(op: str, l1, u1, l2, u2, ld=None, ud=None):
    """Relaxation of a bivariate elementwise primitive.

    Returns ``((a1, a2, b) lower, (a1, a2, b) upper)`` such that
    ``a1 x + a2 y + b`` bounds ``op(x, y)`` on the box. ``ld, ud`` optionally
    tighten the range of ``x - y`` for ``min``/``max``.
    """
    l1, u1 = _check(l1, u1)
    l2, u2 = _check(l2, u2)
    if op == "mul":
        a1 = 0.5 * (l2 + u2)
        a2 = 0.5 * (l1 + u1)
        blo = -0.5 * (l1 * l2 + u1 * u2)
        bup = -0.5 * (l1 * u2 + u1 * l2)
        pad = 1e-12 * (1.0 + np.abs(blo) + np.abs(bup) + np.abs(a1) * np.maximum(np.abs(l1), np.abs(u1))
                       + np.abs(a2) * np.maximum(np.abs(l2), np.abs(u2)))
        return (a1, a2, blo - pad), (a1, a2, bup + pad)
    if op in ("min", "max"):
        if ld is None:
            ld, ud = l1 - u2, u1 - l2
        ld = np.maximum(ld, l1 - u2)
        ud = np.minimum(ud, u1 - l2)
        ud = np.maximum(ud, ld)
        sl, bl, su, bu = relax("leaky_relu", ld, ud, slope=0.0)
        if op == "min":
            # min(x, y) = x - relu(x - y)
            lower = (1.0 - su, su, -bu)
            upper = (1.0 - sl, sl, -bl)
        else:
            # max(x, y) = y + relu(x - y)
            lower = (sl, 1.0 - sl, bl)
            upper = (su, 1.0 - su, bu)
        return lower, upper
    raise GraphError(f"no binary relaxation for {op!r}")


def relax_quadform(M, l, u):
    """Linear bounds ``g.z + b`` of ``z^T M z`` on the box ``[l, u]``.

    ``l, u`` have shape ``(..., n)``; returns ``(g_lo, b_lo, g_up, b_up)``.
    The lower plane is the tangent at the box centre (needs ``M`` PSD), the
    upper adds the worst-case curvature ``r^T |M| r``.
    """
    c = 0.5 * (l + u)
    r = 0.5 * (u - l)
    Mc = c @ M.T
    g = 2.0 * Mc
    qc = np.einsum("...i,...i->...", c, Mc)
    curv = np.einsum("...i,ij,...j->...", r, np.abs(M), r)
    pad = 1e-12 * (1.0 + np.abs(qc) + curv + np.einsum("...i,...i->...", np.abs(g), np.abs(c) + r))
    return g, -qc - pad, g, -qc + curv + pad


# ---------------------------------------------------------------------------
# interval extensions


def sin_range(l, u):
    l, u = np.broadcast_arrays(np.asarray(l, float), np.asarray(u, float))
    lo = np.minimum(np.sin(l), np.sin(u))
    hi = np.maximum(np.sin(l), np.sin(u))
    k = np.ceil((l - HALF_PI) / TWO_PI)
    has_max = HALF_PI + k * TWO_PI <= u
    k = np.ceil((l + HALF_PI) / TWO_PI)
    has_min = -HALF_PI + k * TWO_PI <= u
    hi = np.where(has_max, 1.0, hi)
    lo = np.where(has_min, -1.0, lo)
    return lo, hi


def mul_range(l1, u1, l2, u2):
    p = np.stack([l1 * l2, l1 * u2, u1 * l2, u1 * u2])
    return p.min(axis=0), p.max(axis=0)


def interval_op(node: Node, ls, us, params):
    """Interval extension of one node; ``ls``/``us`` are lists of input bounds."""
    op = node.op
    a = node.attrs
    l, u = ls[0], us[0]
    if op == "affine":
        W = effective_weight(node, params)
        c = 0.5 * (l + u) @ W.T
        r = 0.5 * (u - l) @ np.abs(W).T
        if a["b"] is not None:
            c = c + params[a["b"]]
        return c - r, c + r
    if op == "leaky_relu":
        s = a["slope"]
        f = lambda z: np.where(z >= 0, z, s * z)
        return f(l), f(u)
    if op == "clamp":
        f = lambda z: np.minimum(np.maximum(z, a["lo"]), a["hi"])
        return f(l), f(u)
    if op == "sin":
        return sin_range(l, u)
    if op == "cos":
        return sin_range(l + HALF_PI, u + HALF_PI)
    if op == "tan":
        if np.any(l <= -HALF_PI) or np.any(u >= HALF_PI):
            raise GraphError("tan interval must lie inside (-pi/2, pi/2)")
        return np.tan(l), np.tan(u)
    if op == "abs":
        mig = np.where((l <= 0) & (u >= 0), 0.0, np.minimum(np.abs(l), np.abs(u)))
        return mig, np.maximum(np.abs(l), np.abs(u))
    if op == "reciprocal":
        if np.any((l <= 0) & (u >= 0)):
            raise GraphError("reciprocal interval contains 0")
        return 1.0 / u, 1.0 / l
    if op == "scale":
        c = a["c"]
        return (c * l, c * u) if c >= 0 else (c * u, c * l)
    if op == "add":
        return l + ls[1], u + us[1]
    if op == "sub":
        return l - us[1], u - ls[1]
    if op == "mul":
        return mul_range(l, u, ls[1], us[1])
    if op == "min":
        return np.minimum(l, ls[1]), np.minimum(u, us[1])
    if op == "max":
        return np.maximum(l, ls[1]), np.maximum(u, us[1])
    if op == "sum":
        return l.sum(axis=-1, keepdims=True), u.sum(axis=-1, keepdims=True)
    if op == "l1norm":
        mig = np.where((l <= 0) & (u >= 0), 0.0, np.minimum(np.abs(l), np.abs(u)))
        mag = np.maximum(np.abs(l), np.abs(u))
        return mig.sum(axis=-1, keepdims=True), mag.sum(axis=-1, keepdims=True)
    if op == "quadform":
        M = quadform_matrix(node, params)
        g, blo, _, bup = relax_quadform(M, l, u)
        c = 0.5 * (l + u)
        r = 0.5 * (u - l)
        lin_c = np.einsum("...i,...i->...", g, c)
        lin_r = np.einsum("...i,...i->...", np.abs(g), r)
        lo = np.maximum(lin_c - lin_r + blo, 0.0)
        hi = lin_c + lin_r + bup
        return lo[..., None], hi[..., None]
    if op == "concat":
        return np.concatenate(ls, axis=-1), np.concatenate(us, axis=-1)
    if op == "select":
        idx = list(a["idx"])
        return l[..., idx], u[..., idx]
    raise GraphError(f"no interval rule for {op!r}")
