"""Certificate for a neighbourhood of the equilibrium.

Linear relaxations cannot prove ``F <= 0`` on a box containing the
equilibrium: ``F`` vanishes there and any outward slack makes the upper
bound positive. Near the equilibrium we instead use a mean-value argument.

With an interval enclosure ``[J]`` of the (Clarke) Jacobian of ``f_cl`` on
a box ``N`` around ``xi*``, every ``f_cl(xi) - xi*`` equals ``J delta`` for
some ``J`` in ``[J]`` and ``delta = xi - xi*``. Both candidate families are
positively homogeneous in ``delta`` after that substitution, so the decrease
condition reduces to a sign check on the unit shell:

* quadratic V: a spectral-norm contraction test in the ``M`` metric;
* network V: a piecewise-linear homogeneous bound ``Phi(delta) <= 0`` proved
  with bound propagation + branch-and-bound over the faces of the shell.

The result is a box ``N`` on which the first clause of the verification
condition holds for every sublevel value.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..graph import Graph, GraphBuilder, GraphError
from ..graph.core import effective_weight, quadform_matrix
from ..graph.relax import interval_op
from .bounds import ETA_NUM, crown_bounds


# -- interval arithmetic helpers --------------------------------------------


def _imul(al, au, bl, bu):
    p = np.stack([al * bl, al * bu, au * bl, au * bu])
    return p.min(0), p.max(0)


def _scale_rows(dl, du, JL, JU):
    """[d] (D, k) times [J] (D, k, n) elementwise along k."""
    return _imul(dl[..., None], du[..., None], JL, JU)


def _deriv_range(node, l, u):
    op, a = node.op, node.attrs
    # closed conditions: at a kink the Clarke set holds both one-sided slopes
    if op == "leaky_relu":
        s = a["slope"]
        lo = np.where(u < 0, s, np.where(l > 0, 1.0, min(s, 1.0)))
        hi = np.where(u < 0, s, np.where(l > 0, 1.0, max(s, 1.0)))
        return lo, hi
    if op in ("abs", "l1norm"):
        return np.where(l > 0, 1.0, -1.0), np.where(u < 0, -1.0, 1.0)
    if op == "clamp":
        inside = (l > a["lo"]) & (u < a["hi"])
        outside = (u < a["lo"]) | (l > a["hi"])
        return np.where(inside, 1.0, 0.0), np.where(outside, 0.0, 1.0)
    if op == "sin":
        node_c = type(node)(node.id, "cos", node.inputs, node.dim, {})
        return interval_op(node_c, [l], [u], {})
    if op == "cos":
        node_s = type(node)(node.id, "sin", node.inputs, node.dim, {})
        sl, su = interval_op(node_s, [l], [u], {})
        return -su, -sl
    if op == "tan":
        tl, tu = np.tan(l), np.tan(u)
        if np.any(l <= -np.pi / 2) or np.any(u >= np.pi / 2):
            raise GraphError("tan derivative outside (-pi/2, pi/2)")
        sq_hi = np.maximum(tl * tl, tu * tu)
        sq_lo = np.where((l <= 0) & (u >= 0), 0.0, np.minimum(tl * tl, tu * tu))
        return 1.0 + sq_lo, 1.0 + sq_hi
    if op == "reciprocal":
        if np.any((l <= 0) & (u >= 0)):
            raise GraphError("reciprocal derivative over an interval containing 0")
        m = np.minimum(np.abs(l), np.abs(u))
        M = np.maximum(np.abs(l), np.abs(u))
        return -1.0 / (m * m), -1.0 / (M * M)
    raise GraphError(f"no derivative range for {op!r}")


def _pad(l, u):
    return l - ETA_NUM * (1.0 + np.abs(l)), u + ETA_NUM * (1.0 + np.abs(u))


def interval_jacobian(graph: Graph, lo, hi, output: int = 0, params=None):
    """Enclosure ``(JL, JU)`` of the Clarke Jacobian of one output over a box.

    Also returns the value enclosure ``(l, u)`` of that output. Arrays are
    batched over boxes: ``lo`` has shape ``(D, n)``.
    """
    if len(graph.inputs) != 1:
        raise GraphError("interval Jacobian requires a single-input graph")
    P = graph._merged(params)
    lo = np.atleast_2d(np.asarray(lo, float))
    hi = np.atleast_2d(np.asarray(hi, float))
    D, n = lo.shape
    N = len(graph.nodes)
    L, U, JL, JU = [None] * N, [None] * N, [None] * N, [None] * N
    inp = graph.inputs[0]
    L[inp], U[inp] = lo, hi
    JL[inp] = JU[inp] = np.broadcast_to(np.eye(n), (D, n, n)).copy()
    target = graph.outputs[output]
    for node in graph.nodes[: target + 1]:
        k, op, a = node.id, node.op, node.attrs
        if op == "input":
            continue
        ins = node.inputs
        if op == "constant":
            v = np.broadcast_to(a["value"], (D, node.dim)).copy()
            L[k], U[k] = v, v.copy()
            JL[k] = JU[k] = np.zeros((D, node.dim, n))
            continue
        l, u = interval_op(node, [L[i] for i in ins], [U[i] for i in ins], P)
        L[k], U[k] = _pad(l, u)
        x = ins[0]
        if op == "affine":
            W = effective_weight(node, P)
            Wp, Wn = np.maximum(W, 0), np.minimum(W, 0)
            JL[k] = np.einsum("oi,din->don", Wp, JL[x]) + np.einsum("oi,din->don", Wn, JU[x])
            JU[k] = np.einsum("oi,din->don", Wp, JU[x]) + np.einsum("oi,din->don", Wn, JL[x])
        elif op == "scale":
            c = a["c"]
            JL[k], JU[k] = (c * JL[x], c * JU[x]) if c >= 0 else (c * JU[x], c * JL[x])
        elif op == "add":
            JL[k], JU[k] = JL[x] + JL[ins[1]], JU[x] + JU[ins[1]]
        elif op == "sub":
            JL[k], JU[k] = JL[x] - JU[ins[1]], JU[x] - JL[ins[1]]
        elif op == "sum":
            JL[k], JU[k] = JL[x].sum(1, keepdims=True), JU[x].sum(1, keepdims=True)
        elif op == "select":
            idx = list(a["idx"])
            JL[k], JU[k] = JL[x][:, idx], JU[x][:, idx]
        elif op == "concat":
            JL[k] = np.concatenate([JL[i] for i in ins], axis=1)
            JU[k] = np.concatenate([JU[i] for i in ins], axis=1)
        elif op == "mul":
            y = ins[1]
            p1 = _scale_rows(L[y], U[y], JL[x], JU[x])
            p2 = _scale_rows(L[x], U[x], JL[y], JU[y])
            JL[k], JU[k] = p1[0] + p2[0], p1[1] + p2[1]
        elif op in ("min", "max"):
            y = ins[1]
            if op == "min":
                only_x = U[x] < L[y]
                only_y = U[y] < L[x]
            else:
                only_x = L[x] > U[y]
                only_y = L[y] > U[x]
            hl = np.minimum(JL[x], JL[y])
            hu = np.maximum(JU[x], JU[y])
            JL[k] = np.where(only_x[..., None], JL[x], np.where(only_y[..., None], JL[y], hl))
            JU[k] = np.where(only_x[..., None], JU[x], np.where(only_y[..., None], JU[y], hu))
        elif op == "quadform":
            M = quadform_matrix(node, P)
            S = M + M.T
            c = 0.5 * (L[x] + U[x])
            r = 0.5 * (U[x] - L[x])
            gc = c @ S.T
            gr = r @ np.abs(S).T
            pl, pu = _scale_rows(gc - gr, gc + gr, JL[x], JU[x])
            JL[k], JU[k] = pl.sum(1, keepdims=True), pu.sum(1, keepdims=True)
        elif op == "l1norm":
            dl, du = _deriv_range(node, L[x], U[x])
            pl, pu = _scale_rows(dl, du, JL[x], JU[x])
            JL[k], JU[k] = pl.sum(1, keepdims=True), pu.sum(1, keepdims=True)
        else:
            dl, du = _deriv_range(node, L[x], U[x])
            JL[k], JU[k] = _scale_rows(dl, du, JL[x], JU[x])
    return _pad(JL[target], JU[target]), (L[target], U[target])


# -- local certificate ------------------------------------------------------------


@dataclass
class LocalCertificate:
    ok: bool
    lo: np.ndarray | None = None
    up: np.ndarray | None = None
    radius: np.ndarray | None = None
    reason: str = ""

    def contains(self, lo, up) -> np.ndarray:
        """Which boxes (rows of lo/up) lie inside the certified neighbourhood."""
        if not self.ok:
            return np.zeros(np.atleast_2d(lo).shape[0], dtype=bool)
        return np.all((np.atleast_2d(lo) >= self.lo) & (np.atleast_2d(up) <= self.up), axis=1)


def _sqrtm_pair(M):
    w, U = np.linalg.eigh(0.5 * (M + M.T))
    if np.min(w) <= 0:
        raise GraphError("quadratic form matrix is not positive definite")
    half = (U * np.sqrt(w)) @ U.T
    ihalf = (U / np.sqrt(w)) @ U.T
    return half, ihalf


def _quadratic_ok(M, Jc, Jr, kappa) -> bool:
    half, ihalf = _sqrtm_pair(M)
    nominal = np.linalg.norm(half @ Jc @ ihalf, 2)
    pert = np.linalg.norm(half, 2) * np.linalg.norm(Jr, 2) * np.linalg.norm(ihalf, 2)
    # norms computed in floating point: leave a relative margin
    return (nominal + pert) * (1.0 + 1e-9) + 1e-12 <= np.sqrt(1.0 - kappa)


def homogeneous_bound_graph(gc, gr, Jc, Jr, M, r, kappa) -> Graph:
    """Graph of ``s -> Phi(r * s)`` whose nonpositivity on the unit shell
    certifies ``V(f_cl(xi)) <= (1 - kappa) V(xi)`` on ``xi* + r * [-1, 1]^n``."""
    n = r.size
    Rm = np.diag(r)
    a = (Jc.T @ gc) @ Rm
    A = M @ Jc @ Rm
    Jcr = Jc @ Rm
    w = (Jr.T @ (np.abs(gc) + gr + np.abs(M).T @ np.ones(n))) * r
    gcr = gc * r
    grr = gr * r
    Mr = M @ Rm
    scale = max(np.abs(a).max(), np.abs(A).max(), np.abs(Mr).max(), 1e-300)
    b = GraphBuilder()
    s = b.input(n)
    up = b.add(b.l1norm(b.affine(s, a[None, :] / scale)),
               b.add(b.affine(b.abs(b.affine(s, Jcr / scale)), grr[None, :]),
                     b.add(b.l1norm(b.affine(s, A / scale)), b.affine(b.abs(s), w[None, :] / scale))))
    phi_lo = b.relu(b.sub(b.abs(b.affine(s, gcr[None, :] / scale)), b.affine(b.abs(s), grr[None, :] / scale)))
    low = b.add(phi_lo, b.l1norm(b.affine(s, Mr / scale)))
    out = b.sub(up, b.scale(low, 1.0 - kappa))
    return b.build({"phi": out})


def _shell_nonpositive(graph: Graph, n: int, max_domains: int = 20000) -> bool:
    """Prove ``graph(s) <= 0`` on the boundary of [-1, 1]^n by face-wise BnB."""
    stack = []
    for d in range(n):
        for side in (-1.0, 1.0):
            lo, up = -np.ones(n), np.ones(n)
            lo[d] = up[d] = side
            stack.append((lo, up))
    explored = 0
    while stack:
        batch = stack[-256:]
        del stack[-256:]
        lo = np.array([b[0] for b in batch])
        up = np.array([b[1] for b in batch])
        explored += len(batch)
        if explored > max_domains:
            return False
        (_, (l, u)), = crown_bounds(graph, lo, up)
        c = 0.5 * (lo + up)
        if np.any(graph(c)[:, 0] > 0):
            return False
        for i in np.nonzero(u[:, 0] > 0)[0]:
            w = up[i] - lo[i]
            d = int(np.argmax(w))
            if w[d] < 1e-6:
                return False
            mid = 0.5 * (lo[i, d] + up[i, d])
            a_up = up[i].copy()
            a_up[d] = mid
            b_lo = lo[i].copy()
            b_lo[d] = mid
            stack.append((lo[i], a_up))
            stack.append((b_lo, up[i]))
    return True


def _attempt(step, V, kappa, xs, r, lo, up):
    """(ok, nlo, nup, rr, reason) for the candidate radius ``r``."""
    nlo, nup = np.maximum(xs - r, lo), np.minimum(xs + r, up)
    try:
        (JL, JU), _ = interval_jacobian(step, nlo, nup, output=0)
        (_, (fl, fu)), = crown_bounds(step, nlo, nup, outputs=["xi_next"])
    except GraphError as exc:
        return False, nlo, nup, None, str(exc)
    JL, JU, fl, fu = JL[0], JU[0], fl[0], fu[0]
    if np.any(fl < lo) or np.any(fu > up):
        return False, nlo, nup, None, "next state may leave the box"
    Jc, Jr = 0.5 * (JL + JU), 0.5 * (JU - JL)
    rr = np.maximum(nup - xs, xs - nlo)
    if V.kind == "quadratic":
        ok = _quadratic_ok(V.M, Jc, Jr, kappa)
    else:
        hlo = np.minimum(np.minimum(nlo, fl), xs)
        hup = np.maximum(np.maximum(nup, fu), xs)
        (gL, gU), _ = interval_jacobian(V.net, hlo, hup, output=0)
        gL, gU = gL[0, 0], gU[0, 0]
        gc, gr = 0.5 * (gL + gU), 0.5 * (gU - gL)
        phi = homogeneous_bound_graph(gc, gr, Jc, Jr, V.M, rr, kappa)
        ok = _shell_nonpositive(phi, xs.size)
    return ok, nlo, nup, rr, "" if ok else "decrease condition not proved"


def local_certificate(system, V, kappa: float, lo, up, radii=None, max_halvings: int = 30,
                      min_radius_frac: float = 1e-5, refine: int = 6) -> LocalCertificate:
    """Largest box ``xi* + r [-1, 1]^n`` on which the decrease condition and
    ``f_cl(N) in B`` are proved.

    ``r`` is halved from the box half-widths until a proof succeeds, then
    grown back by ``refine`` bisection steps towards the last failure.
    """
    lo, up = np.asarray(lo, float), np.asarray(up, float)
    xs = system.xi_star
    if np.any(xs < lo) or np.any(xs > up):
        return LocalCertificate(False, reason="equilibrium outside the box")
    step = system.graph()
    r = np.maximum(xs - lo, up - xs) if radii is None else np.asarray(radii, float)
    r0 = r.copy()
    reason = ""
    for k in range(max_halvings):
        if np.all(r < min_radius_frac * (up - lo)):
            break
        ok, nlo, nup, rr, why = _attempt(step, V, kappa, xs, r, lo, up)
        if not ok:
            reason = why
            r = 0.5 * r
            continue
        best = (nlo, nup, rr)
        if k > 0:
            a, b = 1.0, 2.0  # scale factors on r: a proved, b failed
            for _ in range(refine):
                m = 0.5 * (a + b)
                ok, nlo, nup, rr, _ = _attempt(step, V, kappa, xs, m * r, lo, up)
                if ok:
                    a, best = m, (nlo, nup, rr)
                else:
                    b = m
            r = a * r
            # then stretch one axis at a time
            for d in range(xs.size):
                a, b = 1.0, 2.0
                for _ in range(refine):
                    m = 0.5 * (a + b)
                    rd = r.copy()
                    rd[d] *= m
                    ok, nlo, nup, rr, _ = _attempt(step, V, kappa, xs, rd, lo, up)
                    if ok:
                        a, best = m, (nlo, nup, rr)
                    else:
                        b = m
                r[d] *= a
        return LocalCertificate(True, *best)
    return LocalCertificate(False, reason=reason or f"no certificate down to radius {r0 * min_radius_frac}")
