"""Sound output bounds of a single-input graph over boxes.

Two modes are provided:

* :func:`interval_bounds` - plain interval arithmetic through the DAG.
* :func:`crown_bounds` - linear bound propagation. Intermediate bounds come
  from a forward symbolic pass intersected with interval bounds; output
  bounds come from a backward substitution of the per-node relaxations and
  are again intersected with the cheaper enclosures.

Both work on a batch of boxes at once: ``lo``/``hi`` have shape ``(D, n)``.
Every concretized bound is widened by ``ETA_NUM * (1 + |bound|)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..graph.core import Graph, GraphError, effective_weight, quadform_matrix
from ..graph.relax import RELAXABLE_UNARY, interval_op, relax, relax_binary, relax_quadform

ETA_NUM = 1e-9


def _pad(l, u):
    return l - ETA_NUM * (1.0 + np.abs(l)), u + ETA_NUM * (1.0 + np.abs(u))


def _as_boxes(lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    single = lo.ndim == 1
    lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
    if lo.shape != hi.shape:
        raise ValueError("box bounds must have the same shape")
    if np.any(lo > hi):
        raise ValueError("box has lo > hi")
    return lo, hi, single


def _ancestors(graph: Graph, targets) -> np.ndarray:
    need = np.zeros(len(graph.nodes), dtype=bool)
    for t in targets:
        need[t] = True
    for node in reversed(graph.nodes):
        if need[node.id]:
            for i in node.inputs:
                need[i] = True
    return need


def _targets(graph: Graph, outputs):
    if outputs is None:
        return list(graph.outputs)
    return [graph.output(o) if isinstance(o, str) else graph.outputs[o] for o in outputs]


def _check_single_input(graph: Graph):
    if len(graph.inputs) != 1:
        raise GraphError("bounding requires a single-input graph")


def _ibp_node(node, L, U, P, D):
    if node.op == "constant":
        v = node.attrs["value"]
        return np.broadcast_to(v, (D, node.dim)).copy(), np.broadcast_to(v, (D, node.dim)).copy()
    return interval_op(node, [L[i] for i in node.inputs], [U[i] for i in node.inputs], P)


def node_intervals(graph: Graph, lo, hi, params=None, targets=None):
    """Interval bounds of every needed node (list indexed by node id)."""
    _check_single_input(graph)
    P = graph._merged(params)
    lo, hi, _ = _as_boxes(lo, hi)
    need = _ancestors(graph, targets if targets is not None else graph.outputs)
    L = [None] * len(graph.nodes)
    U = [None] * len(graph.nodes)
    L[graph.inputs[0]], U[graph.inputs[0]] = lo, hi
    for node in graph.nodes:
        if node.op == "input" or not need[node.id]:
            continue
        if node.op == "constant":
            v = node.attrs["value"]
            L[node.id] = np.broadcast_to(v, (lo.shape[0], node.dim)).copy()
            U[node.id] = L[node.id].copy()
            continue
        l, u = interval_op(node, [L[i] for i in node.inputs], [U[i] for i in node.inputs], P)
        L[node.id], U[node.id] = _pad(l, u)
    return L, U


def interval_bounds(graph: Graph, lo, hi, params=None, outputs=None):
    """Interval-arithmetic enclosure of the requested outputs.

    Returns a list of ``(l, u)`` pairs, one per output, each of shape
    ``(D, dim)`` (or ``(dim,)`` for a single box).
    """
    lo2, hi2, single = _as_boxes(lo, hi)
    targets = _targets(graph, outputs)
    L, U = node_intervals(graph, lo2, hi2, params, targets)
    res = []
    for t in targets:
        l, u = L[t], U[t]
        res.append((l[0], u[0]) if single else (l, u))
    return res


@dataclass
class LinearBounds:
    """``A_low x + b_low <= g(x) <= A_up x + b_up`` on a box (batched)."""

    A_low: np.ndarray
    b_low: np.ndarray
    A_up: np.ndarray
    b_up: np.ndarray

    def concretize(self, lo, hi):
        c = 0.5 * (lo + hi)
        r = 0.5 * (hi - lo)
        l = np.einsum("dmn,dn->dm", self.A_low, c) - np.einsum("dmn,dn->dm", np.abs(self.A_low), r) + self.b_low
        u = np.einsum("dmn,dn->dm", self.A_up, c) + np.einsum("dmn,dn->dm", np.abs(self.A_up), r) + self.b_up
        return _pad(l, u)


class _Propagator:
    """Forward symbolic pass + backward substitution on a batch of boxes."""

    def __init__(self, graph: Graph, lo, hi, params, targets):
        _check_single_input(graph)
        self.g = graph
        self.P = graph._merged(params)
        self.lo, self.hi = lo, hi
        self.c = 0.5 * (lo + hi)
        self.r = 0.5 * (hi - lo)
        self.D, self.n = lo.shape
        self.need = _ancestors(graph, targets)
        N = len(graph.nodes)
        self.L = [None] * N
        self.U = [None] * N
        self.sym = [None] * N  # (Lw, lb, Uw, ub)
        self.rel = {}
        self._forward()

    def _conc(self, Lw, lb, Uw, ub):
        l = np.einsum("dkn,dn->dk", Lw, self.c) - np.einsum("dkn,dn->dk", np.abs(Lw), self.r) + lb
        u = np.einsum("dkn,dn->dk", Uw, self.c) + np.einsum("dkn,dn->dk", np.abs(Uw), self.r) + ub
        return l, u

    def _forward(self):
        g, P, D, n = self.g, self.P, self.D, self.n
        inp = g.inputs[0]
        eye = np.broadcast_to(np.eye(n), (D, n, n))
        z = np.zeros((D, n))
        self.sym[inp] = (eye, z, eye, z)
        self.L[inp], self.U[inp] = self.lo, self.hi
        for node in g.nodes:
            k = node.id
            if node.op == "input" or not self.need[k]:
                continue
            sym = self._sym_node(node)
            il, iu = _ibp_node(node, self.L, self.U, P, D)
            if sym is not None:
                sl, su = self._conc(*sym)
                l, u = np.maximum(sl, il), np.minimum(su, iu)
            else:
                l, u = il, iu
            u = np.maximum(u, l)
            if node.op != "constant":
                l, u = _pad(l, u)
            self.sym[k] = sym
            self.L[k], self.U[k] = l, u

    @staticmethod
    def _pick(a, Lw, lb, Uw, ub):
        """Bounds of ``a * z`` (elementwise over the node axis)."""
        pos = a >= 0
        lw = np.where(pos[..., None], Lw, Uw) * a[..., None]
        uw = np.where(pos[..., None], Uw, Lw) * a[..., None]
        lc = np.where(pos, lb, ub) * a
        uc = np.where(pos, ub, lb) * a
        return lw, lc, uw, uc

    def _sym_node(self, node):
        op, a, P, D, n = node.op, node.attrs, self.P, self.D, self.n
        S = [self.sym[i] for i in node.inputs]
        if op == "constant":
            v = np.broadcast_to(a["value"], (D, node.dim)).copy()
            zw = np.zeros((D, node.dim, n))
            return zw, v, zw, v
        if op == "affine":
            W = effective_weight(node, P)
            Wp, Wn = np.maximum(W, 0), np.minimum(W, 0)
            Lw, lb, Uw, ub = S[0]
            nLw = np.einsum("oi,din->don", Wp, Lw) + np.einsum("oi,din->don", Wn, Uw)
            nUw = np.einsum("oi,din->don", Wp, Uw) + np.einsum("oi,din->don", Wn, Lw)
            nlb = lb @ Wp.T + ub @ Wn.T
            nub = ub @ Wp.T + lb @ Wn.T
            if a["b"] is not None:
                nlb = nlb + P[a["b"]]
                nub = nub + P[a["b"]]
            return nLw, nlb, nUw, nub
        if op == "scale":
            c = a["c"]
            Lw, lb, Uw, ub = S[0]
            return (c * Lw, c * lb, c * Uw, c * ub) if c >= 0 else (c * Uw, c * ub, c * Lw, c * lb)
        if op == "add":
            return tuple(x + y for x, y in zip(S[0], S[1]))
        if op == "sub":
            (L1, l1, U1, u1), (L2, l2, U2, u2) = S
            return L1 - U2, l1 - u2, U1 - L2, u1 - l2
        if op == "sum":
            Lw, lb, Uw, ub = S[0]
            return Lw.sum(1, keepdims=True), lb.sum(1, keepdims=True), Uw.sum(1, keepdims=True), ub.sum(1, keepdims=True)
        if op == "select":
            idx = list(a["idx"])
            Lw, lb, Uw, ub = S[0]
            return Lw[:, idx], lb[:, idx], Uw[:, idx], ub[:, idx]
        if op == "concat":
            return tuple(np.concatenate([s[j] for s in S], axis=1) for j in range(4))
        i0 = node.inputs[0]
        if op in RELAXABLE_UNARY or op == "l1norm":
            rop = "abs" if op == "l1norm" else op
            al, bl, au, bu = relax(rop, self.L[i0], self.U[i0], **a)
            self.rel[node.id] = (al, bl, au, bu)
            Lw, lb, Uw, ub = S[0]
            lw1, lc1, _, _ = self._pick(al, Lw, lb, Uw, ub)
            _, _, uw2, uc2 = self._pick(au, Lw, lb, Uw, ub)
            res = (lw1, lc1 + bl, uw2, uc2 + bu)
            if op == "l1norm":
                res = tuple(x.sum(1, keepdims=True) for x in res)
            return res
        if op in ("mul", "min", "max"):
            i1 = node.inputs[1]
            ld = ud = None
            if op != "mul":
                (L1, l1, U1, u1), (L2, l2, U2, u2) = S
                ld, _ = self._conc(L1 - U2, l1 - u2, L1 - U2, l1 - u2)
                _, ud = self._conc(U1 - L2, u1 - l2, U1 - L2, u1 - l2)
            lower, upper = relax_binary(op, self.L[i0], self.U[i0], self.L[i1], self.U[i1], ld, ud)
            self.rel[node.id] = (lower, upper)
            out = []
            for (a1, a2, b), want_upper in ((lower, False), (upper, True)):
                t1 = self._pick(a1, *S[0])
                t2 = self._pick(a2, *S[1])
                if want_upper:
                    out.append((t1[2] + t2[2], t1[3] + t2[3] + b))
                else:
                    out.append((t1[0] + t2[0], t1[1] + t2[1] + b))
            return out[0][0], out[0][1], out[1][0], out[1][1]
        if op == "quadform":
            M = quadform_matrix(node, P)
            gl, bl, gu, bu = relax_quadform(M, self.L[i0], self.U[i0])
            self.rel[node.id] = (gl, bl, gu, bu)
            Lw, lb, Uw, ub = S[0]
            lw, lc, _, _ = self._pick(gl, Lw, lb, Uw, ub)
            _, _, uw, uc = self._pick(gu, Lw, lb, Uw, ub)
            return (lw.sum(1, keepdims=True), lc.sum(1, keepdims=True) + bl[:, None],
                    uw.sum(1, keepdims=True), uc.sum(1, keepdims=True) + bu[:, None])
        raise GraphError(f"no bound rule for {op!r}")

    def backward_upper(self, target: int, Lam: np.ndarray):
        """Linear upper bound ``A x + b`` of ``Lam @ z_target`` (Lam: (D, m, d))."""
        g, P = self.g, self.P
        D, m = Lam.shape[0], Lam.shape[1]
        lam = {target: Lam}
        const = np.zeros((D, m))
        A = np.zeros((D, m, self.n))

        def push(i, v):
            lam[i] = v if i not in lam else lam[i] + v

        for k in range(target, -1, -1):
            if k not in lam:
                continue
            Lk = lam.pop(k)
            node = g.nodes[k]
            op, a = node.op, node.attrs
            ins = node.inputs
            if op == "input":
                A += Lk
            elif op == "constant":
                const += Lk @ a["value"]
            elif op == "affine":
                W = effective_weight(node, P)
                push(ins[0], Lk @ W)
                if a["b"] is not None:
                    const += Lk @ P[a["b"]]
            elif op == "scale":
                push(ins[0], a["c"] * Lk)
            elif op == "add":
                push(ins[0], Lk)
                push(ins[1], Lk)
            elif op == "sub":
                push(ins[0], Lk)
                push(ins[1], -Lk)
            elif op == "sum":
                push(ins[0], np.broadcast_to(Lk, (D, m, g.nodes[ins[0]].dim)).copy())
            elif op == "select":
                v = np.zeros((D, m, g.nodes[ins[0]].dim))
                np.add.at(v, (slice(None), slice(None), list(a["idx"])), Lk)
                push(ins[0], v)
            elif op == "concat":
                start = 0
                for i in ins:
                    d = g.nodes[i].dim
                    push(i, Lk[:, :, start:start + d])
                    start += d
            elif op in RELAXABLE_UNARY or op == "l1norm":
                al, bl, au, bu = self.rel[k]
                if op == "l1norm":
                    Lk = np.broadcast_to(Lk, (D, m, g.nodes[ins[0]].dim))
                pos, neg = np.maximum(Lk, 0), np.minimum(Lk, 0)
                push(ins[0], pos * au[:, None, :] + neg * al[:, None, :])
                const += (pos * bu[:, None, :] + neg * bl[:, None, :]).sum(-1)
            elif op in ("mul", "min", "max"):
                (a1l, a2l, bl), (a1u, a2u, bu) = self.rel[k]
                pos, neg = np.maximum(Lk, 0), np.minimum(Lk, 0)
                push(ins[0], pos * a1u[:, None, :] + neg * a1l[:, None, :])
                push(ins[1], pos * a2u[:, None, :] + neg * a2l[:, None, :])
                const += (pos * bu[:, None, :] + neg * bl[:, None, :]).sum(-1)
            elif op == "quadform":
                gl, bl, gu, bu = self.rel[k]
                pos, neg = np.maximum(Lk, 0), np.minimum(Lk, 0)  # (D, m, 1)
                push(ins[0], pos * gu[:, None, :] + neg * gl[:, None, :])
                const += (pos[..., 0] * bu[:, None] + neg[..., 0] * bl[:, None])
            else:
                raise GraphError(f"no backward bound rule for {op!r}")
        return A, const

    def linear_bounds(self, target: int) -> LinearBounds:
        d = self.g.nodes[target].dim
        eye = np.broadcast_to(np.eye(d), (self.D, d, d))
        Au, bu = self.backward_upper(target, eye.copy())
        An, bn = self.backward_upper(target, -eye)
        return LinearBounds(-An, -bn, Au, bu)


def crown_bounds(graph: Graph, lo, hi, params=None, outputs=None):
    """Linear-relaxation bounds of the requested outputs on boxes.

    Returns a list (one entry per output) of ``(LinearBounds, (l, u))``; for
    a single box (1-D ``lo``) the concretized arrays are 1-D.
    """
    lo2, hi2, single = _as_boxes(lo, hi)
    targets = _targets(graph, outputs)
    prop = _Propagator(graph, lo2, hi2, params, targets)
    res = []
    for t in targets:
        lb = prop.linear_bounds(t)
        l, u = lb.concretize(lo2, hi2)
        l = np.maximum(l, prop.L[t])
        u = np.minimum(u, prop.U[t])
        u = np.maximum(u, l)
        res.append((lb, (l[0], u[0]) if single else (l, u)))
    return res


def output_bounds(graph: Graph, lo, hi, params=None, outputs=None, mode="crown"):
    """Concretized ``(l, u)`` per output, using ``mode`` in {"crown", "interval"}."""
    if mode == "interval":
        return interval_bounds(graph, lo, hi, params, outputs)
    if mode == "crown":
        return [lu for _, lu in crown_bounds(graph, lo, hi, params, outputs)]
    raise ValueError(f"unknown bounding mode {mode!r}")
