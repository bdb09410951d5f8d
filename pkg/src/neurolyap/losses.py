"""Certificate residuals and training losses.

The pointwise quantities (V, f_cl, F, H and the derivative loss) are built
into one *certificate graph* with a single input ``xi``. The sublevel value
``rho`` and the box limits are fixed (non-trainable) graph parameters, so the
same graph serves training, PGD and bound propagation. ``rho`` only receives
a gradient when :func:`loss_total` is given an anchor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .control import ClosedLoopSystem, LyapunovCandidate
from .graph import Graph, GraphBuilder

log = logging.getLogger(__name__)

RHO = "rho"
BOX_LO = "box_lo"
BOX_UP_NEG = "box_up_neg"
CERT_OUTPUTS = ("V", "xi_next", "V_next", "F", "H", "Lvdot")


@dataclass(frozen=True)
class LossWeights:
    c0: float = 1.0
    c1: float = 1.0
    c2: float = 1e-4
    c3: float = 1.0
    kappa: float = 0.001

    def __post_init__(self):
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if min(self.c1, self.c2, self.c3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")


def box_params(lo, up, rho: float) -> dict:
    lo, up = np.asarray(lo, float), np.asarray(up, float)
    if np.any(lo > up):
        raise ValueError("box has lo > up")
    return {BOX_LO: lo, BOX_UP_NEG: -up, RHO: np.array([float(rho)])}


def certificate_graph(system: ClosedLoopSystem, V: LyapunovCandidate, lo, up, rho: float,
                      kappa: float, c0: float = 1.0) -> Graph:
    """Graph ``xi -> (V, xi_next, V_next, F, H, Lvdot)``."""
    n = system.nxi
    if V.n != n:
        raise ValueError(f"Lyapunov candidate dim {V.n} != internal state dim {n}")
    b = GraphBuilder()
    for k, v in box_params(lo, up, rho).items():
        b.param(k, v, trainable=False)
    xi = b.input(n)
    v = V.nodes(b, xi)
    xn, _ = system.nodes(b, xi)
    vn = V.nodes(b, xn)
    F = b.sub(vn, b.scale(v, 1.0 - kappa))
    over = b.relu(b.affine(xn, np.eye(n), BOX_UP_NEG))
    under = b.relu(b.affine(xn, -np.eye(n), BOX_LO))
    H = b.add(b.sum(over), b.sum(under))
    gap = b.affine(v, np.array([[-1.0]]), RHO)
    L = b.relu(b.minimum(b.add(b.relu(F), b.scale(H, c0)), gap))
    return b.build(dict(zip(CERT_OUTPUTS, (v, xn, vn, F, H, L))))


class Certificate:
    """A certificate graph plus its current parameter dictionary."""

    def __init__(self, system: ClosedLoopSystem, V: LyapunovCandidate, lo, up, rho: float = 1.0,
                 weights: LossWeights | None = None):
        self.weights = weights or LossWeights()
        self.system = system
        self.V = V
        self.lo = np.asarray(lo, float).copy()
        self.up = np.asarray(up, float).copy()
        self.graph = certificate_graph(system, V, self.lo, self.up, rho, self.weights.kappa, self.weights.c0)
        self.params = dict(self.graph.params)

    @property
    def rho(self) -> float:
        return float(self.params[RHO][0])

    def set_rho(self, rho: float):
        self.params[RHO] = np.array([float(rho)])

    def set_box(self, lo, up):
        self.lo, self.up = np.asarray(lo, float).copy(), np.asarray(up, float).copy()
        self.params.update(box_params(self.lo, self.up, self.rho))

    def trainable(self) -> dict:
        return {k: self.params[k] for k in sorted(self.graph.trainable)}

    def update(self, params: dict):
        for k, v in params.items():
            if k in self.params:
                self.params[k] = np.asarray(v, float)

    def evaluate(self, xi) -> dict:
        outs = self.graph.forward(xi, params=self.params)
        res = {}
        for name, o in zip(CERT_OUTPUTS, outs):
            res[name] = o if name == "xi_next" else o[..., 0]
        return res

    def trace(self, xi):
        return self.graph.trace(xi, params=self.params)

    def values(self, tr) -> dict:
        outs = self.graph.outputs_of(tr)
        return {name: (o if name == "xi_next" else o[..., 0]) for name, o in zip(CERT_OUTPUTS, outs)}

    def components(self):
        """``(system, V)`` carrying the current parameters."""
        return self.system.with_params(self.params), self.V.with_params(self.params)


# -- pointwise functional forms --------------------------------------------------


def _cert(system, V, kappa=0.001, rho=1.0, c0=1.0, lo=None, up=None):
    n = system.nxi
    lo = np.full(n, -np.inf) if lo is None else lo
    up = np.full(n, np.inf) if up is None else up
    return Certificate(system, V, lo, up, rho, LossWeights(c0=c0, kappa=kappa))


def residual_F(system: ClosedLoopSystem, V: LyapunovCandidate, xi, kappa: float = 0.001):
    return _cert(system, V, kappa).evaluate(xi)["F"]


def box_violation_H(xi_next, lo, up):
    xi_next = np.asarray(xi_next, float)
    return (np.maximum(xi_next - up, 0.0).sum(-1) + np.maximum(np.asarray(lo) - xi_next, 0.0).sum(-1))


def loss_derivative(system, V, xi, rho: float, lo, up, kappa: float = 0.001, c0: float = 1.0):
    if not rho > 0:
        raise ValueError("rho must be positive")
    return _cert(system, V, kappa, rho, c0, lo, up).evaluate(xi)["Lvdot"]


def loss_roa(v_candidates, rho: float) -> float:
    """Sum of ``relu(V/rho - 1)`` over candidate values ``V(xi_candidate)``."""
    v = np.asarray(v_candidates, float).ravel()
    if v.size == 0:
        log.warning("loss_roa called with no candidates")
        return 0.0
    return float(np.maximum(v / rho - 1.0, 0.0).sum())


def loss_observer(system: ClosedLoopSystem, xi_next) -> float:
    """Sum over samples of the next-step estimation error norm ``||e'||_2``."""
    if system.mode != "output":
        raise ValueError("observer loss is only defined in output-feedback mode")
    xi_next = np.atleast_2d(np.asarray(xi_next, float))
    e = xi_next[:, system.plant.nx:]
    return float(np.linalg.norm(e, axis=1).sum())


def param_l1(params: dict) -> float:
    return float(sum(np.abs(v).sum() for _, v in sorted(params.items())))


def anchored_rho(cert: Certificate, anchor) -> float:
    """``gamma * V(x_b)`` for an anchor ``(x_b, gamma)``."""
    point, gamma = anchor
    return float(gamma * cert.evaluate(np.atleast_2d(point))["V"][0])


def loss_total(cert: Certificate, data, candidates=None, obs_samples=None, reduction: str = "sum",
               anchor=None, l1_exclude=(), local=None):
    """Overall surrogate loss and its gradient w.r.t. the trainable parameters.

    Returns ``(total, terms, grads)``. With ``reduction="mean"`` the
    derivative term and observer term are averaged over their samples
    instead of summed (used by minibatch training).

    ``anchor = (x_b, gamma)`` ties rho to the boundary point found by PGD,
    rho = gamma * V(x_b), and differentiates through it; the derivative term
    is then divided by rho so neither term rewards shrinking V uniformly.
    Parameters named in ``l1_exclude`` are left out of the L1 penalty.

    ``local = (points, weight)`` adds ``sum weight * L_Vdot(points)`` for
    points on small shells around the equilibrium, where L_Vdot scales with
    the shell radius; a (per-point) ``weight`` ~ 1/radius makes that term
    scale-free.
    """
    w = cert.weights
    theta = cert.trainable()
    grads = {k: np.zeros_like(v) for k, v in theta.items()}
    terms = {"derivative": 0.0, "roa": 0.0, "l1": 0.0, "observer": 0.0, "local": 0.0}
    extra = (RHO,) if anchor is not None else ()
    if anchor is not None:
        cert.set_rho(anchored_rho(cert, anchor))
    rho = cert.rho
    d_rho = 0.0  # total derivative of the loss w.r.t. rho

    def _acc(g):
        nonlocal d_rho
        for k, v in g.items():
            if k in grads:
                grads[k] = grads[k] + v
            elif k == RHO:
                d_rho += float(np.sum(v))

    def _derivative(X, weight):
        nonlocal d_rho
        tr = cert.trace(X)
        L = cert.values(tr)["Lvdot"]
        scale = np.broadcast_to(np.asarray(weight, float), (X.shape[0],)).copy()
        if reduction == "mean":
            scale /= X.shape[0]
        if anchor is not None:
            scale /= rho
            d_rho -= float(L @ scale / rho)
        _, g = cert.graph.backward(tr, {"Lvdot": scale[:, None]}, extra_params=extra)
        _acc(g)
        return float(L @ scale)

    data = np.zeros((0, cert.system.nxi)) if data is None else np.atleast_2d(np.asarray(data, float))
    if data.shape[0]:
        terms["derivative"] = _derivative(data, 1.0)
    if local is not None and len(local[0]):
        terms["local"] = _derivative(np.atleast_2d(np.asarray(local[0], float)), local[1])
    if candidates is not None and len(candidates) and w.c1 > 0:
        cand = np.atleast_2d(np.asarray(candidates, float))
        tr = cert.trace(cand)
        v = cert.values(tr)["V"]
        terms["roa"] = loss_roa(v, rho)
        active = v / rho - 1.0 > 0
        cot = np.where(active, w.c1 / rho, 0.0)[:, None]
        _, g = cert.graph.backward(tr, {"V": cot})
        _acc(g)
        if anchor is not None:
            d_rho -= float(w.c1 * np.sum(np.where(active, v, 0.0)) / rho ** 2)
    if obs_samples is not None and cert.system.mode == "output" and w.c3 > 0 and len(obs_samples):
        S = np.atleast_2d(np.asarray(obs_samples, float))
        tr = cert.trace(S)
        xn = cert.values(tr)["xi_next"]
        nx = cert.system.plant.nx
        e = xn[:, nx:]
        norms = np.linalg.norm(e, axis=1)
        scale = 1.0 / S.shape[0] if reduction == "mean" else 1.0
        terms["observer"] = float(norms.sum() * scale)
        cot = np.zeros_like(xn)
        safe = np.where(norms > 0, norms, 1.0)
        cot[:, nx:] = np.where(norms[:, None] > 0, e / safe[:, None], 0.0) * (w.c3 * scale)
        _, g = cert.graph.backward(tr, {"xi_next": cot})
        _acc(g)
    if anchor is not None and d_rho != 0.0:
        point, gamma = anchor
        tr = cert.trace(np.atleast_2d(point))
        _, g = cert.graph.backward(tr, {"V": np.array([[gamma * d_rho]])})
        for k, v in g.items():
            if k in grads:
                grads[k] = grads[k] + v
    penal = {k: v for k, v in theta.items() if k not in l1_exclude}
    terms["l1"] = param_l1(penal)
    for k, v in penal.items():
        grads[k] = grads[k] + w.c2 * np.sign(v)
    total = terms["derivative"] + terms["local"] + w.c1 * terms["roa"] + w.c2 * terms["l1"] + w.c3 * terms["observer"]
    return total, terms, grads
