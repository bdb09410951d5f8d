"""Controllers, observers, Lyapunov candidates and the closed-loop map.

Every component owns a small graph whose parameters are namespaced when it
is inlined into a larger graph (``pi/`` for the controller, ``obs/`` for the
observer, ``V/`` for the Lyapunov candidate). Training works on the flat
dictionary of those namespaced parameters; :meth:`ClosedLoopSystem.with_params`
and :meth:`LyapunovCandidate.with_params` push a trained dictionary back into
the components.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .graph import LEAKY_SLOPE, Graph, GraphBuilder, GraphError
from .systems import Plant

EPS_DEFAULT = 0.01

CONTROLLER_PREFIX = "pi/"
OBSERVER_PREFIX = "obs/"
LYAPUNOV_PREFIX = "V/"


def mlp(in_dim: int, hidden, out_dim: int, rng: np.random.Generator, slope: float = LEAKY_SLOPE,
        out_scale: float = 1.0) -> Graph:
    """Leaky-ReLU feed-forward network with fan-in uniform initialization."""
    b = GraphBuilder()
    h = x = b.input(in_dim)
    dims = [in_dim, *hidden, out_dim]
    for k in range(len(dims) - 1):
        bound = 1.0 / np.sqrt(dims[k])
        if k == len(dims) - 2:
            bound *= out_scale
        W = b.param(f"W{k}", rng.uniform(-bound, bound, size=(dims[k + 1], dims[k])))
        bias = b.param(f"b{k}", rng.uniform(-bound, bound, size=dims[k + 1]))
        h = b.affine(h, W, bias)
        if k < len(dims) - 2:
            h = b.leaky_relu(h, slope)
    return b.build({"out": h})


def linear_net(in_dim: int, out_dim: int, K=None) -> Graph:
    """Single affine layer ``K z`` (no bias); used for hand-written policies."""
    b = GraphBuilder()
    x = b.input(in_dim)
    K = np.zeros((out_dim, in_dim)) if K is None else np.asarray(K, float)
    return b.build({"out": b.affine(x, b.param("W0", K))})


def _namespaced(prefix: str, graph: Graph | None) -> dict:
    if graph is None:
        return {}
    return {prefix + k: v for k, v in graph.trainable_params().items()}


def _strip(prefix: str, params: dict) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass(frozen=True, eq=False)
class Controller:
    """``u = clamp(phi(z) - phi(z*) + u*, lo, up)``.

    In state mode ``z = x``; in output mode ``z = [x_hat, y]`` and ``z*`` is
    ``[x*, h(x*)]``.
    """

    net: Graph
    z_star: np.ndarray
    u_star: np.ndarray
    u_lo: np.ndarray
    u_up: np.ndarray
    mode: str = "state"

    @classmethod
    def for_plant(cls, plant: Plant, net: Graph, mode: str = "state") -> "Controller":
        z_star = plant.x_star if mode == "state" else np.concatenate([plant.x_star, plant.y_star])
        if net.input_dims != (z_star.size,) or net.output_dims != (plant.nu,):
            raise GraphError(f"controller network must map R^{z_star.size} -> R^{plant.nu}")
        return cls(net, np.array(z_star, float), plant.u_star.copy(), plant.u_lo.copy(), plant.u_up.copy(), mode)

    def nodes(self, b: GraphBuilder, z: int, prefix: str = CONTROLLER_PREFIX) -> int:
        (phi,) = b.call(self.net, [z], prefix)
        (phi0,) = b.call(self.net, [b.constant(self.z_star)], prefix)
        u = b.offset(b.sub(phi, phi0), self.u_star)
        return b.clamp(u, self.u_lo, self.u_up)

    def graph(self) -> Graph:
        b = GraphBuilder()
        z = b.input(self.z_star.size)
        return b.build({"u": self.nodes(b, z, prefix="")})

    def params(self, prefix: str = CONTROLLER_PREFIX) -> dict:
        return _namespaced(prefix, self.net)

    def with_params(self, params: dict, prefix: str = CONTROLLER_PREFIX) -> "Controller":
        return replace(self, net=self.net.with_params(_strip(prefix, params)))


@dataclass(frozen=True, eq=False)
class Observer:
    """Correction ``phi(x_hat, r) - phi(x_hat, 0)`` added to the model prediction."""

    net: Graph
    nx: int
    ny: int

    @classmethod
    def for_plant(cls, plant: Plant, net: Graph) -> "Observer":
        if net.input_dims != (plant.nx + plant.ny,) or net.output_dims != (plant.nx,):
            raise GraphError(f"observer network must map R^{plant.nx + plant.ny} -> R^{plant.nx}")
        return cls(net, plant.nx, plant.ny)

    def nodes(self, b: GraphBuilder, xhat: int, r: int, prefix: str = OBSERVER_PREFIX) -> int:
        (a,) = b.call(self.net, [b.concat([xhat, r])], prefix)
        (a0,) = b.call(self.net, [b.concat([xhat, b.constant(np.zeros(self.ny))])], prefix)
        return b.sub(a, a0)

    def params(self, prefix: str = OBSERVER_PREFIX) -> dict:
        return _namespaced(prefix, self.net)

    def with_params(self, params: dict, prefix: str = OBSERVER_PREFIX) -> "Observer":
        return replace(self, net=self.net.with_params(_strip(prefix, params)))


@dataclass(frozen=True, eq=False)
class LyapunovCandidate:
    """Lyapunov candidate, zero at ``xi_star`` and positive elsewhere.

    ``nn``:        |phi(xi) - phi(xi*)| + ||(eps I + R^T R)(xi - xi*)||_1
    ``quadratic``: (xi - xi*)^T (eps I + R^T R) (xi - xi*)
    """

    kind: str
    xi_star: np.ndarray
    R: np.ndarray
    eps: float = EPS_DEFAULT
    net: Graph | None = None

    def __post_init__(self):
        n = self.xi_star.size
        if self.kind not in ("nn", "quadratic"):
            raise ValueError(f"unknown Lyapunov kind {self.kind!r}")
        if self.R.shape != (n, n):
            raise GraphError(f"R must be {n}x{n}")
        if self.kind == "nn" and (self.net is None or self.net.input_dims != (n,) or self.net.output_dims != (1,)):
            raise GraphError("nn candidate needs a network R^n -> R")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def n(self) -> int:
        return self.xi_star.size

    @property
    def M(self) -> np.ndarray:
        return self.eps * np.eye(self.n) + self.R.T @ self.R

    def nodes(self, b: GraphBuilder, xi: int, prefix: str = LYAPUNOV_PREFIX) -> int:
        rname = b.param(prefix + "R", self.R)
        d = b.offset(xi, -self.xi_star)
        if self.kind == "quadratic":
            return b.quadform(d, rname, self.eps)
        (phi,) = b.call(self.net, [xi], prefix)
        (phi0,) = b.call(self.net, [b.constant(self.xi_star)], prefix)
        return b.add(b.abs(b.sub(phi, phi0)), b.l1norm(b.affine(d, rname, gram_eps=self.eps)))

    def graph(self, prefix: str = LYAPUNOV_PREFIX) -> Graph:
        b = GraphBuilder()
        xi = b.input(self.n)
        return b.build({"V": self.nodes(b, xi, prefix)})

    def __call__(self, xi):
        v = self.graph()(xi)
        return v[..., 0]

    def params(self, prefix: str = LYAPUNOV_PREFIX) -> dict:
        out = {prefix + "R": self.R}
        out.update(_namespaced(prefix, self.net))
        return out

    def with_params(self, params: dict, prefix: str = LYAPUNOV_PREFIX) -> "LyapunovCandidate":
        R = np.array(params.get(prefix + "R", self.R), dtype=float)
        net = self.net.with_params(_strip(prefix, params)) if self.net is not None else None
        return replace(self, R=R, net=net)


def init_lyapunov(kind: str, xi_star, rng: np.random.Generator, hidden=(16, 16, 8),
                  eps: float = EPS_DEFAULT, S=None, net_scale: float = 1.0) -> LyapunovCandidate:
    """Fresh candidate; ``R`` comes from ``S`` (reference quadratic) when given."""
    xi_star = np.asarray(xi_star, float)
    n = xi_star.size
    if S is None:
        R = np.eye(n)
    else:
        S = 0.5 * (S + S.T)
        target = S - eps * np.eye(n)
        w, U = np.linalg.eigh(target)
        R = (U * np.sqrt(np.maximum(w, 0.0))) @ U.T
        if kind == "nn":
            # L1 form: ||W d||_1 with W = eps I + R^T R ~ S^(1/2)
            w, U = np.linalg.eigh(S)
            half = (U * np.sqrt(np.maximum(w, 0.0))) @ U.T - eps * np.eye(n)
            w, U = np.linalg.eigh(0.5 * (half + half.T))
            R = (U * np.sqrt(np.maximum(w, 0.0))) @ U.T
    net = mlp(n, hidden, 1, rng, out_scale=net_scale) if kind == "nn" else None
    return LyapunovCandidate(kind, xi_star, R, eps, net)


@dataclass(frozen=True, eq=False)
class ClosedLoopSystem:
    """Internal-state dynamics ``xi' = f_cl(xi)``.

    State feedback: ``xi = x``. Output feedback: ``xi = [x; e]`` with
    ``e = x_hat - x``.
    """

    plant: Plant
    controller: Controller
    observer: Observer | None = None

    def __post_init__(self):
        if self.controller.mode == "output" and self.observer is None:
            raise ValueError("output-feedback mode needs an observer")
        if self.controller.mode == "state" and self.observer is not None:
            raise ValueError("state-feedback mode takes no observer")

    @property
    def mode(self) -> str:
        return self.controller.mode

    @property
    def nxi(self) -> int:
        return self.plant.nx * (2 if self.mode == "output" else 1)

    @property
    def xi_star(self) -> np.ndarray:
        xs = self.plant.x_star
        return xs.copy() if self.mode == "state" else np.concatenate([xs, np.zeros_like(xs)])

    def nodes(self, b: GraphBuilder, xi: int) -> tuple[int, int]:
        """Returns ``(xi_next, u)`` node ids."""
        p = self.plant
        if self.mode == "state":
            u = self.controller.nodes(b, xi)
            (xn,) = b.call(p.step_graph, [xi, u], "plant/")
            return xn, u
        nx = p.nx
        x = b.select(xi, range(nx))
        e = b.select(xi, range(nx, 2 * nx))
        xhat = b.add(x, e)
        (y,) = b.call(p.obs_graph, [x], "sensor/")
        (yhat,) = b.call(p.obs_graph, [xhat], "sensor/")
        u = self.controller.nodes(b, b.concat([xhat, y]))
        (xn,) = b.call(p.step_graph, [x, u], "plant/")
        (pred,) = b.call(p.step_graph, [xhat, u], "plant/")
        corr = self.observer.nodes(b, xhat, b.sub(y, yhat))
        en = b.sub(b.add(pred, corr), xn)
        return b.concat([xn, en]), u

    def graph(self) -> Graph:
        b = GraphBuilder()
        xi = b.input(self.nxi)
        xn, u = self.nodes(b, xi)
        return b.build({"xi_next": xn, "u": u})

    def params(self) -> dict:
        out = self.controller.params()
        if self.observer is not None:
            out.update(self.observer.params())
        return out

    def with_params(self, params: dict) -> "ClosedLoopSystem":
        obs = self.observer.with_params(params) if self.observer is not None else None
        return replace(self, controller=self.controller.with_params(params), observer=obs)


# -- functional wrappers ----------------------------------------------------


def control_state(ctrl: Controller, x):
    return ctrl.graph()(x)


def control_output(ctrl: Controller, xhat, y):
    xhat, y = np.asarray(xhat, float), np.asarray(y, float)
    return ctrl.graph()(np.concatenate([xhat, y], axis=-1))


def observer_step(obs: Observer, plant: Plant, xhat, u, y):
    b = GraphBuilder()
    xh, uu, yy = b.input(plant.nx), b.input(plant.nu), b.input(plant.ny)
    (pred,) = b.call(plant.step_graph, [xh, uu], "plant/")
    (yhat,) = b.call(plant.obs_graph, [xh], "sensor/")
    out = b.add(pred, obs.nodes(b, xh, b.sub(yy, yhat)))
    return b.build([out])(xhat, u, y)


def closed_loop_step(sys: ClosedLoopSystem, xi):
    return sys.graph().forward(xi)[0]


def v_eval(V: LyapunovCandidate, xi):
    return V(xi)
