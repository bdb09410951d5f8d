"""Benchmark plants as discrete-time step graphs.

Each plant exposes a two-input step graph ``f(x, u)`` and a one-input
observation graph ``h(x)``, both built from the graph primitives so the
verifier can bound them. All dynamics use explicit Euler.

The step graphs are written so that ``f(x*, u*) == x*`` holds exactly in
floating point (e.g. the quadrotor gravity term is ``(u1 + u2 - 2 u*) / m``
rather than ``(u1 + u2) / m - g``); the local equilibrium certificate in the
verifier relies on that.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from .graph import Graph, GraphBuilder, GraphError

N_LIDAR_RAYS = 6
LIDAR_MAX_RANGE = 5.0
LIDAR_FAN = 0.15 * np.pi
GROUND_LEVEL = -1.0


@dataclass(frozen=True)
class PhysicalParams:
    """Named physical constants (SI units) of one plant."""

    system: str
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.values.items():
            if k != "curvature" and not v > 0:
                raise ValueError(f"{self.system}: parameter {k} must be positive, got {v}")

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kw) -> "PhysicalParams":
        unknown = set(kw) - set(self.values)
        if unknown:
            raise KeyError(f"unknown parameters for {self.system}: {sorted(unknown)}")
        return replace(self, values={**self.values, **{k: float(v) for k, v in kw.items()}})

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_PARAMS = {
    "single_integrator": {"dt": 0.1},
    "pendulum": {"m": 0.15, "l": 0.5, "g": 9.81, "b": 0.1, "dt": 0.05},
    "path_tracking": {"v": 2.0, "L": 1.0, "dt": 0.05},
    "quadrotor2d": {"m": 0.486, "l": 0.25, "I": 0.00383, "g": 9.81, "dt": 0.01},
    "quadrotor2d_vertical": {"m": 0.486, "l": 0.25, "I": 0.00383, "g": 9.81, "dt": 0.01},
}


def physical_params(system: str, **overrides) -> PhysicalParams:
    if system not in DEFAULT_PARAMS:
        raise KeyError(f"unknown system {system!r}")
    return PhysicalParams(system, dict(DEFAULT_PARAMS[system])).with_overrides(**overrides)


def torque_presets(p: PhysicalParams) -> dict:
    """Named symmetric input limits (the bound on |u|)."""
    if p.system == "pendulum":
        mgl = p["m"] * p["g"] * p["l"]
        return {"easy": 8.15 * mgl, "challenging": mgl / 3.0, "mgl_1.02": 1.02 * mgl, "mgl_1.36": 1.36 * mgl}
    if p.system == "path_tracking":
        ratio = p["L"] / p["v"]
        return {"default": 1.68 * ratio, "tight": ratio}
    raise KeyError(f"no torque presets for {p.system}")


def lidar_angles(n: int = N_LIDAR_RAYS) -> np.ndarray:
    return np.linspace(-LIDAR_FAN, LIDAR_FAN, n)


@dataclass(frozen=True, eq=False)
class Plant:
    name: str
    nx: int
    nu: int
    ny: int
    step_graph: Graph
    obs_graph: Graph
    u_lo: np.ndarray
    u_up: np.ndarray
    x_star: np.ndarray
    u_star: np.ndarray
    params: PhysicalParams
    observation: str = "state"

    def __post_init__(self):
        if np.any(self.u_lo > self.u_star) or np.any(self.u_star > self.u_up):
            raise ValueError(f"{self.name}: goal input outside the limits")
        res = np.max(np.abs(self.step(self.x_star, self.u_star) - self.x_star))
        if res > 1e-9:
            raise ValueError(f"{self.name}: (x*, u*) is not an equilibrium (residual {res:.3g})")

    def step(self, x, u):
        return self.step_graph(x, u)

    def observe(self, x):
        return self.obs_graph(x)

    @property
    def y_star(self) -> np.ndarray:
        return np.asarray(self.observe(self.x_star))

    def check_region(self, lo, hi):
        """Raise if a state box leaves the domain where the graphs are bounded."""
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        if self.observation == "lidar":
            th = 1 if self.name == "quadrotor2d_vertical" else 2
            phi = lidar_angles()
            if np.any(hi[th] - phi >= np.pi / 2) or np.any(lo[th] - phi <= -np.pi / 2):
                raise GraphError("lidar rays may become parallel to the ground inside the region")


# -- step graphs ------------------------------------------------------------


def _single_integrator_graph(p):
    b = GraphBuilder()
    x, u = b.input(2), b.input(2)
    xn = b.affine(b.concat([x, u]), np.hstack([np.eye(2), p["dt"] * np.eye(2)]))
    return b.build({"x_next": xn})


def _pendulum_graph(p):
    m, l, g, damp, dt = p["m"], p["l"], p["g"], p["b"], p["dt"]
    b = GraphBuilder()
    x, u = b.input(2), b.input(1)
    s = b.sin(b.select(x, [0]))
    inertia = m * l * l
    # [x0, x1, sin(theta), u] -> next state
    A = np.array([[1.0, dt, 0.0, 0.0],
                  [0.0, 1.0 - dt * damp / inertia, dt * g / l, dt / inertia]])
    xn = b.affine(b.concat([x, s, u]), A)
    return b.build({"x_next": xn})


def _path_tracking_graph(p):
    v, L, dt = p["v"], p["L"], p["dt"]
    b = GraphBuilder()
    x, u = b.input(2), b.input(1)
    s = b.sin(b.select(x, [1]))
    t = b.tan(u)
    A = np.array([[1.0, 0.0, dt * v, 0.0],
                  [0.0, 1.0, 0.0, dt * v / L]])
    xn = b.affine(b.concat([x, s, t]), A)
    return b.build({"x_next": xn})


def _quadrotor_accels(b, th, u, p, u_hover):
    """Nodes for (a_x, a_y, a_theta) given theta and rotor thrusts."""
    m, arm, inertia = p["m"], p["l"], p["I"]
    total = b.affine(u, np.array([[1.0, 1.0]]))
    excess = b.affine(u, np.array([[1.0, 1.0]]), np.array([-2.0 * u_hover]))
    s, c = b.sin(th), b.cos(th)
    ax = b.scale(b.mul(total, s), -1.0 / m)
    # (u1+u2) cos(th) - m g  ==  (u1+u2-2u*) cos(th) + 2u* (cos(th) - 1)
    ay = b.affine(b.concat([b.mul(excess, c), c]), np.array([[1.0 / m, 2.0 * u_hover / m]]),
                  np.array([-2.0 * u_hover / m]))
    at = b.scale(b.sub(b.select(u, [0]), b.select(u, [1])), arm / inertia)
    return ax, ay, at


def _quadrotor_graph(p):
    dt = p["dt"]
    u_hover = 0.5 * p["m"] * p["g"]
    b = GraphBuilder()
    x, u = b.input(6), b.input(2)
    ax, ay, at = _quadrotor_accels(b, b.select(x, [2]), u, p, u_hover)
    A = np.zeros((6, 9))
    A[:, :6] = np.eye(6)
    A[0, 3] = A[1, 4] = A[2, 5] = dt
    A[3, 6] = A[4, 7] = A[5, 8] = dt
    xn = b.affine(b.concat([x, ax, ay, at]), A)
    return b.build({"x_next": xn})


def _quadrotor_vertical_graph(p):
    # state [y, theta, ydot, thetadot]; the horizontal channel is dropped
    dt = p["dt"]
    u_hover = 0.5 * p["m"] * p["g"]
    b = GraphBuilder()
    x, u = b.input(4), b.input(2)
    _, ay, at = _quadrotor_accels(b, b.select(x, [1]), u, p, u_hover)
    A = np.zeros((4, 6))
    A[:, :4] = np.eye(4)
    A[0, 2] = A[1, 3] = dt
    A[2, 4] = A[3, 5] = dt
    xn = b.affine(b.concat([x, ay, at]), A)
    return b.build({"x_next": xn})


# -- observation graphs --------------------------------------------------------


def _identity_obs(n):
    b = GraphBuilder()
    x = b.input(n)
    return b.build({"y": b.select(x, range(n))})


def _angle_obs():
    b = GraphBuilder()
    x = b.input(2)
    return b.build({"y": b.select(x, [0])})


def _lidar_obs(n, y_idx, th_idx):
    phi = lidar_angles()
    k = len(phi)
    b = GraphBuilder()
    x = b.input(n)
    height = b.affine(b.select(x, [y_idx]), np.ones((k, 1)), np.full(k, -GROUND_LEVEL))
    rel = b.affine(b.select(x, [th_idx]), np.ones((k, 1)), -phi)
    dist = b.mul(height, b.reciprocal(b.cos(rel)))
    return b.build({"y": b.clamp(dist, 0.0, LIDAR_MAX_RANGE)})


# -- assembly -------------------------------------------------------------------

_GRAPHS = {
    "single_integrator": (_single_integrator_graph, 2, 2),
    "pendulum": (_pendulum_graph, 2, 1),
    "path_tracking": (_path_tracking_graph, 2, 1),
    "quadrotor2d": (_quadrotor_graph, 6, 2),
    "quadrotor2d_vertical": (_quadrotor_vertical_graph, 4, 2),
}


def make_plant(name: str, params: PhysicalParams | None = None, u_limit=None,
               observation: str = "state") -> Plant:
    """Build a benchmark plant.

    ``u_limit`` is a symmetric bound on |u| (scalar or preset name) for the
    pendulum/path-tracking plants, or an explicit ``(lo, up)`` pair. The
    quadrotors default to per-rotor thrust in ``[0, 1.5 m g]``; the single
    integrator is unconstrained.
    """
    if name not in _GRAPHS:
        raise KeyError(f"unknown plant {name!r}")
    p = params if params is not None else physical_params(name)
    if p.system != name:
        raise ValueError(f"parameters for {p.system} given to {name}")
    build, nx, nu = _GRAPHS[name]
    step = build(p)
    x_star = np.zeros(nx)
    if name.startswith("quadrotor"):
        u_star = np.full(nu, 0.5 * p["m"] * p["g"])
    else:
        u_star = np.zeros(nu)

    if isinstance(u_limit, str):
        u_limit = torque_presets(p)[u_limit]
    if u_limit is None:
        if name == "single_integrator":
            lo, up = np.full(nu, -np.inf), np.full(nu, np.inf)
        elif name.startswith("quadrotor"):
            lo, up = np.zeros(nu), np.full(nu, 1.5 * p["m"] * p["g"])
        else:
            key = "easy" if name == "pendulum" else "default"
            lim = torque_presets(p)[key]
            lo, up = np.full(nu, -lim), np.full(nu, lim)
    elif np.ndim(u_limit) == 0:
        lo, up = np.full(nu, -float(u_limit)), np.full(nu, float(u_limit))
    else:
        lo, up = (np.broadcast_to(np.asarray(v, float), (nu,)).copy() for v in u_limit)
    if name == "path_tracking" and (np.any(up >= np.pi / 2) or np.any(lo <= -np.pi / 2)):
        raise GraphError("steering limits must stay inside (-pi/2, pi/2)")

    if observation == "state":
        obs = _identity_obs(nx)
    elif observation == "angle":
        if name != "pendulum":
            raise ValueError("angle observation is only defined for the pendulum")
        obs = _angle_obs()
    elif observation == "lidar":
        if name == "quadrotor2d":
            obs = _lidar_obs(6, 1, 2)
        elif name == "quadrotor2d_vertical":
            obs = _lidar_obs(4, 0, 1)
        else:
            raise ValueError("lidar observation is only defined for the quadrotors")
    else:
        raise ValueError(f"unknown observation {observation!r}")
    ny = obs.output_dims[0]
    return Plant(name, nx, nu, ny, step, obs, lo, up, x_star, u_star, p, observation)


@lru_cache(maxsize=None)
def _default(name, observation="state"):
    return make_plant(name, observation=observation)


def single_integrator_step(x, u):
    return _default("single_integrator").step(x, u)


def pendulum_step(x, u):
    return _default("pendulum").step(x, u)


def path_tracking_step(x, u):
    return _default("path_tracking").step(x, u)


def quadrotor2d_step(x, u):
    return _default("quadrotor2d").step(x, u)


def observe_angle(x):
    return _default("pendulum", "angle").observe(x)


def observe_lidar(x):
    return _default("quadrotor2d", "lidar").observe(x)
