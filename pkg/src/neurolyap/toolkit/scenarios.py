"""Named benchmark scenarios and the hand-written single-integrator bundle."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..cegis import ReferenceLyapunov
from ..control import (
    EPS_DEFAULT,
    ClosedLoopSystem,
    Controller,
    LyapunovCandidate,
    Observer,
    init_lyapunov,
    linear_net,
    mlp,
)
from ..losses import LossWeights
from ..systems import make_plant, physical_params

PI = np.pi


@dataclass(frozen=True)
class Scenario:
    name: str
    plant: str
    box: tuple
    kappa: float = 0.001
    observation: str = "state"
    torque: object = None
    lyapunov: str = "nn"
    lyapunov_hidden: tuple = (16, 16, 8)
    controller_hidden: tuple = (8, 8, 8, 8)
    observer_hidden: tuple = (8, 8)
    plant_params: dict = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return "state" if self.observation == "state" else "output"

    def with_overrides(self, **kw) -> "Scenario":
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in kw.items() if v is not None}
        return replace(self, **kw)


SCENARIOS = {
    "single-integrator": Scenario("single-integrator", "single_integrator", (1.0, 1.0), kappa=0.1,
                                  lyapunov="quadratic", controller_hidden=(8, 8)),
    "pendulum-state": Scenario("pendulum-state", "pendulum", (12.0, 12.0), torque="easy"),
    "path-tracking": Scenario("path-tracking", "path_tracking", (3.0, 3.0), torque="default"),
    "quadrotor-state": Scenario("quadrotor-state", "quadrotor2d", (0.75, 0.75, PI / 2, 4.0, 4.0, 3.0),
                                lyapunov="quadratic", controller_hidden=(8, 8)),
    "pendulum-output": Scenario("pendulum-output", "pendulum", (0.4 * PI, 0.4 * PI, 0.1 * PI, 0.1 * PI),
                                observation="angle", torque="challenging", lyapunov="quadratic",
                                controller_hidden=(8, 8, 8), observer_hidden=(8, 8)),
    "quadrotor-output": Scenario("quadrotor-output", "quadrotor2d_vertical",
                                 (0.1, 0.2 * PI, 0.2, 0.2 * PI, 0.05, 0.1 * PI, 0.1, 0.1 * PI),
                                 observation="lidar", lyapunov="quadratic", controller_hidden=(8, 8),
                                 observer_hidden=(8, 8)),
}


@dataclass
class Bundle:
    """Everything the trainer and verifier need for one problem instance."""

    scenario: Scenario
    system: ClosedLoopSystem
    V: LyapunovCandidate
    lo: np.ndarray
    up: np.ndarray
    weights: LossWeights
    rho: float = 0.0
    meta: dict = field(default_factory=dict)


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None


def build(scenario: Scenario | str, seed: int, weights: LossWeights | None = None,
          lyapunov_scale: float = 0.1) -> Bundle:
    """Fresh (untrained) closed loop and Lyapunov candidate for a scenario."""
    sc = get_scenario(scenario) if isinstance(scenario, str) else scenario
    rng = np.random.default_rng(seed)
    params = physical_params(sc.plant, **sc.plant_params)
    plant = make_plant(sc.plant, params, u_limit=sc.torque, observation=sc.observation)
    half = np.asarray(sc.box, float)
    n_xi = plant.nx * (1 if sc.mode == "state" else 2)
    if half.size != n_xi:
        raise ValueError(f"{sc.name}: box has {half.size} entries, internal state has {n_xi}")
    lo, up = -half, half
    plant.check_region(lo[:plant.nx], up[:plant.nx])
    if sc.mode == "state":
        ctrl = Controller.for_plant(plant, mlp(plant.nx, sc.controller_hidden, plant.nu, rng))
        system = ClosedLoopSystem(plant, ctrl)
    else:
        nz = plant.nx + plant.ny
        ctrl = Controller.for_plant(plant, mlp(nz, sc.controller_hidden, plant.nu, rng), "output")
        obs = Observer.for_plant(plant, mlp(nz, sc.observer_hidden, plant.nx, rng, out_scale=0.1))
        system = ClosedLoopSystem(plant, ctrl, obs)
    ref = ReferenceLyapunov.for_system(system).normalized(lo, up, 1.0)
    V = init_lyapunov(sc.lyapunov, system.xi_star, rng, sc.lyapunov_hidden, EPS_DEFAULT, S=ref.matrix,
                      net_scale=lyapunov_scale)
    weights = weights or LossWeights(kappa=sc.kappa)
    return Bundle(sc, system, V, lo, up, weights)


def example1_bundle() -> Bundle:
    """Single integrator with the fixed policy u = -x and V = x'x on [-1, 1]^2."""
    sc = replace(SCENARIOS["single-integrator"], name="example1")
    plant = make_plant("single_integrator")
    ctrl = Controller.for_plant(plant, linear_net(2, 2, -np.eye(2)))
    system = ClosedLoopSystem(plant, ctrl)
    eps = EPS_DEFAULT
    V = LyapunovCandidate("quadratic", np.zeros(2), np.sqrt(1.0 - eps) * np.eye(2), eps)
    return Bundle(sc, system, V, -np.ones(2), np.ones(2), LossWeights(kappa=0.1), rho=1.0)
