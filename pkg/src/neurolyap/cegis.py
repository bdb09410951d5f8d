"""Counterexample-guided training of controller, observer and Lyapunov function.

Each outer iteration estimates the sublevel value on the boundary of the
current box, searches for violations with PGD, appends them to a capped
FIFO dataset and runs a few epochs of minibatch gradient descent on the
surrogate loss. The box starts small and grows once the attack comes back
nearly clean.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attack import PgdConfig, estimate_rho, find_counterexamples
from .control import LYAPUNOV_PREFIX, ClosedLoopSystem, LyapunovCandidate
from .graph import Graph
from .losses import Certificate, LossWeights, loss_total
from .systems import Plant

log = logging.getLogger(__name__)

RICCATI_TOL = 1e-10
RICCATI_MAX_ITER = 100_000


class RiccatiError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def riccati_solve(A, B, Q, R, tol: float = RICCATI_TOL, max_iter: int = RICCATI_MAX_ITER) -> np.ndarray:
    """Discrete algebraic Riccati equation by fixed-point iteration.

    Iterates ``S <- Q + A'SA - A'SB (R + B'SB)^-1 B'SA`` from ``S = Q``
    until the max-abs change drops below ``tol``.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(m, float)) for m in (A, B, Q, R))
    S = Q.copy()
    for _ in range(max_iter):
        SA, SB = S @ A, S @ B
        G = R + B.T @ SB
        with np.errstate(over="ignore", invalid="ignore"):
            S_new = Q + A.T @ SA - SA.T @ B @ np.linalg.solve(G, SB.T @ A)
            S_new = 0.5 * (S_new + S_new.T)
        if not np.all(np.isfinite(S_new)):
            raise RiccatiError("Riccati iteration diverged (is (A, B) stabilizable?)")
        if np.max(np.abs(S_new - S)) <= tol:
            return S_new
        S = S_new
    raise RiccatiError(f"Riccati iteration did not converge in {max_iter} iterations")


def dare_residual(S, A, B, Q, R) -> float:
    A, B, Q, R = (np.atleast_2d(np.asarray(m, float)) for m in (A, B, Q, R))
    rhs = Q + A.T @ S @ A - A.T @ S @ B @ np.linalg.solve(R + B.T @ S @ B, B.T @ S @ A)
    return float(np.max(np.abs(rhs - S)))


def lqr_gain(A, B, Q, R):
    S = riccati_solve(A, B, Q, R)
    K = np.linalg.solve(R + B.T @ S @ B, B.T @ S @ A)
    return K, S


def jacobian(graph: Graph, which: int, *xs) -> np.ndarray:
    """Jacobian of a single-output graph w.r.t. input ``which`` (row by row)."""
    tr = graph.trace(*[np.atleast_2d(x) for x in xs])
    m = graph.output_dims[0]
    rows = []
    for i in range(m):
        cot = np.zeros((1, m))
        cot[0, i] = 1.0
        grads, _ = graph.backward(tr, [cot], wrt_params=False)
        rows.append(grads[which][0])
    return np.array(rows)


def linearize(plant: Plant):
    """``(A, B)`` Jacobians of the step map at the goal."""
    A = jacobian(plant.step_graph, 0, plant.x_star, plant.u_star)
    B = jacobian(plant.step_graph, 1, plant.x_star, plant.u_star)
    return A, B


@dataclass
class ReferenceLyapunov:
    """Quadratic reference ``x'Sx (+ e'P^-1 e)`` used to place ROA candidates."""

    S: np.ndarray
    P: np.ndarray | None = None
    K: np.ndarray | None = None

    @property
    def matrix(self) -> np.ndarray:
        if self.P is None:
            return self.S
        n = self.S.shape[0]
        out = np.zeros((2 * n, 2 * n))
        out[:n, :n] = self.S
        out[n:, n:] = np.linalg.inv(self.P)
        return 0.5 * (out + out.T)

    def __call__(self, d):
        d = np.asarray(d, float)
        return np.einsum("...i,ij,...j->...", d, self.matrix, d)

    @classmethod
    def for_system(cls, system: ClosedLoopSystem, Q=None, R=None) -> "ReferenceLyapunov":
        plant = system.plant
        A, B = linearize(plant)
        Q = np.eye(plant.nx) if Q is None else Q
        R = np.eye(plant.nu) if R is None else R
        K, S = lqr_gain(A, B, Q, R)
        P = None
        if system.mode == "output":
            C = jacobian(plant.obs_graph, 0, plant.x_star)
            P = riccati_solve(A.T, C.T, np.eye(plant.nx), np.eye(plant.ny))
        return cls(S, P, K)

    def normalized(self, lo, up, fraction: float) -> "ReferenceLyapunov":
        """Rescale so the 1-level set fits inside ``fraction`` of the box half-widths."""
        M = self.matrix
        half = 0.5 * (np.asarray(up, float) - np.asarray(lo, float))
        reach = np.diag(np.linalg.inv(M))
        c = float(np.max(reach / (fraction * half) ** 2))
        P = None if self.P is None else self.P / c
        return ReferenceLyapunov(self.S * c, P, self.K)


def select_candidates(ref: ReferenceLyapunov, n: int, rng: np.random.Generator, xi_star=None,
                      level: float = 1.0) -> np.ndarray:
    """``n`` points on the ``level`` set of the reference (uniform directions)."""
    if n < 1:
        raise ValueError("need at least one candidate")
    M = ref.matrix
    d = rng.normal(size=(n, M.shape[0]))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    q = np.einsum("ni,ij,nj->n", d, M, d)
    pts = d * np.sqrt(level / q)[:, None]
    if xi_star is not None:
        pts = pts + xi_star
    return pts


def sgd_step(params: dict, grad: dict, lr: float) -> dict:
    return {k: v - lr * grad[k] if k in grad else v for k, v in params.items()}


class Optimizer:
    """SGD with optional momentum, or Adam."""

    def __init__(self, kind: str = "sgd", lr: float = 1e-3, momentum: float = 0.9,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self.betas, self.eps = betas, eps
        self.state: dict = {}
        self.t = 0

    def step(self, params: dict, grad: dict) -> dict:
        self.t += 1
        out = {}
        for k in sorted(params):
            p, g = params[k], grad.get(k)
            if g is None:
                out[k] = p
                continue
            if self.kind == "sgd":
                if self.momentum:
                    m = self.momentum * self.state.get(k, 0.0) + g
                    self.state[k] = m
                    g = m
                out[k] = p - self.lr * g
            else:
                m, v = self.state.get(k, (0.0, 0.0))
                b1, b2 = self.betas
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.state[k] = (m, v)
                mh = m / (1 - b1 ** self.t)
                vh = v / (1 - b2 ** self.t)
                out[k] = p - self.lr * mh / (np.sqrt(vh) + self.eps)
        return out


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "sgd"
    momentum: float = 0.9
    outer_iters: int = 500
    epochs: int = 2
    batch_size: int = 512
    gamma0: float = 1.0
    gamma_growth: float = 1.05
    gamma_max: float = 1.0e6
    curriculum_init: float = 0.25
    curriculum_growth: float = 1.2
    curriculum_threshold: float = 1e-4
    n_candidates: int = 256
    candidate_fraction: float = 0.5
    n_uniform: int = 256
    max_new_counterexamples: int = 2048
    dataset_cap: int = 200_000
    clean_sweeps: int = 5
    warm_start_steps: int = 0
    seed: int = 0
    anchor_rho: bool = True
    gamma_backoff: bool = True
    n_local: int = 256
    local_radius: float = 1e-3
    kappa_train: float | None = None
    reduction: str = "sum"
    pgd: PgdConfig = field(default_factory=PgdConfig)

    def __post_init__(self):
        if isinstance(self.pgd, dict):
            self.pgd = PgdConfig(**self.pgd)
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.curriculum_init <= 1:
            raise ValueError("curriculum_init must lie in (0, 1]")
        if self.curriculum_growth < 1 or self.gamma_growth < 1 or self.gamma0 < 1:
            raise ValueError("growth factors and gamma0 must be >= 1")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")
        if self.epochs < 0 or self.outer_iters < 0:
            raise ValueError("iteration counts must be nonnegative")
        if not 0 < self.local_radius <= 1 or self.n_local < 0:
            raise ValueError("local_radius must lie in (0, 1] and n_local be nonnegative")
        if self.kappa_train is not None and not 0 < self.kappa_train < 1:
            raise ValueError("kappa_train must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


HISTORY_FIELDS = ("iteration", "rho", "gamma", "box_scale", "max_violation", "n_counterexamples",
                  "dataset_size", "loss_total", "loss_derivative", "loss_roa", "loss_l1",
                  "loss_observer", "loss_local", "clean_streak", "lr")


@dataclass
class TrainResult:
    system: ClosedLoopSystem
    V: LyapunovCandidate
    rho: float
    history: list
    converged: bool
    params: dict


class FifoDataset:
    """Counterexample buffer; oldest points are dropped beyond ``cap``."""

    def __init__(self, dim: int, cap: int):
        self.cap = cap
        self.data = np.zeros((0, dim))

    def add(self, pts):
        pts = np.atleast_2d(np.asarray(pts, float))
        if pts.size:
            self.data = np.concatenate([self.data, pts])[-self.cap:]

    def __len__(self):
        return self.data.shape[0]


def fit_policy(cert: Certificate, K: np.ndarray, samples: np.ndarray, steps: int, lr: float = 1e-2):
    """Regress the controller network onto the linear policy ``u* - K (z - z*)``.

    Only parameters under the controller prefix are touched; the fit goes
    through the controller graph before clamping.
    """
    ctrl = cert.system.controller
    net = ctrl.net
    z_star = ctrl.z_star
    nx = K.shape[1]
    target = -(samples[:, :nx] - z_star[:nx]) @ K.T
    Z = samples
    if samples.shape[1] != z_star.size:
        Z = np.concatenate([samples, np.atleast_2d(cert.system.plant.observe(samples))], axis=1)
    params = dict(net.trainable_params())
    opt = Optimizer("adam", lr)
    for _ in range(steps):
        tr = net.trace(Z, params=params)
        tr0 = net.trace(z_star[None, :], params=params)
        out = net.outputs_of(tr)[0] - net.outputs_of(tr0)[0]
        err = out - target
        g_out = 2.0 * err / Z.shape[0]
        _, g1 = net.backward(tr, [g_out])
        _, g0 = net.backward(tr0, [-g_out.sum(0, keepdims=True)])
        grad = {k: g1.get(k, 0.0) + g0.get(k, 0.0) for k in params}
        params = opt.step(params, grad)
    cert.update({"pi/" + k: v for k, v in params.items()})


def _box(lo, up, scale):
    c = 0.5 * (lo + up)
    h = 0.5 * (up - lo) * scale
    return c - h, c + h


def train(system: ClosedLoopSystem, V: LyapunovCandidate, lo, up, cfg: TrainConfig,
          weights: LossWeights | None = None, ref: ReferenceLyapunov | None = None,
          callback=None) -> TrainResult:
    """Run the counterexample-guided training loop on the final box [lo, up]."""
    weights = weights or LossWeights()
    if cfg.kappa_train is not None:
        weights = replace(weights, kappa=cfg.kappa_train)
    lo, up = np.asarray(lo, float), np.asarray(up, float)
    rng = np.random.default_rng(cfg.seed)
    xi_star = system.xi_star
    n = system.nxi
    cert = Certificate(system, V, lo, up, 1.0, weights)

    if ref is None:
        ref = ReferenceLyapunov.for_system(system)
    ref_n = ref.normalized(lo, up, cfg.candidate_fraction)
    candidates = select_candidates(ref_n, cfg.n_candidates, rng, xi_star) if cfg.n_candidates else None

    if cfg.warm_start_steps > 0 and ref.K is not None:
        samples = lo + (up - lo) * rng.uniform(size=(4096, n))
        if system.mode == "output":
            samples = samples[:, :system.plant.nx]
        fit_policy(cert, ref.K, samples, cfg.warm_start_steps)

    opt = Optimizer(cfg.optimizer, cfg.lr, cfg.momentum)
    # with an anchored rho the Lyapunov scale is set by R alone; keep it out of the L1 penalty
    l1_exclude = (LYAPUNOV_PREFIX + "R",) if cfg.anchor_rho else ()
    data = FifoDataset(n, cfg.dataset_cap)
    history = []
    gamma = cfg.gamma0
    gamma_clean = None  # last gamma whose sweep was clean
    gamma_frozen = False
    scale = cfg.curriculum_init
    streak = 0
    diverged_once = False
    converged = False
    rho = 0.0

    for it in range(cfg.outer_iters):
        blo, bup = _box(lo, up, scale)
        cert.set_box(blo, bup)
        rho, xb = estimate_rho(cert, blo, bup, gamma, cfg.pgd, rng, return_point=True)
        rho = max(rho, 1e-12)
        cert.set_rho(rho)
        anchor = (xb, gamma) if cfg.anchor_rho and rho > 1e-12 else None
        cex = find_counterexamples(cert, blo, bup, cfg.pgd, rng, center=xi_star)
        data.add(cex.points[:cfg.max_new_counterexamples])
        if cfg.n_uniform:
            data.add(blo + (bup - blo) * rng.uniform(size=(cfg.n_uniform, n)))

        at_final = scale >= 1.0
        if len(cex) == 0:
            streak = streak + 1 if at_final else 0
        else:
            streak = 0
        if streak >= cfg.clean_sweeps:
            converged = True
            history.append(_record(it, rho, gamma, scale, cex, data, {}, 0.0, streak, opt.lr))
            break

        obs = blo + (bup - blo) * rng.uniform(size=(cfg.batch_size, n)) if system.mode == "output" else None
        local = None
        if cfg.n_local:
            d = rng.normal(size=(cfg.n_local, n))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            # radii log-uniform over one decade below local_radius
            rad = cfg.local_radius * 10.0 ** -rng.uniform(size=(cfg.n_local, 1))
            local = (xi_star + rad * 0.5 * (up - lo) * d, 1.0 / rad[:, 0])
        # candidates shrink with the curriculum box so they stay inside it
        cand_now = None if candidates is None else xi_star + scale * (candidates - xi_star)
        snapshot = cert.trainable()
        last_total, last_terms = 0.0, {}
        for _ in range(cfg.epochs):
            perm = rng.permutation(len(data))
            for s in range(0, len(perm), cfg.batch_size):
                batch = data.data[np.sort(perm[s:s + cfg.batch_size])]
                total, terms, grads = loss_total(cert, batch, cand_now, obs, reduction=cfg.reduction,
                                                 anchor=anchor, l1_exclude=l1_exclude, local=local)
                if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    if diverged_once:
                        raise TrainingDiverged(f"non-finite loss at outer iteration {it}")
                    diverged_once = True
                    cert.update(snapshot)
                    opt = Optimizer(cfg.optimizer, opt.lr * 0.5, cfg.momentum)
                    log.warning("non-finite loss; restored snapshot and halved lr to %g", opt.lr)
                    break
                cert.update(opt.step(cert.trainable(), grads))
                last_total, last_terms = total, terms
            else:
                continue
            break
        snapshot = cert.trainable()

        history.append(_record(it, rho, gamma, scale, cex, data, last_terms, last_total, streak, opt.lr))
        if callback is not None:
            callback(history[-1])

        if at_final and len(cex) == 0:
            gamma_clean = gamma
            if not gamma_frozen:
                gamma = min(gamma * cfg.gamma_growth, cfg.gamma_max)
        elif at_final and cfg.gamma_backoff and gamma_clean is not None and gamma > gamma_clean:
            # the last growth step exposed violations: return to the clean value and stop growing
            gamma, gamma_frozen = gamma_clean, True
        if cex.max_violation < cfg.curriculum_threshold and not at_final:
            scale = min(1.0, scale * cfg.curriculum_growth)

    sys_t, V_t = cert.components()
    return TrainResult(sys_t, V_t, float(rho), history, converged, cert.trainable())


def _record(it, rho, gamma, scale, cex, data, terms, total, streak, lr):
    return {
        "iteration": it, "rho": float(rho), "gamma": float(gamma), "box_scale": float(scale),
        "max_violation": float(cex.max_violation), "n_counterexamples": len(cex),
        "dataset_size": len(data), "loss_total": float(total),
        "loss_derivative": float(terms.get("derivative", 0.0)), "loss_roa": float(terms.get("roa", 0.0)),
        "loss_l1": float(terms.get("l1", 0.0)), "loss_observer": float(terms.get("observer", 0.0)),
        "loss_local": float(terms.get("local", 0.0)), "clean_streak": streak, "lr": float(lr),
    }


def history_is_finite(history) -> bool:
    return all(math.isfinite(r["loss_total"]) for r in history)
