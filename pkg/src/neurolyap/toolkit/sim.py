"""Closed-loop rollouts, 2-D sublevel-set slices and Monte-Carlo volumes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..control import ClosedLoopSystem, LyapunovCandidate


@dataclass
class Trajectory:
    t: np.ndarray  # (T+1,)
    xi: np.ndarray  # (T+1, n_xi)
    u: np.ndarray  # (T+1, nu); the last row is the input that would be applied next
    V: np.ndarray  # (T+1,)
    truncated: bool = False
    nx: int | None = None  # set in output mode: xi = [x; e]

    def __len__(self):
        return self.t.size

    @property
    def x(self):
        return self.xi if self.nx is None else self.xi[:, :self.nx]

    @property
    def e(self):
        return None if self.nx is None else self.xi[:, self.nx:]

    @property
    def xhat(self):
        return None if self.nx is None else self.x + self.e

    def columns(self):
        n = self.xi.shape[1]
        names = ["t"] + [f"xi{i}" for i in range(n)] + [f"u{i}" for i in range(self.u.shape[1])] + ["V"]
        data = np.column_stack([self.t, self.xi, self.u, self.V])
        if self.nx is not None:
            names += [f"xhat{i}" for i in range(self.nx)]
            data = np.column_stack([data, self.xhat])
        return names, data


def simulate(system: ClosedLoopSystem, V: LyapunovCandidate, xi0, horizon: int) -> Trajectory:
    """Iterate the closed loop ``horizon`` steps from ``xi0``.

    A non-finite state stops the rollout; the returned arrays then hold only
    the finite prefix and ``truncated`` is set.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    g = system.graph()
    xi = np.asarray(xi0, float).reshape(-1)
    if xi.size != system.nxi:
        raise ValueError(f"initial state must have {system.nxi} entries")
    xs, us = [xi], []
    truncated = False
    for _ in range(horizon):
        nxt, u = g.forward(xi)
        us.append(u)
        if not np.all(np.isfinite(nxt)):
            truncated = True
            break
        xi = nxt
        xs.append(xi)
    X = np.array(xs)
    us.append(g.forward(xi)[1] if not truncated else np.full_like(us[-1], np.nan))
    U = np.array(us[:len(xs)])
    return Trajectory(np.arange(len(xs), dtype=float), X, U, V(X), truncated,
                      None if system.mode == "state" else system.plant.nx)


def rollout_batch(system: ClosedLoopSystem, V: LyapunovCandidate, X0, horizon: int):
    """Vectorised rollouts; returns (states (T+1, N, n), V values (T+1, N))."""
    g = system.graph()
    X = np.atleast_2d(np.asarray(X0, float))
    xs = [X]
    for _ in range(horizon):
        X = g.forward(X)[0]
        xs.append(X)
    S = np.array(xs)
    return S, V(S.reshape(-1, S.shape[-1])).reshape(S.shape[:2])


@dataclass
class RoaSlice:
    dims: tuple
    a: np.ndarray  # grid values along dims[0]
    b: np.ndarray  # grid values along dims[1]
    V: np.ndarray  # (n, n), indexed [i_a, i_b]
    inside: np.ndarray  # bool (n, n)
    rho: float

    def rows(self):
        A, B = np.meshgrid(self.a, self.b, indexing="ij")
        return np.column_stack([A.ravel(), B.ravel(), self.V.ravel(), self.inside.ravel().astype(int)])

    def header(self):
        i, j = self.dims
        return [f"xi{i}", f"xi{j}", "V", "inside"]


def roa_slice(V: LyapunovCandidate, rho: float, lo, up, dims, fixed=None, n: int = 101) -> RoaSlice:
    """V on an ``n x n`` grid over two coordinates of B, others held at ``fixed``.

    A cell is inside the certified set iff V < rho (the grid lies in B).
    """
    lo, up = np.asarray(lo, float), np.asarray(up, float)
    i, j = (int(d) for d in dims)
    if i == j or not (0 <= i < lo.size and 0 <= j < lo.size):
        raise ValueError(f"slice dims must be two distinct indices below {lo.size}")
    if n < 2:
        raise ValueError("grid needs at least 2 points per side")
    base = np.array(V.xi_star, float) if fixed is None else np.asarray(fixed, float).copy()
    if base.size != lo.size:
        raise ValueError(f"fixed values must have {lo.size} entries")
    a = np.linspace(lo[i], up[i], n)
    b = np.linspace(lo[j], up[j], n)
    A, B = np.meshgrid(a, b, indexing="ij")
    P = np.repeat(base[None, :], n * n, axis=0)
    P[:, i], P[:, j] = A.ravel(), B.ravel()
    v = V(P)
    in_box = np.all((P >= lo) & (P <= up), axis=1)
    inside = (v < rho) & in_box
    return RoaSlice((i, j), a, b, v.reshape(n, n), inside.reshape(n, n), float(rho))


@dataclass
class VolumeEstimate:
    volume: float
    half_width: float  # 95% normal-approximation binomial interval
    fraction: float
    n: int


def mc_volume(V: LyapunovCandidate, rho: float, lo, up, n: int = 100_000, seed: int = 0,
              chunk: int = 200_000) -> VolumeEstimate:
    """Monte-Carlo volume of {xi in B : V(xi) < rho}."""
    if n < 1000:
        raise ValueError("use at least 1000 samples")
    lo, up = np.asarray(lo, float), np.asarray(up, float)
    rng = np.random.default_rng(seed)
    hits, done = 0, 0
    while done < n:
        m = min(chunk, n - done)
        X = lo + (up - lo) * rng.uniform(size=(m, lo.size))
        hits += int(np.count_nonzero(V(X) < rho))
        done += m
    p = hits / n
    vol_b = float(np.prod(up - lo))
    hw = 1.96 * np.sqrt(p * (1 - p) / n) * vol_b
    return VolumeEstimate(p * vol_b, float(hw), p, n)
