"""Branch-and-bound verification of the sublevel-set certificate.

For a sublevel value rho every point of the box B must satisfy

    (F(xi) <= 0  and  f_cl(xi) in B)   or   V(xi) >= rho.

Each subdomain is checked clause by clause with sound output bounds; what
cannot be decided is searched for a concrete violation and otherwise split.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..losses import Certificate
from .bounds import crown_bounds, output_bounds
from .local import LocalCertificate, local_certificate

VERIFIED_A = "verified-clause-A"
VERIFIED_B = "verified-clause-B"
UNDECIDED = "undecided"
FALSIFIED = "falsified"
TOO_SMALL = "too-small"

MIDDLE_FRACTION = 0.6
MIN_WIDTH_FRAC = 1e-5


@dataclass(frozen=True)
class Budget:
    max_domains: int = 2_000_000
    max_depth: int = 60
    time_limit: float = float("inf")
    batch: int = 512
    order: str = "deepest"  # or "widest"
    mode: str = "crown"  # or "interval"
    attack_points: int = 2
    attack_iters: int = 3

    def __post_init__(self):
        if self.order not in ("deepest", "widest"):
            raise ValueError(f"unknown worklist order {self.order!r}")
        if self.mode not in ("crown", "interval"):
            raise ValueError(f"unknown bounding mode {self.mode!r}")


@dataclass
class SubDomain:
    lo: np.ndarray
    up: np.ndarray
    depth: int = 0
    status: str = "open"

    def __post_init__(self):
        if np.any(self.lo > self.up):
            raise ValueError("subdomain has lo > up")


@dataclass
class CertificateResult:
    verdict: str  # verified | falsified | unknown
    rho: float
    counterexample: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    @property
    def verified(self) -> bool:
        return self.verdict == "verified"


# -- pointwise condition ------------------------------------------------------


def condition_holds(cert: Certificate, xi, rho: float, require_next_in_box: bool = True):
    """Direct (floating-point) evaluation of the verification condition."""
    vals = _eval_at(cert, xi, rho)
    return _holds(vals, cert.lo, cert.up, rho, require_next_in_box)


def _eval_at(cert, xi, rho):
    old = cert.rho
    cert.set_rho(rho if np.isfinite(rho) else 1.0)
    try:
        return cert.evaluate(np.atleast_2d(xi))
    finally:
        cert.set_rho(old)


def _holds(vals, lo, up, rho, require_next_in_box):
    xn = vals["xi_next"]
    inside = np.all((xn >= lo) & (xn <= up), axis=-1) if require_next_in_box else True
    return ((vals["F"] <= 0) & inside) | (vals["V"] >= rho)


# -- branching ----------------------------------------------------------------


def branch(lo, up, root_width, xi_star, min_width_frac: float = MIN_WIDTH_FRAC):
    """Split a box in two along its widest (root-normalized) dimension.

    Returns ``None`` when every width is at the minimum.
    """
    lo, up = np.asarray(lo, float), np.asarray(up, float)
    w = up - lo
    rel = w / root_width
    d = int(np.argmax(rel))
    if rel[d] <= min_width_frac:
        return None
    a, b = lo[d], up[d]
    margin = 0.5 * (1.0 - MIDDLE_FRACTION) * (b - a)
    s = xi_star[d]
    split = s if (a + margin < s < b - margin) else 0.5 * (a + b)
    up1 = up.copy()
    up1[d] = split
    lo2 = lo.copy()
    lo2[d] = split
    return (lo, up1), (lo2, up)


# -- clause checks ----------------------------------------------------------------


def _bounds(cert: Certificate, lo, up, names, mode):
    res = output_bounds(cert.graph, lo, up, params=cert.params, outputs=list(names), mode=mode)
    return dict(zip(names, res))


def check_domains(cert: Certificate, rho: float, lo, up, mode: str = "crown",
                  require_next_in_box: bool = True, local: LocalCertificate | None = None):
    """Clause-wise sound check on a batch of boxes (no falsification).

    Returns a status array of VERIFIED_A / VERIFIED_B / UNDECIDED.
    """
    lo, up = np.atleast_2d(lo), np.atleast_2d(up)
    D = lo.shape[0]
    status = np.full(D, UNDECIDED, dtype=object)
    if local is not None:
        status[local.contains(lo, up)] = VERIFIED_A
    todo = np.nonzero(status == UNDECIDED)[0]
    if todo.size == 0:
        return status
    names = ("V", "F", "xi_next") if require_next_in_box else ("V", "F")
    b = _bounds(cert, lo[todo], up[todo], names, mode)
    vl = b["V"][0][:, 0]
    fu = b["F"][1][:, 0]
    okB = vl >= rho
    okA = fu <= 0
    if require_next_in_box:
        xl, xu = b["xi_next"]
        okA &= np.all((xl >= cert.lo) & (xu <= cert.up), axis=1)
    status[todo[okB]] = VERIFIED_B
    status[todo[okA & ~okB]] = VERIFIED_A
    return status


def _falsify(cert: Certificate, rho, lo, up, budget: Budget, rng, require_next_in_box):
    """Short PGD inside each box; returns (index of box, witness) candidates."""
    D, n = lo.shape
    k = budget.attack_points
    P = np.repeat(lo, k, axis=0) + np.repeat(up - lo, k, axis=0) * rng.uniform(size=(D * k, n))
    P[::k] = 0.5 * (lo + up)
    blo, bup = np.repeat(lo, k, axis=0), np.repeat(up, k, axis=0)
    step = 0.25 * (bup - blo)
    old = cert.rho
    cert.set_rho(rho if np.isfinite(rho) else 1.0)
    c0 = cert.weights.c0
    try:
        for _ in range(budget.attack_iters):
            tr = cert.trace(P)
            vals = cert.values(tr)
            a = vals["F"] + (c0 * vals["H"] if require_next_in_box else 0.0)
            bgap = rho - vals["V"]
            first = a <= bgap
            cot = {"F": first[:, None] * 1.0, "V": np.where(first, 0.0, -1.0)[:, None]}
            if require_next_in_box:
                cot["H"] = first[:, None] * c0
            (g,), _ = cert.graph.backward(tr, cot, wrt_params=False)
            P = np.clip(P + step * np.sign(g), blo, bup)
            step *= 0.5
        vals = cert.evaluate(P)
    finally:
        cert.set_rho(old)
    bad = ~_holds(vals, cert.lo, cert.up, rho, require_next_in_box)
    idx = np.nonzero(bad)[0]
    return idx // k, P[idx]


def check_condition(cert: Certificate, rho: float, lo, up, budget: Budget | None = None,
                    rng=None, local: LocalCertificate | None = None, require_next_in_box: bool = True):
    """Sound status of one subdomain plus a witness when falsified."""
    budget = budget or Budget()
    rng = rng or np.random.default_rng(0)
    st = check_domains(cert, rho, lo, up, budget.mode, require_next_in_box, local)[0]
    if st != UNDECIDED:
        return st, None
    _, W = _falsify(cert, rho, np.atleast_2d(lo), np.atleast_2d(up), budget, rng, require_next_in_box)
    if len(W):
        return FALSIFIED, _lexmin(W)
    return UNDECIDED, None


def _lexmin(W):
    order = np.lexsort(W.T[::-1])
    return W[order[0]].copy()


# -- worklist --------------------------------------------------------------------------


def bnb_verify(cert: Certificate, rho: float, budget: Budget | None = None,
               local: LocalCertificate | None = None, seed: int = 0,
               require_next_in_box: bool = True, root=None) -> CertificateResult:
    """Branch-and-bound over the certificate's box (or ``root`` boxes)."""
    budget = budget or Budget()
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    xs = cert.system.xi_star
    root_lo, root_up = cert.lo.copy(), cert.up.copy()
    root_width = np.where(root_up > root_lo, root_up - root_lo, 1.0)
    if root is None:
        work = [(root_lo, root_up, 0)]
    else:
        work = [(np.asarray(a, float), np.asarray(b, float), 0) for a, b in root]
    explored = 0
    depth_hist: dict[int, int] = {}
    too_small = 0
    small_boxes = []
    max_depth_seen = 0
    verdict = "verified"
    witness = None
    reason = ""

    while work:
        if explored >= budget.max_domains:
            verdict, reason = "unknown", "domain budget exhausted"
            break
        if time.perf_counter() - t0 > budget.time_limit:
            verdict, reason = "unknown", "time limit reached"
            break
        if budget.order == "widest":
            work.sort(key=lambda t: -t[2], reverse=False)
        take = min(budget.batch, len(work), budget.max_domains - explored)
        batch = work[-take:]
        del work[-take:]
        lo = np.array([b[0] for b in batch])
        up = np.array([b[1] for b in batch])
        depth = np.array([b[2] for b in batch])
        explored += take
        for d in depth:
            depth_hist[int(d)] = depth_hist.get(int(d), 0) + 1
        max_depth_seen = max(max_depth_seen, int(depth.max()))

        status = check_domains(cert, rho, lo, up, budget.mode, require_next_in_box, local)
        und = np.nonzero(status == UNDECIDED)[0]
        if und.size:
            _, W = _falsify(cert, rho, lo[und], up[und], budget, rng, require_next_in_box)
            if len(W):
                verdict, witness = "falsified", _lexmin(W)
                reason = "counterexample found"
                break
        for i in und:
            kids = branch(lo[i], up[i], root_width, xs) if depth[i] < budget.max_depth else None
            if kids is None:
                too_small += 1
                if len(small_boxes) < 8:
                    small_boxes.append([lo[i].tolist(), up[i].tolist()])
                continue
            # push the child farther from xi* first so the one holding xi*
            # is processed next (deepest-first)
            for klo, kup in kids:
                work.append((klo, kup, int(depth[i]) + 1))

    if verdict == "verified" and too_small:
        verdict, reason = "unknown", f"{too_small} undecided subdomains at minimum size"
    stats = {
        "domains_explored": explored,
        "max_depth": max_depth_seen,
        "depth_histogram": [depth_hist.get(d, 0) for d in range(max_depth_seen + 1)],
        "too_small": too_small,
        "too_small_boxes": small_boxes,
        "open_domains": len(work),
        "wall_time": time.perf_counter() - t0,
        "reason": reason,
        "local_certificate": None if local is None or not local.ok else
        {"lo": local.lo.tolist(), "up": local.up.tolist()},
    }
    return CertificateResult(verdict, float(rho), witness, stats)


def _local_for(cert: Certificate, require_next_in_box=True):
    system, V = cert.components()
    return local_certificate(system, V, cert.weights.kappa, cert.lo, cert.up)


def verify(cert: Certificate, rho: float, budget: Budget | None = None, seed: int = 0,
           local: LocalCertificate | None = None) -> CertificateResult:
    """``bnb_verify`` with the equilibrium neighbourhood certificate computed first."""
    if local is None:
        local = _local_for(cert)
    return bnb_verify(cert, rho, budget, local, seed)


def v_upper_bound(cert: Certificate, mode: str = "crown") -> float:
    (l, u), = output_bounds(cert.graph, cert.lo, cert.up, params=cert.params, outputs=["V"], mode=mode)
    return float(u[0])


@dataclass
class BisectionResult:
    rho_max: float
    result: CertificateResult
    attempts: list
    cap: float


def bisect_rho(cert: Certificate, rho_hat: float, lam: float = 1.5, tol: float | None = None,
               budget: Budget | None = None, seed: int = 0, verify_fn=None,
               cap: float | None = None, floor_frac: float = 1e-6) -> BisectionResult:
    """Largest certified sublevel value by exponential search + bisection.

    ``verify_fn(rho) -> CertificateResult`` may replace the real verifier
    (used to test the search logic on stubs).
    """
    if not rho_hat > 0:
        raise ValueError("rho_hat must be positive")
    if not lam > 1:
        raise ValueError("lambda must exceed 1")
    tol = 1e-3 * rho_hat if tol is None else tol
    if not tol > 0:
        raise ValueError("tol must be positive")
    if verify_fn is None:
        local = _local_for(cert)

        def verify_fn(r):
            return bnb_verify(cert, r, budget, local, seed)

    if cap is None:
        cap = v_upper_bound(cert) + tol if cert is not None else np.inf
    attempts = []

    def run(r):
        res = verify_fn(r)
        attempts.append({"rho": float(r), "verdict": res.verdict,
                         "domains": res.stats.get("domains_explored", 0)})
        return res

    rho = min(rho_hat, cap)
    res = run(rho)
    best = None
    if res.verified:
        lo_r, best = rho, res
        up_r = None
        while up_r is None:
            if lo_r >= cap:
                return BisectionResult(lo_r, best, attempts, cap)
            nxt = min(lo_r * lam, cap)
            r2 = run(nxt)
            if r2.verified:
                lo_r, best = nxt, r2
            else:
                up_r = nxt
    else:
        up_r = rho
        floor = floor_frac * rho_hat
        lo_r = None
        r = rho
        while lo_r is None:
            r = r / lam
            if r < floor:
                return BisectionResult(0.0, CertificateResult("unknown", 0.0, res.counterexample,
                                                              {**res.stats, "reason": "no sublevel value above the floor verified"}),
                                       attempts, cap)
            r2 = run(r)
            if r2.verified:
                lo_r, best = r, r2
            else:
                up_r = r
    while up_r - lo_r > tol:
        mid = 0.5 * (lo_r + up_r)
        r2 = run(mid)
        if r2.verified:
            lo_r, best = mid, r2
        else:
            up_r = mid
    return BisectionResult(lo_r, best, attempts, cap)


def boundary_min_bound(cert: Certificate, budget: Budget | None = None, rel_tol: float = 1e-9):
    """Certified lower bound (and sampled upper bound) of min V over the box surface."""
    budget = budget or Budget()
    lo, up = cert.lo, cert.up
    n = lo.size
    faces = []
    for d in range(n):
        for side in (lo[d], up[d]):
            flo, fup = lo.copy(), up.copy()
            flo[d] = fup[d] = side
            faces.append((flo, fup))
    root_width = np.where(up > lo, up - lo, 1.0)
    # best-first on the lower bound
    L = np.array([f[0] for f in faces])
    U = np.array([f[1] for f in faces])
    (vl, _), = output_bounds(cert.graph, L, U, params=cert.params, outputs=["V"], mode=budget.mode)
    lbs = vl[:, 0]
    best_ub = float(cert.evaluate(0.5 * (L + U))["V"].min())
    explored = len(faces)
    depth = np.zeros(len(faces), dtype=int)
    while True:
        gap_ok = best_ub - lbs.min() <= rel_tol * (1.0 + abs(best_ub))
        if gap_ok or explored >= budget.max_domains:
            break
        # split every box whose lower bound is below the current upper bound
        k = np.argsort(lbs)[: budget.batch]
        k = k[lbs[k] < best_ub - rel_tol * (1.0 + abs(best_ub))]
        if k.size == 0:
            break
        newL, newU, newD, split = [], [], [], []
        for i in k:
            kids = branch(L[i], U[i], root_width, cert.system.xi_star) if depth[i] < budget.max_depth else None
            if kids is None:
                continue
            split.append(i)
            for a, b in kids:
                newL.append(a)
                newU.append(b)
                newD.append(depth[i] + 1)
        if not split:
            break
        keep = np.setdiff1d(np.arange(len(lbs)), split)
        NL, NU = np.array(newL), np.array(newU)
        (nl, _), = output_bounds(cert.graph, NL, NU, params=cert.params, outputs=["V"], mode=budget.mode)
        best_ub = min(best_ub, float(cert.evaluate(0.5 * (NL + NU))["V"].min()))
        explored += len(newL)
        L = np.concatenate([L[keep], NL])
        U = np.concatenate([U[keep], NU])
        lbs = np.concatenate([lbs[keep], nl[:, 0]])
        depth = np.concatenate([depth[keep], np.array(newD)])
        # discard boxes that cannot contain the minimum
        live = lbs <= best_ub
        L, U, lbs, depth = L[live], U[live], lbs[live], depth[live]
    return float(max(lbs.min(), 0.0) if lbs.size else best_ub), best_ub, explored


@dataclass
class BaselineResult:
    verified: bool
    rho_tilde: float
    derivative: CertificateResult
    min_upper: float
    faces_explored: int


def two_step_baseline(cert: Certificate, budget: Budget | None = None, seed: int = 0) -> BaselineResult:
    """Derivative condition on all of B, then the largest sublevel set inside B."""
    system, V = cert.components()
    local = local_certificate(system, V, cert.weights.kappa, cert.lo, cert.up)
    step1 = bnb_verify(cert, np.inf, budget, local, seed, require_next_in_box=False)
    rho_t, ub, explored = boundary_min_bound(cert, budget)
    return BaselineResult(step1.verified, rho_t, step1, ub, explored)
