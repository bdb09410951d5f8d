"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line through the ``criterion`` fixture; the
lines are repeated in the terminal summary.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from neurolyap.cegis import dare_residual, linearize, riccati_solve
from neurolyap.control import ClosedLoopSystem, Controller, init_lyapunov, mlp
from neurolyap.graph import GraphBuilder
from neurolyap.losses import Certificate, LossWeights, box_violation_H, loss_derivative
from neurolyap.systems import make_plant
from neurolyap.toolkit import load_checkpoint, main, mc_volume, rollout_batch
from neurolyap.verifier import ETA_NUM, condition_holds, crown_bounds, interval_bounds

OUTPUT_VERIFY_DOMAINS = 200_000  # deterministic budget for the 4-D output-feedback check
PGD_RESTARTS = 100_000


def _cli(*argv):
    return main([str(a) for a in argv])


def _report(path):
    return json.loads(Path(path).read_text())


# -- pipelines shared by criteria 1, 7, 8 and 10 --------------------------------------------


def example1_pipeline(d: Path) -> dict:
    d.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ck = d / "ex1.json"
    codes = [_cli("example", "--out", ck)]
    codes.append(_cli("verify", ck, "--bisect", "--baseline", "--no-timing", "--report", d / "verify.json"))
    codes.append(_cli("compare", ck, "--samples", 1_000_000, "--no-timing", "--report", d / "compare.json"))
    return {"codes": codes, "seconds": time.perf_counter() - t0, "ckpt": ck,
            "files": [ck, d / "verify.json", d / "compare.json"]}


def pendulum_state_pipeline(d: Path) -> dict:
    d.mkdir(parents=True, exist_ok=True)
    ck = d / "pendulum_state.json"
    t0 = time.perf_counter()
    train_code = _cli("train", "pendulum-state", "--out", ck, "--history", d / "history.csv")
    t1 = time.perf_counter()
    verify_code = _cli("verify", ck, "--bisect", "--no-timing", "--report", d / "verify.json")
    t2 = time.perf_counter()
    return {"codes": [train_code, verify_code], "train_s": t1 - t0, "verify_s": t2 - t1, "ckpt": ck,
            "files": [ck, d / "history.csv", d / "verify.json"]}


def pendulum_output_pipeline(d: Path) -> dict:
    d.mkdir(parents=True, exist_ok=True)
    ck = d / "pendulum_output.json"
    cfg = d / "verify_cfg.json"
    cfg.write_text(json.dumps({"seed": 0, "verify": {"max_domains": OUTPUT_VERIFY_DOMAINS}}))
    t0 = time.perf_counter()
    train_code = _cli("train", "pendulum-output", "--out", ck, "--history", d / "history.csv")
    t1 = time.perf_counter()
    verify_code = _cli("verify", ck, "--config", cfg, "--no-timing", "--report", d / "verify.json")
    t2 = time.perf_counter()
    attack_code = _cli("attack", ck, "--restarts", PGD_RESTARTS, "--no-timing", "--report", d / "attack.json")
    t3 = time.perf_counter()
    return {"codes": [train_code, verify_code, attack_code], "train_s": t1 - t0, "verify_s": t2 - t1,
            "attack_s": t3 - t2, "ckpt": ck, "files": [ck, d / "history.csv", d / "verify.json", d / "attack.json"]}


@pytest.fixture(scope="session")
def ex1_run(tmp_path_factory):
    return example1_pipeline(tmp_path_factory.mktemp("ex1"))


@pytest.fixture(scope="session")
def pstate_run(tmp_path_factory):
    return pendulum_state_pipeline(tmp_path_factory.mktemp("pstate"))


@pytest.fixture(scope="session")
def poutput_run(tmp_path_factory):
    return pendulum_output_pipeline(tmp_path_factory.mktemp("poutput"))


def _verified_cases(ex1_run, pstate_run):
    """(name, certificate, rho) for every checkpoint whose verification succeeded."""
    out = []
    b = load_checkpoint(ex1_run["ckpt"])
    rep = _report(Path(ex1_run["ckpt"]).parent / "verify.json")
    if rep["verdict"] == "verified":
        out.append(("example1", Certificate(b.system, b.V, b.lo, b.up, rep["rho_max"], b.weights), rep["rho_max"]))
    b = load_checkpoint(pstate_run["ckpt"])
    rep = _report(Path(pstate_run["ckpt"]).parent / "verify.json")
    if rep["verdict"] == "verified" and rep["rho_max"] > 0:
        out.append(("pendulum-state", Certificate(b.system, b.V, b.lo, b.up, rep["rho_max"], b.weights),
                    rep["rho_max"]))
    return out


# -- 1 ----------------------------------------------------------------------------------------


def test_criterion_1_example1(ex1_run, criterion):
    ver = _report(Path(ex1_run["ckpt"]).parent / "verify.json")
    cmp_ = _report(Path(ex1_run["ckpt"]).parent / "compare.json")
    tol = 1e-3 * ver["rho_hat"]
    rho_max, rho_t = ver["rho_max"], ver["baseline"]["rho_tilde"]
    area = cmp_["volume_ratio"]
    ok = (ex1_run["codes"] == [0, 0, 0] and rho_max >= 2 - tol and abs(rho_t - 1) <= 1e-6
          and abs(area / (4 / np.pi) - 1) <= 0.02 and ex1_run["seconds"] < 10)
    criterion(1, ok, f"rho_max={rho_max:.6f} rho_tilde={rho_t:.9f} area_ratio={area:.4f} "
                     f"(4/pi={4 / np.pi:.4f}) runtime={ex1_run['seconds']:.2f}s")
    assert ok


# -- 2 ----------------------------------------------------------------------------------------


def _random_small_system(rng):
    name, half = [("single_integrator", 1.0), ("pendulum", 2.0), ("path_tracking", 1.0)][int(rng.integers(3))]
    plant = make_plant(name)
    h = int(rng.integers(1, 9))
    ctrl = Controller.for_plant(plant, mlp(2, (h,), plant.nu, rng))
    system = ClosedLoopSystem(plant, ctrl)
    if rng.uniform() < 0.5:
        V = init_lyapunov("nn", system.xi_star, rng, (int(rng.integers(1, 9)),), net_scale=rng.uniform(0.1, 1))
    else:
        V = init_lyapunov("quadratic", system.xi_star, rng)
    return system, V, -np.full(2, half), np.full(2, half)


def test_criterion_2_loss_zero_iff_condition(criterion):
    rng = np.random.default_rng(2024)
    discrepancies, points, both = 0, 0, [0, 0]
    for _ in range(50):
        system, V, lo, up = _random_small_system(rng)
        t = np.linspace(0, 1, 200)
        X = lo + (up - lo) * np.stack(np.meshgrid(t, t), -1).reshape(-1, 2)
        kappa = float(rng.uniform(0.001, 0.5))
        c0 = float(rng.uniform(0.1, 10))
        v = V(X)
        rho = float(np.quantile(v, rng.uniform(0.2, 0.8)))
        L = loss_derivative(system, V, X, rho, lo, up, kappa=kappa, c0=c0)
        # independent evaluation of the condition
        Xn = system.graph()(X)[0]
        F = V(Xn) - (1 - kappa) * v
        H = box_violation_H(Xn, lo, up)
        cond = ((F <= 0) & (H <= 0)) | (v >= rho)
        discrepancies += int(np.count_nonzero((L == 0) != cond))
        points += X.shape[0]
        both[0] += int(np.count_nonzero(L == 0))
        both[1] += int(np.count_nonzero(L > 0))
    ok = discrepancies == 0 and both[1] > 0
    criterion(2, ok, f"{discrepancies} discrepancies over {points} grid points "
                     f"({both[0]} zero-loss, {both[1]} positive-loss)")
    assert ok


# -- 3 and 4 -------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_3_soundness(ex1_run, pstate_run, criterion):
    cases = _verified_cases(ex1_run, pstate_run)
    rng = np.random.default_rng(3)
    bad = {}
    for name, cert, rho in cases:
        X = rng.uniform(cert.lo, cert.up, (1_000_000, cert.lo.size))
        bad[name] = int(np.count_nonzero(~condition_holds(cert, X, rho)))
    ok = len(cases) >= 2 and all(v == 0 for v in bad.values())
    criterion(3, ok, f"violations in 1e6 samples per verified case: {bad}")
    assert ok


def _sample_in_S(cert, rho, n, rng):
    pts = []
    while sum(len(p) for p in pts) < n:
        X = rng.uniform(cert.lo, cert.up, (200_000, cert.lo.size))
        pts.append(X[cert.components()[1](X) < rho])
    return np.concatenate(pts)[:n]


@pytest.mark.slow
def test_criterion_4_invariance(ex1_run, pstate_run, criterion):
    cases = _verified_cases(ex1_run, pstate_run)
    rng = np.random.default_rng(4)
    summary = {}
    ok = len(cases) >= 2
    for name, cert, rho in cases:
        system, V = cert.components()
        X0 = _sample_in_S(cert, rho, 10_000, rng)
        S, Vs = rollout_batch(system, V, X0, 200)
        in_box = np.all((S >= cert.lo) & (S <= cert.up), axis=-1)
        left = int(np.count_nonzero(~(in_box & (Vs < rho))))
        kappa = cert.weights.kappa
        slack = Vs[1:] - ((1 - kappa) * Vs[:-1] + 1e-9)
        summary[name] = {"left_S": left, "decrease_violations": int(np.count_nonzero(slack > 0))}
        ok &= left == 0 and not np.any(slack > 0)
    criterion(4, ok, f"10^4 starts x 200 steps: {summary}")
    assert ok


# -- 5 -------------------------------------------------------------------------------------------


def _random_graph(rng, affine_only):
    n = int(rng.integers(1, 4))
    b = GraphBuilder()
    x = b.input(n)
    h, d = x, n
    ops = ["leaky_relu", "relu", "sin", "cos", "abs", "clamp", "square", "min", "l1"]
    for k in range(int(rng.integers(1, 5))):
        w = int(rng.integers(1, 17))
        h = b.affine(h, rng.normal(size=(w, d)) / np.sqrt(d), rng.normal(size=w) * 0.5)
        d = w
        if affine_only:
            continue
        op = ops[int(rng.integers(len(ops)))]
        if op == "clamp":
            h = b.clamp(h, -1.0, 1.0)
        elif op == "square":
            h = b.mul(h, h)
        elif op == "min":
            h = b.minimum(h, b.scale(h, -0.5))
        elif op == "l1":
            h, d = b.l1norm(h), 1
        else:
            h = getattr(b, op)(h)
    m = int(rng.integers(1, 3))
    return b.build([b.affine(h, rng.normal(size=(m, d)), rng.normal(size=m))]), n


def _grid(lo, up, n_total=100_000):
    k = int(np.ceil(n_total ** (1 / lo.size)))
    axes = [np.linspace(a, b, k) for a, b in zip(lo, up)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, lo.size)


@pytest.mark.slow
def test_criterion_5_bound_soundness(criterion):
    rng = np.random.default_rng(5)
    failures, width_failures, n_affine = 0, 0, 0
    for i in range(1000):
        affine_only = i % 5 == 0
        g, n = _random_graph(rng, affine_only)
        c = rng.normal(size=n)
        lo, up = c - rng.uniform(0.01, 2, n), c + rng.uniform(0.01, 2, n)
        Y = g(_grid(lo, up))
        (il, iu), = interval_bounds(g, lo, up)
        (_, (cl, cu)), = crown_bounds(g, lo, up)
        ymin, ymax = Y.min(axis=0), Y.max(axis=0)
        if np.any(il > ymin) or np.any(iu < ymax) or np.any(cl > ymin) or np.any(cu < ymax):
            failures += 1
        if affine_only:
            n_affine += 1
            if np.any(cu - cl > iu - il + ETA_NUM):
                width_failures += 1
    ok = failures == 0 and width_failures == 0
    criterion(5, ok, f"{failures}/1000 enclosure failures, {width_failures}/{n_affine} affine width failures")
    assert ok


# -- 6 -------------------------------------------------------------------------------------------


def _loss_certificates(rng):
    from neurolyap.toolkit import build
    out = []
    for name in ("single-integrator", "pendulum-state", "path-tracking", "quadrotor-state",
                 "pendulum-output", "quadrotor-output"):
        b = build(name, seed=int(rng.integers(1000)), lyapunov_scale=1.0)
        V = b.V(np.array([b.up * 0.5]))[0]
        out.append(Certificate(b.system, b.V, b.lo, b.up, rho=float(V), weights=b.weights))
    return out


def _pattern(graph, tr):
    """Side of every kink for each sample; equal patterns mean no kink lies between."""
    parts = []
    for node in graph.nodes:
        ins = [tr.values[i] for i in node.inputs]
        if node.op in ("leaky_relu", "abs", "l1norm"):
            parts.append(ins[0] >= 0)
        elif node.op == "clamp":
            parts += [ins[0] < node.attrs["lo"], ins[0] > node.attrs["hi"]]
        elif node.op in ("min", "max"):
            parts.append(ins[0] <= ins[1])
    return np.concatenate([p.reshape(p.shape[0], -1) for p in parts], axis=1)


@pytest.mark.slow
def test_criterion_6_gradient_fidelity(criterion):
    rng = np.random.default_rng(6)
    certs = _loss_certificates(rng)
    h = 1e-6
    names = ["F", "V", "H", "Lvdot"]
    worst, checked, rejected = 0.0, 0, 0
    while checked < 1000:
        cert = certs[checked % len(certs)]
        x = rng.uniform(cert.lo, cert.up)
        tr = cert.trace(x[None])
        base = _pattern(cert.graph, tr)
        w = rng.normal(size=len(names))
        cot = {k: np.full((1, 1), wk) for k, wk in zip(names, w)}
        (gx,), gp = cert.graph.backward(tr, cot)
        smooth = [True]

        def f(z=None, params=None):
            t = cert.graph.trace((x if z is None else z)[None], params={**cert.params, **(params or {})})
            smooth[0] &= bool(np.array_equal(_pattern(cert.graph, t), base))
            vals = cert.values(t)
            return float(sum(wk * vals[k][0] for k, wk in zip(names, w)))

        fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)])
        ga, gf = list(gx[0]), list(fd)
        tp = sorted(gp)
        for _ in range(2):  # two random parameter entries
            name = tp[int(rng.integers(len(tp)))]
            p = cert.params[name]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            dp = np.zeros_like(p)
            dp[idx] = h
            fdp = (f(params={name: p + dp}) - f(params={name: p - dp})) / (2 * h)
            ga.append(gp[name][idx])
            gf.append(fdp)
        if not smooth[0]:
            rejected += 1  # a kink lies inside the difference stencil
            continue
        # norm-wise: single entries near zero only carry finite-difference rounding noise
        ga, gf = np.array(ga), np.array(gf)
        worst = max(worst, np.linalg.norm(ga - gf) / max(np.linalg.norm(gf), 1e-4))
        checked += 1
    ok = worst <= 1e-5
    criterion(6, ok, f"max relative error {worst:.2e} over {checked} smooth points on {len(certs)} loss graphs "
                     f"({rejected} points rejected: kink inside the stencil)")
    assert ok


# -- 7 -------------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_pendulum_state(pstate_run, criterion):
    b = load_checkpoint(pstate_run["ckpt"])
    hist = b.meta["history"]
    hit = next((h["iteration"] for h in hist if h["clean_streak"] >= 5), None)
    rep = _report(Path(pstate_run["ckpt"]).parent / "verify.json")
    ok = (hit is not None and hit < 500 and rep["verdict"] == "verified" and rep["rho_max"] > 0
          and pstate_run["verify_s"] < 1800 and pstate_run["codes"] == [0, 0])
    criterion(7, ok, f"5 clean sweeps at iteration {hit}, rho_hat={b.rho:.4f}, "
                     f"bisect verdict={rep['verdict']} rho_max={rep['rho_max']:.4f}, "
                     f"train {pstate_run['train_s']:.0f}s verify {pstate_run['verify_s']:.1f}s")
    assert ok


# -- 8 -------------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_pendulum_output(poutput_run, criterion):
    d = Path(poutput_run["ckpt"]).parent
    b = load_checkpoint(poutput_run["ckpt"])
    ver, att = _report(d / "verify.json"), _report(d / "attack.json")
    pv = b.system.plant.params.values
    torque_ok = np.isclose(b.system.plant.u_up[0], pv["m"] * pv["g"] * pv["l"] / 3)
    box_ok = np.allclose(b.up, np.pi * np.array([0.4, 0.4, 0.1, 0.1]))
    ok = (poutput_run["codes"][0] in (0, 2) and ver["verdict"] in ("verified", "unknown")
          and att["n_counterexamples"] == 0 and att["rho"] == b.rho and torque_ok and box_ok)
    criterion(8, ok, f"rho_hat={b.rho:.4f}, verdict={ver['verdict']} "
                     f"({ver['result']['stats']['domains_explored']} domains, "
                     f"{ver['result']['stats']['reason'] or 'complete'}), "
                     f"PGD {PGD_RESTARTS} restarts: {att['n_counterexamples']} violations")
    assert ok


# -- 9 -------------------------------------------------------------------------------------------


def test_criterion_9_riccati(criterion):
    s = riccati_solve(1.0, 1.0, 1.0, 1.0)[0, 0]
    err = abs(s - (1 + np.sqrt(5)) / 2)
    rng = np.random.default_rng(9)
    worst = 0.0
    cases = []
    for _ in range(20):
        n, m = int(rng.integers(2, 7)), int(rng.integers(1, 4))
        cases.append((rng.normal(size=(n, n)) * 0.5, rng.normal(size=(n, m)), np.eye(n), np.eye(m)))
    for name in ("pendulum", "path_tracking", "quadrotor2d", "quadrotor2d_vertical"):
        A, B = linearize(make_plant(name))
        cases.append((A, B, np.eye(A.shape[0]), np.eye(B.shape[1])))
    for A, B, Q, R in cases:
        worst = max(worst, dare_residual(riccati_solve(A, B, Q, R), A, B, Q, R))
    ok = err <= 1e-9 and worst <= 1e-8
    criterion(9, ok, f"scalar error {err:.1e}, worst matrix residual {worst:.1e} over {len(cases)} cases")
    assert ok


# -- 10 ------------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_10_determinism(ex1_run, pstate_run, poutput_run, tmp_path, criterion):
    again = {
        "example1": (ex1_run, example1_pipeline(tmp_path / "ex1")),
        "pendulum-state": (pstate_run, pendulum_state_pipeline(tmp_path / "pstate")),
        "pendulum-output": (poutput_run, pendulum_output_pipeline(tmp_path / "poutput")),
    }
    diffs = {}
    for name, (a, b) in again.items():
        diffs[name] = [Path(f).name for f, g in zip(a["files"], b["files"])
                       if Path(f).read_bytes() != Path(g).read_bytes()]
    ok = all(not v for v in diffs.values())
    criterion(10, ok, "identical artefacts on rerun" if ok else f"differing files: {diffs}")
    assert ok
