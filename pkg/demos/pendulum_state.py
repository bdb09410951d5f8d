"""Train a state-feedback pendulum controller, certify it, then export a rollout and an ROA slice.

    python demos/pendulum_state.py [outdir]

Takes about a minute with the shipped recipe on one CPU core.
"""
import sys
import time
from pathlib import Path

from neurolyap.cegis import ReferenceLyapunov, train
from neurolyap.losses import Certificate, LossWeights
from neurolyap.toolkit import build, roa_slice, save_checkpoint, simulate, write_csv
from neurolyap.toolkit import io as nio
from neurolyap.verifier import bisect_rho


def main(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    cfg = nio.recipe("pendulum-state")
    sc = nio.scenario_from("pendulum-state", cfg)
    weights = LossWeights(**cfg["weights"], kappa=sc.kappa)
    b = build(sc, cfg["seed"], weights, cfg["lyapunov_scale"])

    t0 = time.perf_counter()
    res = train(b.system, b.V, b.lo, b.up, nio.train_config(cfg), weights, ReferenceLyapunov.for_system(b.system))
    b.system, b.V, b.rho = res.system, res.V, res.rho
    print(f"trained: converged={res.converged} iterations={len(res.history)} rho_hat={res.rho:.4f} "
          f"({time.perf_counter() - t0:.1f}s)")
    save_checkpoint(out / "pendulum-state.json", b, cfg["seed"], cfg["lyapunov_scale"], res.history)

    t0 = time.perf_counter()
    cert = Certificate(b.system, b.V, b.lo, b.up, b.rho, weights)
    bis = bisect_rho(cert, b.rho, tol=cfg["verify"]["tol_frac"] * b.rho, budget=nio.budget_from(cfg))
    print(f"certified: rho_max={bis.rho_max:.4f} verdict={bis.result.verdict} ({time.perf_counter() - t0:.1f}s)")

    # start on the boundary of the certified set along the angle axis
    x0 = b.system.xi_star.copy()
    for s in (0.9 ** k for k in range(200)):
        x0[0] = s * b.up[0]
        if b.V(x0[None])[0] < bis.rho_max:
            break
    tr = simulate(b.system, b.V, x0, 200)
    names, data = tr.columns()
    write_csv(out / "rollout.csv", names, data)
    print(f"rollout from theta={x0[0]:.3f}: V {tr.V[0]:.4f} -> {tr.V[-1]:.2e}")

    sl = roa_slice(b.V, bis.rho_max, b.lo, b.up, (0, 1), n=121)
    write_csv(out / "roa.csv", sl.header(), sl.rows())
    print(f"wrote {out}/pendulum-state.json, rollout.csv, roa.csv")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "pendulum-demo"))
