"""Command-line front end.

Exit codes: 0 success/verified, 1 falsified, 2 unknown or budget-bound,
3 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from ..attack import find_counterexamples
from ..cegis import HISTORY_FIELDS, ReferenceLyapunov, TrainingDiverged, train
from ..losses import Certificate, LossWeights
from ..verifier import bisect_rho, two_step_baseline, verify
from . import io as nio
from .scenarios import SCENARIOS, Bundle, build, example1_bundle
from .sim import mc_volume, roa_slice, simulate

EXIT_OK, EXIT_FALSIFIED, EXIT_UNKNOWN, EXIT_USAGE = 0, 1, 2, 3

log = logging.getLogger("neurolyap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(s: str) -> list:
    try:
        return [float(v) for v in s.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _ints(s: str) -> list:
    try:
        return [int(v) for v in s.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neurolyap", description="Train and certify Lyapunov-stable neural controllers.")
    p.add_argument("-v", "--verbose", action="store_true")
    # also accepted after the subcommand
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="counterexample-guided training")
    t.add_argument("scenario", choices=sorted(SCENARIOS))
    t.add_argument("--config", help="JSON config (default: the scenario's shipped recipe)")
    t.add_argument("--out", required=True)
    t.add_argument("--history", help="CSV file for the per-iteration log")

    e = sub.add_parser("example", parents=[common], help="write the fixed single-integrator bundle")
    e.add_argument("--out", required=True)

    def ckpt_cmd(name, help_):
        c = sub.add_parser(name, parents=[common], help=help_)
        c.add_argument("checkpoint")
        c.add_argument("--config", help="override verification/PGD settings")
        c.add_argument("--report", help="write the JSON report here as well as to stdout")
        c.add_argument("--no-timing", action="store_true", help="omit wall-clock fields from the report")
        return c

    v = ckpt_cmd("verify", "certify the sublevel set")
    v.add_argument("--rho", type=float)
    v.add_argument("--bisect", action="store_true")
    v.add_argument("--baseline", action="store_true")

    a = ckpt_cmd("attack", "PGD falsification at the checkpoint's rho")
    a.add_argument("--rho", type=float)
    a.add_argument("--restarts", type=int)

    s = ckpt_cmd("simulate", "closed-loop rollout to CSV")
    s.add_argument("--x0", type=_floats, required=True)
    s.add_argument("--horizon", type=int, default=200)
    s.add_argument("--out")

    r = ckpt_cmd("roa", "2-D slice of the certified set to CSV")
    r.add_argument("--dims", type=_ints, required=True)
    r.add_argument("--grid", type=int, default=101)
    r.add_argument("--fixed", type=_floats)
    r.add_argument("--rho", type=float)
    r.add_argument("--out")

    c = ckpt_cmd("compare", "certified rho_max versus the two-step baseline")
    c.add_argument("--samples", type=int)
    return p


# -- helpers ----------------------------------------------------------------------------


def _config_for(args, bundle: Bundle) -> dict:
    if getattr(args, "config", None):
        return nio.load_config(args.config)
    return nio.default_config(int(bundle.meta.get("seed", 0)))


def _cert(bundle: Bundle, rho: float | None = None) -> Certificate:
    r = bundle.rho if rho is None else rho
    return Certificate(bundle.system, bundle.V, bundle.lo, bundle.up, r if np.isfinite(r) and r > 0 else 1.0,
                       bundle.weights)


def _result_dict(res) -> dict:
    stats = {k: v for k, v in res.stats.items() if k != "wall_time"}
    return {"verdict": res.verdict, "rho": res.rho, "counterexample": res.counterexample, "stats": stats}


def _emit(args, report: dict, timing: dict):
    if not args.no_timing:
        report = {**report, "timing": timing}
    text = nio.dumps(report)
    if args.report:
        with open(args.report, "w") as f:
            f.write(text)
    sys.stdout.write(text)


def _verdict_code(verdict: str) -> int:
    return {"verified": EXIT_OK, "falsified": EXIT_FALSIFIED}.get(verdict, EXIT_UNKNOWN)


# -- subcommands --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = nio.load_config(args.config) if args.config else nio.recipe(args.scenario)
    sc = nio.scenario_from(args.scenario, cfg)
    weights = LossWeights(**cfg["weights"], kappa=sc.kappa)
    bundle = build(sc, cfg["seed"], weights, cfg["lyapunov_scale"])
    tc = nio.train_config(cfg)
    ref = ReferenceLyapunov.for_system(bundle.system)

    def cb(h):
        if h["iteration"] % 10 == 0:
            log.info("iter %d rho=%.4g max_violation=%.3g cex=%d streak=%d", h["iteration"], h["rho"],
                     h["max_violation"], h["n_counterexamples"], h["clean_streak"])

    t0 = time.perf_counter()
    try:
        res = train(bundle.system, bundle.V, bundle.lo, bundle.up, tc, weights, ref, callback=cb)
    except TrainingDiverged as e:
        log.error("%s", e)
        return EXIT_UNKNOWN
    bundle.system, bundle.V, bundle.rho = res.system, res.V, res.rho
    bundle.meta = {"converged": res.converged, "iterations": len(res.history)}
    nio.save_checkpoint(args.out, bundle, cfg["seed"], cfg["lyapunov_scale"], res.history)
    if args.history:
        nio.write_csv(args.history, HISTORY_FIELDS, [[h[k] for k in HISTORY_FIELDS] for h in res.history])
    log.info("trained in %.1fs, converged=%s, rho=%.6g", time.perf_counter() - t0, res.converged, res.rho)
    return EXIT_OK if res.converged else EXIT_UNKNOWN


def cmd_example(args) -> int:
    nio.save_checkpoint(args.out, example1_bundle(), 0, 0.1, [])
    return EXIT_OK


def cmd_verify(args) -> int:
    bundle = nio.load_checkpoint(args.checkpoint)
    cfg = _config_for(args, bundle)
    budget = nio.budget_from(cfg)
    rho = bundle.rho if args.rho is None else args.rho
    if not rho > 0:
        raise UsageError("rho must be positive (pass --rho)")
    cert = _cert(bundle, rho)
    seed = cfg["seed"]
    t0 = time.perf_counter()
    report: dict = {"checkpoint": bundle.scenario.name, "rho_hat": rho}
    timing: dict = {}
    if args.bisect:
        tol = cfg["verify"]["tol_frac"] * rho
        bis = bisect_rho(cert, rho, cfg["verify"]["lam"], tol, budget, seed)
        report["bisect"] = {"rho_max": bis.rho_max, "cap": bis.cap, "attempts": bis.attempts,
                            "result": _result_dict(bis.result)}
        report["rho_max"] = bis.rho_max
        verdict = "verified" if bis.rho_max > 0 and bis.result.verified else bis.result.verdict
    else:
        res = verify(cert, rho, budget, seed)
        report["result"] = _result_dict(res)
        verdict = res.verdict
    timing["verify_s"] = time.perf_counter() - t0
    if args.baseline:
        t1 = time.perf_counter()
        base = two_step_baseline(_cert(bundle, rho), budget, seed)
        report["baseline"] = {"derivative_verified": base.verified, "rho_tilde": base.rho_tilde,
                              "min_upper": base.min_upper, "faces_explored": base.faces_explored,
                              "derivative": _result_dict(base.derivative)}
        timing["baseline_s"] = time.perf_counter() - t1
    report["verdict"] = verdict
    _emit(args, report, timing)
    return _verdict_code(verdict)


def cmd_attack(args) -> int:
    bundle = nio.load_checkpoint(args.checkpoint)
    cfg = _config_for(args, bundle)
    rho = bundle.rho if args.rho is None else args.rho
    cert = _cert(bundle, rho)
    pgd = nio.train_config(cfg).pgd
    t0 = time.perf_counter()
    cex = find_counterexamples(cert, bundle.lo, bundle.up, pgd, np.random.default_rng(cfg["seed"]),
                               restarts=args.restarts, center=bundle.system.xi_star)
    report = {"rho": rho, "n_counterexamples": len(cex), "max_violation": cex.max_violation,
              "worst": cex.points[0] if len(cex) else None}
    _emit(args, report, {"attack_s": time.perf_counter() - t0})
    return EXIT_FALSIFIED if len(cex) else EXIT_OK


def cmd_simulate(args) -> int:
    bundle = nio.load_checkpoint(args.checkpoint)
    if len(args.x0) != bundle.system.nxi:
        raise UsageError(f"--x0 needs {bundle.system.nxi} values")
    if args.horizon < 1:
        raise UsageError("--horizon must be >= 1")
    tr = simulate(bundle.system, bundle.V, np.array(args.x0), args.horizon)
    names, data = tr.columns()
    text = nio.csv_text(names, data)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    if tr.truncated:
        log.warning("rollout hit a non-finite state after %d steps", len(tr) - 1)
    return EXIT_OK


def cmd_roa(args) -> int:
    bundle = nio.load_checkpoint(args.checkpoint)
    if len(args.dims) != 2:
        raise UsageError("--dims takes two indices, e.g. 0,1")
    rho = bundle.rho if args.rho is None else args.rho
    try:
        sl = roa_slice(bundle.V, rho, bundle.lo, bundle.up, args.dims, args.fixed, args.grid)
    except ValueError as e:
        raise UsageError(str(e)) from None
    text = nio.csv_text(sl.header(), sl.rows())
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    bundle = nio.load_checkpoint(args.checkpoint)
    cfg = _config_for(args, bundle)
    budget = nio.budget_from(cfg)
    seed = cfg["seed"]
    rho = bundle.rho
    n = args.samples or cfg["verify"]["mc_samples"]
    t0 = time.perf_counter()
    bis = bisect_rho(_cert(bundle, rho), rho, cfg["verify"]["lam"], cfg["verify"]["tol_frac"] * rho, budget, seed)
    base = two_step_baseline(_cert(bundle, rho), budget, seed)
    rho_t = base.rho_tilde if base.verified else 0.0
    ours = mc_volume(bundle.V, bis.rho_max, bundle.lo, bundle.up, n, seed)
    theirs = mc_volume(bundle.V, rho_t, bundle.lo, bundle.up, n, seed)
    report = {
        "rho_max": bis.rho_max, "verdict": bis.result.verdict,
        "rho_tilde": rho_t, "baseline_derivative_verified": base.verified,
        "rho_ratio": bis.rho_max / rho_t if rho_t > 0 else float("inf"),
        "volume": {"ours": ours.volume, "ours_half_width": ours.half_width,
                   "baseline": theirs.volume, "baseline_half_width": theirs.half_width, "samples": n},
        "volume_ratio": ours.volume / theirs.volume if theirs.volume > 0 else float("inf"),
    }
    _emit(args, report, {"compare_s": time.perf_counter() - t0})
    return _verdict_code(bis.result.verdict if bis.rho_max > 0 else "unknown")


COMMANDS = {"train": cmd_train, "example": cmd_example, "verify": cmd_verify, "attack": cmd_attack,
            "simulate": cmd_simulate, "roa": cmd_roa, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.cmd is None:
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        return COMMANDS[args.cmd](args)
    except UsageError as e:
        print(f"neurolyap: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except nio.ConfigError as e:
        print(f"neurolyap: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as e:
        print(f"neurolyap: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE


def cli(argv=None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
