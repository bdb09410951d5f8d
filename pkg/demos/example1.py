"""Single integrator with a saturated linear controller, certified through the Python API.

Prints the certified sublevel value, the two-step baseline value and the
Monte Carlo area ratio between the two invariant sets.

    python demos/example1.py
"""
import time

import numpy as np

from neurolyap.losses import Certificate
from neurolyap.toolkit import example1_bundle, mc_volume
from neurolyap.verifier import bisect_rho, two_step_baseline


def main():
    b = example1_bundle()
    cert = Certificate(b.system, b.V, b.lo, b.up, b.rho, b.weights)
    t0 = time.perf_counter()
    bis = bisect_rho(cert, b.rho, tol=1e-3 * b.rho)
    base = two_step_baseline(cert)
    print(f"rho_max   = {bis.rho_max:.6f}  ({bis.result.verdict}, {len(bis.attempts)} verifier calls)")
    print(f"rho_tilde = {base.rho_tilde:.6f}  (derivative condition verified: {base.verified})")
    print(f"elapsed   = {time.perf_counter() - t0:.2f}s")

    ours = mc_volume(b.V, bis.rho_max, b.lo, b.up, n=1_000_000, seed=0)
    theirs = mc_volume(b.V, base.rho_tilde, b.lo, b.up, n=1_000_000, seed=0)
    print(f"area ratio = {ours.volume / theirs.volume:.4f}  (4/pi = {4 / np.pi:.4f})")


if __name__ == "__main__":
    main()
