"""Sound certification: bound propagation, branch-and-bound and rho bisection."""
from .bnb import (
    FALSIFIED,
    TOO_SMALL,
    UNDECIDED,
    VERIFIED_A,
    VERIFIED_B,
    BaselineResult,
    BisectionResult,
    Budget,
    CertificateResult,
    SubDomain,
    bisect_rho,
    bnb_verify,
    boundary_min_bound,
    branch,
    check_condition,
    check_domains,
    condition_holds,
    two_step_baseline,
    v_upper_bound,
    verify,
)
from .bounds import ETA_NUM, LinearBounds, crown_bounds, interval_bounds, output_bounds
from .local import LocalCertificate, interval_jacobian, local_certificate

__all__ = [
    "FALSIFIED", "TOO_SMALL", "UNDECIDED", "VERIFIED_A", "VERIFIED_B", "BaselineResult",
    "BisectionResult", "Budget", "CertificateResult", "SubDomain", "bisect_rho", "bnb_verify",
    "boundary_min_bound", "branch", "check_condition", "check_domains", "condition_holds",
    "two_step_baseline", "v_upper_bound", "verify", "ETA_NUM", "LinearBounds", "crown_bounds",
    "interval_bounds", "output_bounds", "LocalCertificate", "interval_jacobian", "local_certificate",
]
