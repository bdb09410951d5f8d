import numpy as np
import pytest

from neurolyap.control import ClosedLoopSystem, Controller, LyapunovCandidate, mlp
from neurolyap.graph import GraphBuilder
from neurolyap.losses import Certificate, LossWeights
from neurolyap.systems import make_plant
from neurolyap.toolkit import example1_bundle
from neurolyap.verifier import (
    ETA_NUM,
    FALSIFIED,
    UNDECIDED,
    VERIFIED_A,
    VERIFIED_B,
    Budget,
    CertificateResult,
    SubDomain,
    bisect_rho,
    bnb_verify,
    branch,
    check_condition,
    condition_holds,
    crown_bounds,
    interval_bounds,
    interval_jacobian,
    local_certificate,
    two_step_baseline,
    verify,
)

LO, UP = -np.ones(2), np.ones(2)


def _ex1(kappa=0.1):
    b = example1_bundle()
    return Certificate(b.system, b.V, LO, UP, rho=1.0, weights=LossWeights(kappa=kappa))


def _pocket():
    b = GraphBuilder()
    x = b.input(2)
    c = np.array([0.5, 0.5])
    bump = b.relu(b.offset(b.scale(b.l1norm(b.offset(x, -c)), -1.0), np.array([0.2])))
    net = b.build({"out": b.add(b.scale(x, -1.0), b.affine(bump, 10.0 * np.ones((2, 1))))})
    plant = make_plant("single_integrator")
    system = ClosedLoopSystem(plant, Controller.for_plant(plant, net))
    V = LyapunovCandidate("quadratic", np.zeros(2), np.sqrt(0.99) * np.eye(2))
    return Certificate(system, V, LO, UP, rho=1.0, weights=LossWeights(kappa=0.1))


def _affine_graph():
    b = GraphBuilder()
    x = b.input(1)
    return b.build([b.affine(x, np.array([[2.0]]), np.array([1.0]))])


# -- bounds -----------------------------------------------------------------------


def test_interval_examples():
    (l, u), = interval_bounds(_affine_graph(), np.array([0.0]), np.array([1.0]))
    assert l[0] == pytest.approx(1.0, abs=1e-8) and u[0] == pytest.approx(3.0, abs=1e-8)
    assert l[0] <= 1.0 and u[0] >= 3.0
    b = GraphBuilder()
    x = b.input(1)
    g = b.build([b.sin(x)])
    (l, u), = interval_bounds(g, np.array([0.0]), np.array([np.pi]))
    assert l[0] == pytest.approx(0.0, abs=1e-8) and u[0] == pytest.approx(1.0, abs=1e-8)


def test_crown_quadratic_v():
    cert = _ex1()
    (lb, (l, u)), = crown_bounds(cert.graph, LO, UP, params=cert.params, outputs=["V"])
    assert l[0] <= 0.0 <= u[0] and u[0] >= 2.0


def test_crown_hidden_layer_against_grid():
    rng = np.random.default_rng(0)
    g = mlp(2, (16,), 1, rng)
    lo, up = np.array([-0.7, 0.1]), np.array([0.4, 0.9])
    t = np.linspace(0, 1, 317)
    X = lo + (up - lo) * np.stack(np.meshgrid(t, t), -1).reshape(-1, 2)
    Y = g(X)[:, 0]
    (lb, (l, u)), = crown_bounds(g, lo, up)
    assert l[0] <= Y.min() and u[0] >= Y.max()
    # the linear forms themselves enclose the function pointwise
    lowf = X @ lb.A_low[0, 0] + lb.b_low[0, 0]
    upf = X @ lb.A_up[0, 0] + lb.b_up[0, 0]
    assert np.all(lowf <= Y + 1e-9) and np.all(Y <= upf + 1e-9)


def test_crown_not_looser_than_interval_on_affine():
    rng = np.random.default_rng(1)
    b = GraphBuilder()
    x = b.input(3)
    h = b.affine(x, rng.normal(size=(4, 3)), rng.normal(size=4))
    g = b.build([b.affine(h, rng.normal(size=(2, 4)), rng.normal(size=2))])
    lo, up = -rng.uniform(0.1, 2, 3), rng.uniform(0.1, 2, 3)
    (_, (cl, cu)), = crown_bounds(g, lo, up)
    (il, iu), = interval_bounds(g, lo, up)
    assert np.all(cu - cl <= iu - il + ETA_NUM)


def test_interval_jacobian_encloses_fd():
    cert = _pocket()
    step = cert.system.graph()
    lo, up = np.array([0.3, 0.2]), np.array([0.6, 0.7])
    (JL, JU), _ = interval_jacobian(step, lo, up, output=0)
    rng = np.random.default_rng(2)
    h = 1e-7
    for x in rng.uniform(lo + 1e-3, up - 1e-3, (200, 2)):
        J = np.column_stack([(step(x + h * e)[0] - step(x - h * e)[0]) / (2 * h) for e in np.eye(2)])
        assert np.all(J >= JL[0] - 1e-5) and np.all(J <= JU[0] + 1e-5)


# -- clause checks and branching ------------------------------------------------------


def test_check_condition_examples():
    cert = _ex1()
    b = example1_bundle()
    # F vanishes at xi*, so the whole-box check goes through the equilibrium certificate
    loc = local_certificate(b.system, b.V, 0.1, LO, UP)
    st, w = check_condition(cert, 10.0, LO, UP, local=loc)
    assert st == VERIFIED_A and w is None
    st, _ = check_condition(cert, 0.5, np.array([0.9, 0.9]), np.array([1.0, 1.0]))
    assert st == VERIFIED_B
    st, w = check_condition(_pocket(), 1.0, np.array([0.4, 0.4]), np.array([0.6, 0.6]))
    assert st == FALSIFIED
    assert not condition_holds(_pocket(), w, 1.0)[0]


def test_check_condition_undecided_without_witness():
    cert = _ex1(kappa=0.1)
    # a box straddling the rho level set where neither clause is provable in one shot
    st, w = check_condition(cert, 1.0, np.array([0.5, 0.5]), np.array([0.9, 0.9]),
                            budget=Budget(mode="interval"))
    assert st in (UNDECIDED, VERIFIED_A, VERIFIED_B) and w is None


def test_branch_examples():
    root = UP - LO
    (a_lo, a_up), (b_lo, b_up) = branch(LO, UP, root, np.zeros(2))
    assert np.array_equal(a_up, [0.0, 1.0]) and np.array_equal(b_lo, [0.0, -1.0])
    (a_lo, a_up), _ = branch(np.array([0.2, 0.0]), np.array([0.8, 0.4]), root, np.zeros(2))
    assert a_up[0] == pytest.approx(0.5)
    # xi* near an edge (outside the middle 60%) falls back to the midpoint
    (a_lo, a_up), _ = branch(LO, UP, root, np.array([0.9, 0.0]))
    assert a_up[0] == 0.0
    assert branch(np.zeros(2), np.full(2, 1e-6), root, np.zeros(2)) is None


def test_branch_partitions_parent():
    rng = np.random.default_rng(3)
    root = np.array([2.0, 4.0, 1.0])
    for _ in range(100):
        lo = rng.uniform(-1, 0, 3)
        up = lo + rng.uniform(0.01, 1, 3)
        (l1, u1), (l2, u2) = branch(lo, up, root, rng.uniform(-1, 1, 3))
        d = int(np.nonzero(u1 != up)[0][0])
        assert u1[d] == l2[d] and np.array_equal(l1, lo) and np.array_equal(u2, up)
        assert np.prod(u1 - l1) + np.prod(u2 - l2) == pytest.approx(np.prod(up - lo))


def test_subdomain_validation():
    with pytest.raises(ValueError):
        SubDomain(np.ones(2), np.zeros(2))


# -- branch and bound -------------------------------------------------------------------


def test_bnb_example1_one_domain():
    res = verify(_ex1(), 10.0)
    assert res.verdict == "verified" and res.stats["domains_explored"] == 1


def test_bnb_falsifies_planted_violation():
    cert = _pocket()
    r1 = bnb_verify(cert, 1.0, seed=0)
    r2 = bnb_verify(cert, 1.0, seed=0)
    assert r1.verdict == "falsified"
    assert not condition_holds(cert, r1.counterexample, 1.0)[0]
    assert np.array_equal(r1.counterexample, r2.counterexample)


def test_bnb_respects_domain_budget():
    res = bnb_verify(_pocket(), 1.0, Budget(max_domains=1))
    assert res.verdict in ("unknown", "falsified")


def test_verified_results_are_sound():
    cert = _ex1()
    res = verify(cert, 1.5)
    assert res.verified
    X = np.random.default_rng(4).uniform(LO, UP, (1_000_000, 2))
    assert np.all(condition_holds(cert, X, 1.5))


def test_local_certificate_example1():
    b = example1_bundle()
    loc = local_certificate(b.system, b.V, 0.1, LO, UP)
    assert loc.ok and np.all(loc.lo <= 0) and np.all(loc.up >= 0)


def test_local_certificate_fails_when_not_contracting():
    plant = make_plant("single_integrator")
    b = GraphBuilder()
    x = b.input(2)
    net = b.build({"out": b.scale(x, 0.5)})
    system = ClosedLoopSystem(plant, Controller.for_plant(plant, net))
    V = LyapunovCandidate("quadratic", np.zeros(2), np.eye(2))
    assert not local_certificate(system, V, 0.1, LO, UP).ok


# -- rho bisection ------------------------------------------------------------------------


def _stub(limit, calls=None):
    def fn(r):
        if calls is not None:
            calls.append(r)
        return CertificateResult("verified" if r <= limit else "falsified", r)
    return fn


def test_bisect_stub_contract():
    res = bisect_rho(None, 1.0, lam=2.0, tol=0.1, verify_fn=_stub(2.0), cap=np.inf)
    assert 1.9 <= res.rho_max <= 2.0


def test_bisect_stub_downward_search():
    res = bisect_rho(None, 8.0, lam=2.0, tol=0.01, verify_fn=_stub(3.0), cap=np.inf)
    assert 2.99 <= res.rho_max <= 3.0


def test_bisect_no_bisection_when_bracket_within_tol():
    calls = []
    res = bisect_rho(None, 1.0, lam=2.0, tol=1.0, verify_fn=_stub(1.5, calls), cap=np.inf)
    assert calls == [1.0, 2.0] and res.rho_max == 1.0


def test_bisect_floor_gives_unknown():
    res = bisect_rho(None, 1.0, lam=2.0, verify_fn=_stub(-1.0), cap=np.inf)
    assert res.rho_max == 0.0 and res.result.verdict == "unknown"


def test_bisect_argument_checks():
    with pytest.raises(ValueError):
        bisect_rho(None, 0.0, verify_fn=_stub(1.0), cap=1.0)
    with pytest.raises(ValueError):
        bisect_rho(None, 1.0, lam=1.0, verify_fn=_stub(1.0), cap=1.0)


def test_bisect_monotone_on_stub():
    rng = np.random.default_rng(5)
    for limit in rng.uniform(0.1, 10, 20):
        res = bisect_rho(None, 1.0, tol=1e-3, verify_fn=_stub(limit), cap=np.inf)
        assert limit - 1e-3 <= res.rho_max <= limit
        for a in res.attempts:
            assert (a["verdict"] == "verified") == (a["rho"] <= limit)


def test_bisect_example1_hits_cap():
    cert = _ex1()
    res = bisect_rho(cert, 1.0)
    assert res.rho_max >= 2.0 - 1e-3
    assert res.rho_max == res.cap


def test_monotonicity_spot_check():
    cert = _ex1(kappa=0.1)
    for r in (0.5, 1.0, 1.9):
        assert verify(cert, r).verified


def test_two_step_baseline_example1():
    res = two_step_baseline(_ex1())
    assert res.verified
    assert res.rho_tilde == pytest.approx(1.0, abs=1e-6) and res.rho_tilde <= 1.0


def test_two_step_baseline_falsified_step1():
    res = two_step_baseline(_pocket())
    assert not res.verified and res.derivative.verdict == "falsified"
