import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurolyap.graph import Graph, GraphBuilder, GraphError, backward, forward, relax, relax_binary
from neurolyap.graph.relax import RELAXABLE_UNARY


def _unary(op, **kw):
    b = GraphBuilder()
    x = b.input(1)
    y = getattr(b, op)(x, **kw)
    return b.build([y])


def test_affine_forward():
    b = GraphBuilder()
    x = b.input(1)
    g = b.build([b.affine(x, np.array([[2.0]]), np.array([1.0]))])
    assert g(np.array([0.5]))[0] == 2.0


def test_leaky_relu_and_clamp_forward():
    assert _unary("leaky_relu")(np.array([-1.0]))[0] == pytest.approx(-0.1)
    assert _unary("clamp", lo=-1.0, hi=1.0)(np.array([3.0]))[0] == 1.0


def test_square_gradient():
    b = GraphBuilder()
    x = b.input(1)
    g = b.build([b.mul(x, x)])
    (gx,), _ = backward(g, np.array([3.0]), cotangent=np.array([1.0]))
    assert gx[0] == 6.0


def test_saturated_clamp_gradient_is_zero():
    g = _unary("clamp", lo=-1.0, hi=1.0)
    (gx,), _ = backward(g, np.array([3.0]), cotangent=np.array([1.0]))
    assert gx[0] == 0.0


def test_kink_uses_right_derivative():
    (gx,), _ = backward(_unary("abs"), np.array([0.0]), cotangent=np.array([1.0]))
    assert gx[0] == 1.0
    (gx,), _ = backward(_unary("leaky_relu"), np.array([0.0]), cotangent=np.array([1.0]))
    assert gx[0] == 1.0


def random_net(rng, depth=None, width=None, in_dim=None, smooth_ops=True):
    """Random graph mixing affine, leaky-relu and smooth primitives."""
    depth = depth or int(rng.integers(1, 5))
    in_dim = in_dim or int(rng.integers(1, 4))
    b = GraphBuilder()
    x = b.input(in_dim)
    h, d = x, in_dim
    for k in range(depth):
        w = width or int(rng.integers(1, 17))
        h = b.affine(h, b.param(f"W{k}", rng.normal(size=(w, d)) / np.sqrt(d)), b.param(f"b{k}", rng.normal(size=w) * 0.3))
        op = rng.choice(["leaky_relu", "sin", "cos", "abs", "clamp"] if smooth_ops else ["leaky_relu"])
        if op == "clamp":
            h = b.clamp(h, -1.5, 1.5)
        else:
            h = getattr(b, op)(h)
        d = w
    out = b.affine(h, b.param("Wo", rng.normal(size=(1, d))))
    return b.build([out])


def _fd_check(g, x, h=1e-6):
    (gx,), gp = backward(g, x, cotangent=np.ones(g.output_dims[0]))
    fd = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fd[i] = (g(x + e).sum() - g(x - e).sum()) / (2 * h)
    return gx, fd, gp


def test_gradient_check_random_graphs():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 100:
        g = random_net(rng)
        x = rng.normal(size=g.input_dims[0])
        if g.kink_margin(g.trace(x))[0] < 1e-3:
            continue  # stay in the smooth region
        gx, fd, _ = _fd_check(g, x)
        rel = np.abs(gx - fd) / np.maximum(np.abs(fd), 1e-6)
        assert np.all(rel <= 1e-5) or np.allclose(gx, fd, atol=1e-9)
        checked += 1


def test_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    g = random_net(rng, depth=2, width=5, in_dim=3)
    X = rng.normal(size=(7, 3))
    tr = g.trace(X)
    _, gp = g.backward(tr, [np.ones((7, 1))])
    for name in sorted(g.trainable):
        p = g.params[name]
        for idx in list(np.ndindex(p.shape))[:3]:
            d = np.zeros_like(p)
            d[idx] = 1e-6
            f1 = g.forward(X, params={name: p + d})[0].sum()
            f0 = g.forward(X, params={name: p - d})[0].sum()
            fd = (f1 - f0) / 2e-6
            assert gp[name][idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_forward_is_deterministic():
    rng = np.random.default_rng(2)
    g = random_net(rng, depth=3)
    x = rng.normal(size=(50, g.input_dims[0]))
    a = forward(g, x)[0]
    b = forward(g, x)[0]
    assert np.array_equal(a, b)


def test_shape_errors_at_construction():
    b = GraphBuilder()
    x = b.input(2)
    with pytest.raises(GraphError):
        b.affine(x, np.ones((3, 4)))
    with pytest.raises(GraphError):
        b.add(x, b.input(3))
    with pytest.raises(GraphError):
        b.clamp(x, 1.0, -1.0)


def test_input_shape_mismatch_raises():
    g = _unary("sin")
    with pytest.raises(GraphError):
        g(np.zeros(2))


def test_serialization_round_trip():
    rng = np.random.default_rng(3)
    g = random_net(rng, depth=3)
    s = g.to_json()
    g2 = Graph.from_json(s)
    assert g2.to_json() == s
    x = rng.normal(size=(10, g.input_dims[0]))
    assert np.array_equal(g(x), g2(x))


def test_trainable_registry_unique():
    b = GraphBuilder()
    x = b.input(2)
    W = b.param("W", np.eye(2))
    y = b.add(b.affine(x, W), b.affine(x, W))
    g = b.build([y])
    assert sorted(g.trainable) == ["W"]
    _, gp = g.backward(g.trace(np.array([1.0, 2.0])), [np.ones(2)])
    assert np.allclose(gp["W"], 2 * np.outer(np.ones(2), [1.0, 2.0]))


# -- relaxations -----------------------------------------------------------------------


def test_affine_relaxation_is_exact():
    from neurolyap.verifier import crown_bounds

    b = GraphBuilder()
    x = b.input(1)
    g = b.build([b.affine(x, np.array([[2.0]]), np.array([1.0]))])
    (lb, _), = crown_bounds(g, np.array([0.0]), np.array([1.0]))
    assert np.allclose(lb.A_low, [[[2.0]]]) and np.allclose(lb.A_up, [[[2.0]]])
    assert np.allclose(lb.b_low, 1.0, atol=1e-8) and np.allclose(lb.b_up, 1.0, atol=1e-8)


def test_leaky_relu_relaxation_example():
    al, bl, au, bu = relax("leaky_relu", np.array([-1.0]), np.array([1.0]), slope=0.1)
    assert au[0] == pytest.approx(0.55) and bu[0] == pytest.approx(0.45, abs=1e-9)
    z = np.linspace(-1, 1, 10_000)
    f = np.where(z >= 0, z, 0.1 * z)
    assert np.all(al * z + bl <= f + 1e-12) and np.all(f <= au * z + bu + 1e-12)


def test_sin_relaxation_example():
    al, bl, au, bu = relax("sin", np.array([0.0]), np.array([np.pi / 4]))
    z = np.linspace(0, np.pi / 4, 10_000)
    assert np.all(al * z + bl <= np.sin(z) + 1e-12) and np.all(np.sin(z) <= au * z + bu + 1e-12)


def test_relax_rejects_inverted_interval():
    with pytest.raises(ValueError):
        relax("sin", np.array([1.0]), np.array([0.0]))


def _domain(op, rng, n):
    if op == "tan":
        l = rng.uniform(-1.4, 1.4, n)
        u = np.minimum(l + rng.uniform(0, 1.5, n), 1.45)
    elif op == "reciprocal":
        s = rng.choice([-1.0, 1.0], n)
        a = rng.uniform(0.05, 5, n)
        l = np.where(s > 0, a, -a - rng.uniform(0, 5, n))
        u = np.where(s > 0, a + rng.uniform(0, 5, n), -a)
    else:
        l = rng.uniform(-8, 8, n)
        u = l + rng.exponential(2.0, n) * rng.choice([0.0, 1.0], n, p=[0.05, 0.95])
    return l, np.maximum(u, l)


@pytest.mark.parametrize("op", RELAXABLE_UNARY)
def test_relaxation_soundness_grid(op):
    rng = np.random.default_rng(RELAXABLE_UNARY.index(op))
    kw = {"lo": -1.0, "hi": 1.0} if op == "clamp" else {}
    l, u = _domain(op, rng, 1000)
    al, bl, au, bu = relax(op, l, u, **kw)
    t = np.linspace(0.0, 1.0, 10_000)
    Z = l[:, None] + (u - l)[:, None] * t[None, :]
    ref = {"leaky_relu": lambda z: np.where(z >= 0, z, 0.1 * z), "clamp": lambda z: np.clip(z, -1, 1),
           "sin": np.sin, "cos": np.cos, "tan": np.tan, "abs": np.abs, "reciprocal": lambda z: 1.0 / z}[op]
    F = ref(Z)
    lo = al[:, None] * Z + bl[:, None]
    up = au[:, None] * Z + bu[:, None]
    tol = 1e-10 * (1 + np.abs(F))
    assert np.all(lo <= F + tol)
    assert np.all(F <= up + tol)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 5), st.floats(-5, 5), st.floats(0, 5), st.sampled_from(["min", "max", "mul"]))
def test_binary_relaxation_soundness(l1, w1, l2, w2, op):
    u1, u2 = l1 + w1, l2 + w2
    (a1, a2, b), (c1, c2, d) = relax_binary(op, np.array([l1]), np.array([u1]), np.array([l2]), np.array([u2]))
    X, Y = np.meshgrid(np.linspace(l1, u1, 60), np.linspace(l2, u2, 60))
    F = {"min": np.minimum, "max": np.maximum, "mul": np.multiply}[op](X, Y)
    tol = 1e-10 * (1 + np.abs(F))
    assert np.all(a1 * X + a2 * Y + b <= F + tol)
    assert np.all(F <= c1 * X + c2 * Y + d + tol)
