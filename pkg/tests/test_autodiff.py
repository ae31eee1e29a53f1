import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mensa import autodiff as ad
from mensa.autodiff import ContractError, DomainError, Graph, backward, forward_eval
from mensa.optim import AdamState, ParamStore, adam_step

H = 1e-6


def grad_check(build, leaves, rel=1e-5, abs_tol=1e-8):
    """Compare backward() with central differences for every leaf.

    ``build(g, vars)`` returns the scalar loss Var.
    """
    g = Graph()
    vs = {k: g.leaf(k, v) for k, v in leaves.items()}
    loss = build(g, vs)
    analytic = backward(g, loss)

    def f(vals):
        g2 = Graph()
        v2 = {k: g2.leaf(k, v) for k, v in vals.items()}
        return ad.scalar_value(build(g2, v2))

    for name, base in leaves.items():
        base = np.asarray(base, dtype=np.float64)
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += H
            minus[idx] -= H
            num[idx] = (f({**leaves, name: plus}) - f({**leaves, name: minus})) / (2 * H)
        a = analytic[name]
        scale = np.linalg.norm(num)
        err = np.linalg.norm(a - num)
        # norm-wise relative error; the difference quotient itself carries
        # ~1e-10 roundoff, so tiny single entries cannot be judged relatively
        if scale > abs_tol:
            assert err <= rel * scale, (name, a, num)
        else:
            assert err <= abs_tol, (name, a, num)
        np.testing.assert_allclose(a, num, rtol=rel, atol=abs_tol)


# -- forward values ---------------------------------------------------------


def test_relu6_clamps():
    g = Graph()
    assert ad.relu6(g.const(7.0)).value == 6.0
    assert ad.relu6(g.const(-2.0)).value == 0.0


def test_selu_fixed_point():
    g = Graph()
    assert ad.selu(g.const(0.0)).value == 0.0


def test_softmax_symmetric():
    g = Graph()
    out = ad.softmax(g.const([2.5, 2.5, 2.5])).value
    np.testing.assert_allclose(out, [1 / 3] * 3, rtol=0, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=1, max_size=12))
def test_softmax_sums_to_one(logits):
    g = Graph()
    out = ad.softmax(g.const(logits)).value
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out >= 0)


def test_log_domain_error_names_node():
    g = Graph()
    x = g.leaf("x", [1.0, -1.0])
    with pytest.raises(DomainError) as info:
        ad.log(x)
    assert info.value.node == 1
    assert "log" in str(info.value)


def test_power_domain_error():
    g = Graph()
    with pytest.raises(DomainError):
        ad.power(g.const(-2.0), 0.5)
    # integer exponents are fine on negatives
    assert ad.power(g.const(-2.0), 2.0).value == 4.0


def test_nan_input_rejected():
    with pytest.raises(ContractError):
        Graph().leaf("x", [1.0, np.nan])


def test_forward_eval_rebinds_leaves():
    g = Graph()
    x = g.leaf("x", 2.0)
    y = ad.exp(x) * x
    forward_eval(g, {"x": 0.5})
    assert y.value == pytest.approx(np.exp(0.5) * 0.5, rel=1e-15)
    with pytest.raises(ContractError):
        forward_eval(g, {"nope": 1.0})


# -- gradients ----------------------------------------------------------------


def test_product_rule():
    g = Graph()
    x, y = g.leaf("x", 3.0), g.leaf("y", 5.0)
    grads = backward(g, x * y)
    assert grads["x"] == 5.0 and grads["y"] == 3.0


def test_exp_derivative_at_zero():
    g = Graph()
    x = g.leaf("x", 0.0)
    assert backward(g, ad.exp(x))["x"] == 1.0


def test_backward_needs_scalar_loss():
    g = Graph()
    x = g.leaf("x", [1.0, 2.0])
    with pytest.raises(ContractError):
        backward(g, x * 2.0)


def test_unused_leaf_gets_zero():
    g = Graph()
    x, y = g.leaf("x", 1.0), g.leaf("y", [1.0, 2.0])
    grads = backward(g, x * 3.0)
    np.testing.assert_array_equal(grads["y"], [0.0, 0.0])


rng0 = np.random.default_rng(11)
VEC = rng0.uniform(0.3, 2.0, size=5)
MAT = rng0.normal(size=(3, 5))
GEN = rng0.normal(size=5) * 2


PRIMITIVE_CASES = {
    "add": (lambda g, v: ad.sum(v["a"] + v["b"] * v["b"]), {"a": VEC, "b": GEN}),
    "sub": (lambda g, v: ad.sum((v["a"] - v["b"]) * v["a"]), {"a": VEC, "b": GEN}),
    "mul": (lambda g, v: ad.sum(v["a"] * v["b"]), {"a": VEC, "b": GEN}),
    "div": (lambda g, v: ad.sum(v["b"] / v["a"]), {"a": VEC, "b": GEN}),
    "neg": (lambda g, v: ad.sum(-v["a"] * v["a"]), {"a": GEN}),
    "exp": (lambda g, v: ad.sum(ad.exp(v["a"])), {"a": GEN}),
    "log": (lambda g, v: ad.sum(ad.log(v["a"])), {"a": VEC}),
    "power": (lambda g, v: ad.sum(ad.power(v["a"], 1.7)), {"a": VEC}),
    "minimum": (lambda g, v: ad.sum(ad.minimum(v["a"], 0.4) * v["a"]), {"a": GEN}),
    "relu6": (lambda g, v: ad.sum(ad.relu6(v["a"] * 3.0) * v["a"]), {"a": GEN}),
    "selu": (lambda g, v: ad.sum(ad.selu(v["a"])), {"a": GEN}),
    "logsumexp": (lambda g, v: ad.logsumexp(v["a"]), {"a": GEN}),
    "softmax": (lambda g, v: ad.sum(ad.softmax(v["a"]) * g.const(np.arange(5.0))), {"a": GEN}),
    "affine": (
        lambda g, v: ad.sum(ad.exp(ad.affine(v["x"], v["W"], v["b"]) * 0.3)),
        {"x": rng0.normal(size=(4, 5)), "W": MAT, "b": rng0.normal(size=3)},
    ),
    "reshape": (lambda g, v: ad.sum(ad.reshape(v["a"], (5, 1)) * g.const(np.ones((5, 2)))), {"a": GEN}),
    "take": (lambda g, v: ad.sum(ad.take(ad.reshape(v["a"], (5, 1)), 0) * 2.0), {"a": GEN}),
    "dropout": (
        lambda g, v: ad.sum(ad.dropout(v["a"], 0.5, np.random.default_rng(3)) * v["a"]),
        {"a": GEN},
    ),
}


@pytest.mark.parametrize("op", sorted(PRIMITIVE_CASES))
def test_primitive_gradient(op):
    build, leaves = PRIMITIVE_CASES[op]
    grad_check(build, leaves)


def random_composite(seed):
    """A random three-layer graph over a batch; returns (build, leaves)."""
    rng = np.random.default_rng(seed)
    d, h1, h2 = rng.integers(2, 5), rng.integers(2, 5), rng.integers(2, 4)
    leaves = {
        "x": rng.normal(size=(3, d)),
        "W1": rng.normal(size=(h1, d)) * 0.7,
        "b1": rng.normal(size=h1) * 0.3,
        "W2": rng.normal(size=(h2, h1)) * 0.7,
        "s": rng.uniform(0.5, 2.0, size=h2),
    }
    act1 = rng.choice(["selu", "relu6", "exp"])
    reduce = rng.choice(["logsumexp", "softmax", "logpow"])

    def build(g, v):
        z = ad.affine(v["x"], v["W1"], v["b1"])
        if act1 == "selu":
            a = ad.selu(z)
        elif act1 == "relu6":
            a = ad.relu6(z * 2.0 + 1.0)
        else:
            a = ad.exp(z * 0.5)
        z2 = ad.affine(a, v["W2"]) / v["s"]
        if reduce == "logsumexp":
            return ad.sum(ad.logsumexp(z2)) * (1.0 / 3)
        if reduce == "softmax":
            return ad.sum(ad.softmax(z2) * g.const(np.arange(float(z2.shape[1]))))
        pos = ad.exp(ad.minimum(z2, 5.0)) + 0.5
        return ad.sum(ad.log(ad.power(pos, 1.5) * v["s"]))

    return build, leaves


@pytest.mark.parametrize("seed", range(100))
def test_random_composite_gradient(seed):
    build, leaves = random_composite(seed)
    grad_check(build, leaves)


def test_backward_is_deterministic():
    build, leaves = random_composite(4)
    g = Graph()
    vs = {k: g.leaf(k, v) for k, v in leaves.items()}
    loss = build(g, vs)
    forward_eval(g)
    first = backward(g, loss)
    forward_eval(g)
    second = backward(g, loss)
    for k in first:
        assert first[k].tobytes() == second[k].tobytes()


# -- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_no_change():
    p = ParamStore()
    p.add("w", [1.0, -2.0])
    st_ = AdamState.for_params(p)
    for _ in range(3):
        adam_step(p, {"w": np.zeros(2)}, st_)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step():
    p = ParamStore()
    p.add("w", 0.0)
    adam_step(p, {"w": np.array(0.5)}, AdamState.for_params(p, lr=1e-3))
    assert float(p["w"]) == pytest.approx(-9.99999980e-4, rel=1e-8)


def textbook_adam(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    return theta


def test_adam_two_steps_match_recursion():
    p = ParamStore()
    p.add("w", 1.5)
    st_ = AdamState.for_params(p, lr=0.01)
    for _ in range(2):
        adam_step(p, {"w": np.array(-0.3)}, st_)
    assert float(p["w"]) == pytest.approx(textbook_adam(1.5, [-0.3, -0.3], lr=0.01), rel=1e-14)
    assert st_.step == 2


def test_adam_coupled_weight_decay():
    p = ParamStore()
    p.add("w", 2.0)
    adam_step(p, {"w": np.array(0.1)}, AdamState.for_params(p, lr=0.01, weight_decay=0.5))
    # effective gradient 0.1 + 0.5 * 2 = 1.1
    assert float(p["w"]) == pytest.approx(textbook_adam(2.0, [1.1], lr=0.01), rel=1e-14)


def test_adam_shape_mismatch():
    p = ParamStore()
    p.add("w", [1.0, 2.0])
    with pytest.raises(ContractError):
        adam_step(p, {"w": np.zeros(3)}, AdamState.for_params(p))
    with pytest.raises(ContractError):
        adam_step(p, {}, AdamState.for_params(p))


def test_param_store_rules():
    p = ParamStore()
    p.add("a", np.zeros((2, 3)))
    with pytest.raises(ContractError):
        p.add("a", 1.0)
    with pytest.raises(ContractError):
        p["a"] = np.zeros(6)
    assert p.size() == 6
