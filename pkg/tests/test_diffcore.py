import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vibser import diffcore as dc
from vibser.diffcore import (
    GradTape,
    NonFiniteError,
    Tensor,
    constant,
    cross_entropy_from_logits,
    forward_backward,
    kl_to_standard_normal,
    parameter,
    reparameterize,
)

from oracles import check_gradients, finite_difference, gauss_hermite_kl, max_rel_error


def test_sum_gradient_is_ones():
    p = parameter([1.0, -2.0, 3.0])
    loss, grads = forward_backward(lambda ps: ps["p"].sum(), {"p": p})
    assert loss == pytest.approx(2.0)
    np.testing.assert_array_equal(grads["p"], np.ones(3))


def test_quadratic_gradient():
    p = parameter([3.0, 4.0])
    loss, grads = forward_backward(
        lambda ps: dc.scale(dc.mul(ps["p"], ps["p"]).sum(), 0.5), {"p": p})
    assert loss == pytest.approx(12.5)
    np.testing.assert_allclose(grads["p"], [3.0, 4.0])


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    params = {
        "w1": parameter(rng.normal(size=(4, 5))),
        "b1": parameter(rng.normal(size=5)),
        "w2": parameter(rng.normal(size=(5, 3))),
        "b2": parameter(rng.normal(size=3)),
    }
    x = constant(rng.normal(size=(2, 4)))

    def fn(ps):
        h = dc.gelu(dc.add(dc.matmul(x, ps["w1"]), ps["b1"]))
        out = dc.add(dc.matmul(h, ps["w2"]), ps["b2"])
        return dc.mul(out, out).sum()

    check_gradients(fn, params, tol=1e-4)


def test_unused_parameter_gets_exact_zero_gradient():
    used = parameter([1.0, 2.0])
    unused = parameter([[5.0]])
    _, grads = forward_backward(lambda ps: ps["used"].sum(), {"used": used, "unused": unused})
    assert grads["unused"].shape == (1, 1)
    assert np.all(grads["unused"] == 0.0)


def test_frozen_parameters_absent_from_grads():
    a = parameter([1.0])
    b = parameter([2.0])
    _, grads = forward_backward(
        lambda ps: dc.mul(ps["a"], ps["b"]).sum(), {"a": a, "b": b}, trainable=["a"])
    assert set(grads) == {"a"}


def test_forward_backward_rejects_non_scalar():
    p = parameter([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        forward_backward(lambda ps: ps["p"], {"p": p})


def test_non_finite_intermediate_names_the_op():
    p = parameter([1000.0])
    with pytest.raises(NonFiniteError, match="exp"):
        forward_backward(lambda ps: dc.exp(dc.scale(ps["p"], 10.0)).sum(), {"p": p})


def test_forward_backward_bit_identical_across_runs():
    rng = np.random.default_rng(3)
    params = {"w": parameter(rng.normal(size=(3, 3)))}
    x = constant(rng.normal(size=(2, 3)))

    def fn(ps):
        return dc.gelu(dc.matmul(x, ps["w"])).sum()

    l1, g1 = forward_backward(fn, params)
    l2, g2 = forward_backward(fn, params)
    assert l1 == l2
    np.testing.assert_array_equal(g1["w"], g2["w"])


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform_logits():
    logits = parameter(np.zeros(4))
    for target in range(4):
        out = cross_entropy_from_logits(logits, target)
        assert out.item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_saturated():
    logits = parameter([20.0, 0.0, 0.0])
    assert cross_entropy_from_logits(logits, 0).item() < 1e-8


def test_cross_entropy_closed_form():
    # -log softmax([1, 2])[0] = -log(1 / (1 + e)) = ln(1 + e)
    logits = parameter([1.0, 2.0])
    expected = math.log(1.0 + math.e)
    assert cross_entropy_from_logits(logits, 0).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(1.3132616875182228, abs=1e-12)


def test_cross_entropy_target_out_of_range():
    logits = parameter([0.0, 1.0])
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy_from_logits(logits, 2)


@given(st.integers(min_value=0, max_value=4), st.floats(min_value=-50, max_value=50))
@settings(max_examples=30, deadline=None)
def test_cross_entropy_shift_invariance(target, shift):
    rng = np.random.default_rng(target + 17)
    base = rng.normal(size=5)
    a = cross_entropy_from_logits(constant(base), target).item()
    b = cross_entropy_from_logits(constant(base + shift), target).item()
    assert abs(a - b) < 1e-10


# ---------------------------------------------------------------------------
# KL


def test_kl_zero_at_standard_normal():
    mu = parameter(np.zeros(5))
    sigma = parameter(np.ones(5))
    assert kl_to_standard_normal(mu, sigma).item() == 0.0


def test_kl_unit_mean():
    assert kl_to_standard_normal(parameter([1.0]), parameter([1.0])).item() == pytest.approx(0.5)


def test_kl_sigma_e_closed_form():
    expected = 0.5 * (math.e ** 2 - 3.0)
    got = kl_to_standard_normal(parameter([0.0]), parameter([math.e])).item()
    assert got == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(2.194528, abs=1e-6)


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(ValueError, match="positive"):
        kl_to_standard_normal(parameter([0.0]), parameter([0.0]))


def test_kl_nonnegative_and_zero_only_at_prior():
    rng = np.random.default_rng(11)
    for _ in range(200):
        mu = rng.normal(size=4)
        sigma = np.exp(rng.normal(size=4) * 0.7)
        val = kl_to_standard_normal(constant(mu), constant(sigma)).item()
        assert val >= 0.0
        if not (np.allclose(mu, 0) and np.allclose(sigma, 1)):
            assert val > 0.0


def test_kl_matches_quadrature_oracle():
    rng = np.random.default_rng(5)
    for _ in range(25):
        mu = rng.normal(size=6)
        sigma = np.exp(rng.normal(size=6) * 0.5)
        got = kl_to_standard_normal(constant(mu), constant(sigma)).item()
        assert got == pytest.approx(gauss_hermite_kl(mu, sigma), abs=1e-8)


# ---------------------------------------------------------------------------
# reparameterize


def test_reparameterize_zero_noise_is_mu():
    mu = parameter([0.5, -1.0])
    sigma = parameter([2.0, 3.0])
    z = reparameterize(mu, sigma, np.zeros(2))
    np.testing.assert_array_equal(z.data, mu.data)


def test_reparameterize_arithmetic():
    z = reparameterize(parameter([1.0]), parameter([2.0]), np.array([0.5]))
    assert z.item() == pytest.approx(2.0)


def test_reparameterize_monte_carlo_moments():
    rng = np.random.default_rng(123)
    noise = rng.standard_normal(100_000)
    mu = constant(np.full(100_000, 0.3))
    sigma = constant(np.full(100_000, 1.7))
    z = reparameterize(mu, sigma, noise).data
    assert abs(z.mean() - 0.3) < 0.02
    assert abs(z.std() - 1.7) < 0.02


def test_reparameterize_no_gradient_to_noise():
    mu = parameter([1.0, 2.0])
    sigma = parameter([1.0, 1.0])
    noise = parameter([0.3, 0.4])  # even a grad-tracked noise input is detached

    def fn(ps):
        return reparameterize(ps["mu"], ps["sigma"], ps["noise"]).sum()

    _, grads = forward_backward(fn, {"mu": mu, "sigma": sigma, "noise": noise})
    np.testing.assert_array_equal(grads["mu"], [1.0, 1.0])
    np.testing.assert_array_equal(grads["noise"], [0.0, 0.0])


def test_reparameterize_shape_mismatch():
    with pytest.raises(ValueError, match=r"shape"):
        reparameterize(parameter([1.0]), parameter([1.0, 2.0]), np.zeros(2))


# ---------------------------------------------------------------------------
# primitive gradient sweep (the per-primitive FD contract)

def _rand(rng, *shape):
    return rng.normal(size=shape)


PRIMITIVE_CASES = {
    "add": lambda ps, aux: dc.add(ps["a"], ps["b"]),
    "sub": lambda ps, aux: dc.sub(ps["a"], ps["b"]),
    "mul": lambda ps, aux: dc.mul(ps["a"], ps["b"]),
    "scale": lambda ps, aux: dc.scale(ps["a"], 1.7),
    "matmul": lambda ps, aux: dc.matmul(ps["a"], ps["b"]),
    "transpose": lambda ps, aux: dc.transpose(ps["a"]),
    "reshape": lambda ps, aux: dc.reshape(ps["a"], (-1,)),
    "concat": lambda ps, aux: dc.concat([ps["a"], ps["b"]], axis=0),
    "narrow": lambda ps, aux: dc.narrow(ps["a"], 0, 1, 2),
    "embedding": lambda ps, aux: dc.embedding(ps["a"], aux["ids"]),
    "relu": lambda ps, aux: dc.relu(ps["a"]),
    "gelu": lambda ps, aux: dc.gelu(ps["a"]),
    "exp": lambda ps, aux: dc.exp(dc.scale(ps["a"], 0.3)),
    "log": lambda ps, aux: dc.log(dc.exp(ps["a"])),
    "softmax": lambda ps, aux: dc.softmax(ps["a"], axis=-1),
    "layer_norm": lambda ps, aux: dc.layer_norm(ps["a4"], ps["g4"], ps["c4"]),
    "sum_axis": lambda ps, aux: dc.reduce_sum(ps["a"], axis=0),
    "mean_axis": lambda ps, aux: dc.reduce_mean(ps["a"], axis=1),
    "cross_entropy": lambda ps, aux: dc.cross_entropy_rows(ps["a"], aux["targets"]),
    "kl_std_normal": lambda ps, aux: dc.kl_to_standard_normal(ps["mu"], ps["sig"]),
    "reparameterize": lambda ps, aux: dc.reparameterize(ps["mu"], ps["sig"], aux["noise"]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    build = PRIMITIVE_CASES[name]
    worst = 0.0
    for trial in range(10):
        rng = np.random.default_rng(1000 + trial)
        params = {
            "a": dc.parameter(_rand(rng, 3, 4)),
            "b": dc.parameter(_rand(rng, 3, 4) if name != "matmul" else _rand(rng, 4, 2)),
            "a4": dc.parameter(_rand(rng, 3, 4)),
            "g4": dc.parameter(1.0 + 0.1 * _rand(rng, 4)),
            "c4": dc.parameter(0.1 * _rand(rng, 4)),
            "mu": dc.parameter(_rand(rng, 5)),
            "sig": dc.parameter(np.exp(0.4 * _rand(rng, 5))),
        }
        aux = {
            "ids": rng.integers(0, 3, size=6),
            "targets": rng.integers(0, 4, size=3),
            "noise": rng.standard_normal(5),
        }
        weights = dc.constant(_rand(rng, *build(params, aux).shape))

        def fn(ps):
            return dc.mul(build(ps, aux), weights).sum()

        worst = max(worst, check_gradients(fn, params, tol=1e-4))
    assert worst <= 1e-4


# ---------------------------------------------------------------------------
# tape behaviour


def test_tape_records_in_order_and_replays_once():
    a = parameter([1.0])
    tape = GradTape()
    with tape:
        out = dc.mul(dc.add(a, a), a).sum()
    assert tape.op_names() == ["add", "mul", "sum"]
    grads = tape.backward(out)
    np.testing.assert_allclose(grads[id(a)], [4.0])


def test_no_tape_means_no_graph():
    a = parameter([1.0, 2.0])
    out = dc.mul(a, a)
    assert not out.requires_grad


def test_weighted_layer_mix_gradients():
    # the broadcast multiply + axis-sum pattern used by the weighted-sum layer
    rng = np.random.default_rng(2)
    logits = dc.parameter(rng.normal(size=3))
    x = dc.constant(rng.normal(size=(3, 2, 4)))
    weights = dc.constant(rng.normal(size=(2, 4)))

    def fn(ps):
        w = dc.reshape(dc.softmax(ps["logits"], axis=-1), (3, 1, 1))
        mixed = dc.reduce_sum(dc.mul(w, x), axis=0)
        return dc.mul(mixed, weights).sum()

    check_gradients(fn, {"logits": logits}, tol=1e-4)
