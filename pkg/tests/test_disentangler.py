import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vibser import diffcore as dc
from vibser.diffcore import forward_backward
from vibser.disentangler import (
    BranchParams,
    GaussianPosterior,
    branch_kl,
    encode_posterior,
    init_branch,
    sample_latent,
    weighted_sum,
)

from oracles import check_gradients, gauss_hermite_kl


def zero_branch(n_layers=3, in_dim=4, hidden=4, latent=2):
    z = lambda *s: dc.parameter(np.zeros(s))
    return BranchParams(
        layer_logits=z(n_layers),
        enc_w1=z(in_dim, hidden), enc_b1=z(hidden),
        enc_w2=z(hidden, hidden), enc_b2=z(hidden),
        mu_w=z(hidden, latent), mu_b=z(latent),
        logsigma_w=z(hidden, latent), logsigma_b=z(latent),
    )


# ---------------------------------------------------------------------------
# weighted_sum


def test_weighted_sum_uniform_average():
    a = np.full((1, 2, 3), 2.0)
    b = np.full((1, 2, 3), 4.0)
    x = dc.constant(np.concatenate([a, b], axis=0))
    out = weighted_sum(x, dc.constant(np.zeros(2)))
    np.testing.assert_allclose(out.data, np.full((2, 3), 3.0))


def test_weighted_sum_hand_computed_softmax():
    # logits [ln 3, 0] -> weights (0.75, 0.25); scalar layers 4 and 0 -> 3.0
    x = dc.constant(np.array([[[4.0]], [[0.0]]]))
    out = weighted_sum(x, dc.constant([math.log(3.0), 0.0]))
    assert out.data[0, 0] == pytest.approx(3.0, abs=1e-12)


@given(st.floats(min_value=-30, max_value=30))
@settings(max_examples=25, deadline=None)
def test_weighted_sum_shift_invariance(c):
    rng = np.random.default_rng(4)
    x = dc.constant(rng.normal(size=(3, 2, 4)))
    logits = rng.normal(size=3)
    a = weighted_sum(x, dc.constant(logits)).data
    b = weighted_sum(x, dc.constant(logits + c)).data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_weighted_sum_weights_normalized():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=5) * 3
    w = dc.softmax(dc.constant(logits), axis=-1).data
    assert np.all(w >= 0)
    assert abs(w.sum() - 1.0) < 1e-6


def test_weighted_sum_shape_mismatch():
    x = dc.constant(np.zeros((3, 2, 4)))
    with pytest.raises(ValueError, match="layer_logits"):
        weighted_sum(x, dc.constant(np.zeros(4)))


def test_weighted_sum_gradients():
    rng = np.random.default_rng(8)
    params = {"logits": dc.parameter(rng.normal(size=3))}
    x = dc.constant(rng.normal(size=(3, 2, 4)))
    w = dc.constant(rng.normal(size=(2, 4)))
    check_gradients(lambda ps: dc.mul(weighted_sum(x, ps["logits"]), w).sum(), params, tol=1e-4)


# ---------------------------------------------------------------------------
# encode_posterior


def test_zero_network_gives_standard_posterior():
    branch = zero_branch()
    post = encode_posterior(branch, dc.constant(np.ones((5, 4))))
    np.testing.assert_array_equal(post.mu.data, np.zeros((5, 2)))
    np.testing.assert_array_equal(post.sigma.data, np.ones((5, 2)))


@pytest.mark.parametrize("t", [1, 3, 9])
def test_posterior_shapes(t):
    rng = np.random.default_rng(1)
    branch = init_branch(rng, n_layers=4, in_dim=6, hidden=6, latent=3)
    post = encode_posterior(branch, dc.constant(rng.normal(size=(t, 6))))
    assert post.mu.shape == (t, 3)
    assert post.sigma.shape == (t, 3)


def test_posterior_hand_computed_single_frame():
    # 1-d -> 1-d network with three scalar weights, hand evaluated
    branch = zero_branch(n_layers=1, in_dim=1, hidden=1, latent=1)
    branch.enc_w1.data = np.array([[2.0]])
    branch.enc_w2.data = np.array([[1.5]])
    branch.mu_w.data = np.array([[0.5]])
    x = 0.7
    u = math.sqrt(2 / math.pi) * (2 * x + 0.044715 * (2 * x) ** 3)
    enc = 1.5 * (0.5 * (2 * x) * (1 + math.tanh(u)))
    post = encode_posterior(branch, dc.constant([[x]]))
    assert post.mu.data[0, 0] == pytest.approx(0.5 * enc, abs=1e-6)
    assert post.sigma.data[0, 0] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# sample_latent


def test_infer_mode_is_exactly_mu():
    rng = np.random.default_rng(2)
    post = GaussianPosterior(dc.constant(rng.normal(size=(4, 2))),
                             dc.constant(np.exp(rng.normal(size=(4, 2)))))
    z = sample_latent(post, "infer")
    assert z.data is post.mu.data


def test_train_mode_zero_noise_is_mu():
    post = GaussianPosterior(dc.constant([[1.0, 2.0]]), dc.constant([[3.0, 4.0]]))
    z = sample_latent(post, "train", np.zeros((1, 2)))
    np.testing.assert_array_equal(z.data, post.mu.data)


def test_train_mode_requires_noise():
    post = GaussianPosterior(dc.constant([[0.0]]), dc.constant([[1.0]]))
    with pytest.raises(ValueError, match="noise"):
        sample_latent(post, "train")


def test_gradients_reach_both_heads():
    rng = np.random.default_rng(3)
    branch = init_branch(rng, n_layers=2, in_dim=4, hidden=4, latent=2)
    x = dc.constant(rng.normal(size=(3, 4)))
    noise = rng.standard_normal((3, 2))
    target = dc.constant(rng.normal(size=(3, 2)))

    def fn(ps):
        post = encode_posterior(branch, x)
        z = sample_latent(post, "train", noise)
        diff = dc.sub(z, target)
        return dc.mul(diff, diff).sum()

    params = {"mu_w": branch.mu_w, "logsigma_w": branch.logsigma_w}
    _, grads = forward_backward(fn, params)
    assert np.abs(grads["mu_w"]).max() > 0
    assert np.abs(grads["logsigma_w"]).max() > 0
    check_gradients(fn, params, tol=1e-4)


# ---------------------------------------------------------------------------
# branch_kl


def test_branch_kl_zero_at_prior():
    post = GaussianPosterior(dc.constant(np.zeros((3, 4))), dc.constant(np.ones((3, 4))))
    assert branch_kl(post).item() == 0.0


def test_branch_kl_mean_over_frames():
    # frame KLs 0.5 (mu=1) and 1.5 (mu^2=3) -> mean 1.0
    mu = np.array([[1.0], [math.sqrt(3.0)]])
    post = GaussianPosterior(dc.constant(mu), dc.constant(np.ones((2, 1))))
    assert branch_kl(post).item() == pytest.approx(1.0, abs=1e-12)


def test_branch_kl_matches_quadrature():
    rng = np.random.default_rng(9)
    for _ in range(20):
        mu = rng.normal(size=(4, 3))
        sigma = np.exp(rng.normal(size=(4, 3)) * 0.5)
        post = GaussianPosterior(dc.constant(mu), dc.constant(sigma))
        expected = np.mean([gauss_hermite_kl(mu[t], sigma[t]) for t in range(4)])
        assert branch_kl(post).item() == pytest.approx(expected, abs=1e-8)


# ---------------------------------------------------------------------------
# branch independence


def test_branches_share_no_parameters():
    rng = np.random.default_rng(5)
    con = init_branch(rng, 4, 6, 6, 2)
    des = init_branch(rng, 4, 6, 6, 2)
    con_ids = {id(t) for t in con.named("content").values()}
    des_ids = {id(t) for t in des.named("descriptor").values()}
    assert not (con_ids & des_ids)

    x = dc.constant(rng.normal(size=(4, 3, 6)))
    h = weighted_sum(x, des.layer_logits)
    before = encode_posterior(des, h).mu.data.copy()
    con.enc_w1.data = con.enc_w1.data + 100.0
    con.layer_logits.data = con.layer_logits.data + 5.0
    after = encode_posterior(des, weighted_sum(x, des.layer_logits)).mu.data
    np.testing.assert_array_equal(before, after)
