import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pxm.autodiff import ParamStore, Tensor, backward, grad_check
from pxm.prob_embed import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    FrameEmbeddingSet,
    LossWeights,
    ProbEmbedding,
    ProjectionHeads,
    combined_loss,
    csd,
    identity_match,
    infonce_loss,
    match_prob,
    pairwise_csd,
    pcme_matching_loss,
    teacher_aggregate,
    uncertainty_scalar,
    vib_regularizer,
)


def _random_embedding(rng, d=8, lv_lo=-2.0, lv_hi=0.5) -> ProbEmbedding:
    mu = rng.normal(size=d)
    mu /= np.linalg.norm(mu)
    return ProbEmbedding(mu, rng.uniform(lv_lo, lv_hi, size=d))


# -- csd ------------------------------------------------------------------------


def test_csd_matched_pair_at_variance_floor_is_tiny():
    d = 256
    mu = np.zeros(d)
    mu[0] = 1.0
    z = ProbEmbedding(mu, np.full(d, LOGVAR_MIN))
    expected = 2 * d * np.exp(LOGVAR_MIN)
    assert csd(z, z) == pytest.approx(expected, rel=1e-12)
    assert csd(z, z) < 0.05


def test_csd_unit_variance_gives_2d():
    d = 256
    mu = np.zeros(d)
    mu[0] = 1.0
    z1 = ProbEmbedding(mu, np.zeros(d))
    z2 = ProbEmbedding(mu, np.zeros(d))
    assert csd(z1, z2) == pytest.approx(512.0)


def test_csd_matches_monte_carlo():
    # Oracle: E||z1 - z2||^2 over independent Gaussian draws.
    rng = np.random.default_rng(101)
    for _ in range(5):
        z1, z2 = _random_embedding(rng), _random_embedding(rng)
        draws = 200_000
        s1 = z1.mu + rng.normal(size=(draws, 8)) * np.sqrt(z1.var)
        s2 = z2.mu + rng.normal(size=(draws, 8)) * np.sqrt(z2.var)
        mc = float(np.mean(np.sum((s1 - s2) ** 2, axis=1)))
        assert abs(csd(z1, z2) - mc) / csd(z1, z2) < 0.02


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_csd_symmetric_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    z1, z2 = _random_embedding(rng), _random_embedding(rng)
    assert csd(z1, z2) == csd(z2, z1)
    assert csd(z1, z2) >= 0.0
    assert csd(z1, z1) == pytest.approx(2 * np.sum(z1.var))


def test_csd_rejects_dim_mismatch():
    z1 = ProbEmbedding(np.ones(4), np.zeros(4))
    z2 = ProbEmbedding(np.ones(5), np.zeros(5))
    with pytest.raises(Exception):
        csd(z1, z2)


def test_pairwise_csd_agrees_with_scalar():
    rng = np.random.default_rng(5)
    a = [_random_embedding(rng, 6) for _ in range(3)]
    b = [_random_embedding(rng, 6) for _ in range(4)]
    mat = pairwise_csd(
        Tensor(np.stack([z.mu for z in a])), Tensor(np.stack([z.log_var for z in a])),
        Tensor(np.stack([z.mu for z in b])), Tensor(np.stack([z.log_var for z in b])),
    ).data
    for i in range(3):
        for j in range(4):
            assert mat[i, j] == pytest.approx(csd(a[i], b[j]), rel=1e-12)


# -- match probability --------------------------------------------------------------


def test_match_prob_values():
    assert match_prob(0.0, 1.0, 0.0) == pytest.approx(0.5)
    assert match_prob(1e6, 1.0, 0.0) < 1e-12
    assert match_prob(2.0, 1.0, 0.0) == pytest.approx(1.0 / (1.0 + np.e**2))


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0.01, 50.0), b=st.floats(-5.0, 5.0),
       d1=st.floats(0.0, 100.0), d2=st.floats(0.0, 100.0))
def test_match_prob_strictly_decreasing(a, b, d1, d2):
    # Stay where float64 can resolve the difference: away from the
    # exp underflow cliff and with a logit gap above rounding noise.
    if a * max(d1, d2) > 700.0 or a * abs(d1 - d2) < 1e-9:
        return
    lo, hi = sorted([d1, d2])
    assert match_prob(lo, a, b) > match_prob(hi, a, b)


def test_match_prob_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        match_prob(1.0, 0.0, 0.0)


# -- pcme matching loss ---------------------------------------------------------------


def _loss_inputs(mu_a, lv_a, mu_b, lv_b):
    return (Tensor(np.atleast_2d(mu_a)), Tensor(np.atleast_2d(lv_a)),
            Tensor(np.atleast_2d(mu_b)), Tensor(np.atleast_2d(lv_b)))


def test_pcme_loss_single_pair_at_half_prob_is_ln2():
    # Identical means, variance ~0: distance ~0 so p = 0.5 with a=1, b=0.
    mu = np.zeros(4)
    mu[0] = 1.0
    args = _loss_inputs(mu, np.full(4, -40.0), mu, np.full(4, -40.0))
    loss = pcme_matching_loss(*args, np.array([[1.0]]), Tensor(1.0), Tensor(0.0))
    assert loss.item() == pytest.approx(np.log(2.0), abs=1e-9)


def test_pcme_loss_single_nonpair_at_half_prob_is_ln2():
    mu = np.zeros(4)
    mu[0] = 1.0
    args = _loss_inputs(mu, np.full(4, -40.0), mu, np.full(4, -40.0))
    loss = pcme_matching_loss(*args, np.array([[0.0]]), Tensor(1.0), Tensor(0.0))
    assert loss.item() == pytest.approx(np.log(2.0), abs=1e-9)


def test_pcme_loss_2x2_matches_hand_bce():
    rng = np.random.default_rng(7)
    mu_a, mu_b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    lv_a, lv_b = rng.uniform(-3, 0, (2, 3)), rng.uniform(-3, 0, (2, 3))
    match = np.array([[1.0, 0.0], [0.0, 1.0]])
    a_scale, b_shift = 2.0, 0.5
    loss = pcme_matching_loss(
        Tensor(mu_a), Tensor(lv_a), Tensor(mu_b), Tensor(lv_b),
        match, Tensor(a_scale), Tensor(b_shift),
    )
    # Hand computation from scalar csd + logistic + BCE.
    total = 0.0
    for i in range(2):
        for j in range(2):
            d = csd(ProbEmbedding(mu_a[i], lv_a[i]), ProbEmbedding(mu_b[j], lv_b[j]))
            p = match_prob(d, a_scale, b_shift)
            y = match[i, j]
            total += -(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert loss.item() == pytest.approx(total / 4.0, rel=1e-10)


def test_pcme_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        pcme_matching_loss(
            Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))),
            Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))),
            np.zeros((0, 2)), Tensor(1.0), Tensor(0.0),
        )


def test_pcme_loss_gradients_pass_fd_check():
    rng = np.random.default_rng(11)
    params = ParamStore()
    params.add("mu_a", rng.normal(size=(2, 4)))
    params.add("lv_a", rng.uniform(-2, 0, (2, 4)))
    params.add("mu_b", rng.normal(size=(3, 4)))
    params.add("lv_b", rng.uniform(-2, 0, (3, 4)))
    params.add("a_raw", 1.3)
    params.add("b", 0.2)
    match = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])

    def loss_fn():
        return pcme_matching_loss(
            params["mu_a"], params["lv_a"], params["mu_b"], params["lv_b"],
            match, params["a_raw"].softplus(), params["b"],
        )

    assert grad_check(loss_fn, params, eps=1e-5) < 1e-4


# -- infonce ---------------------------------------------------------------------------


def test_infonce_batch_of_one_is_zero():
    mu = Tensor(np.array([[1.0, 0.0]]))
    loss = infonce_loss(mu, mu, np.array([[1.0]]), temperature=0.07)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_infonce_2x2_closed_form():
    tau = 0.5
    mu = Tensor(np.eye(2))
    loss = infonce_loss(mu, mu, np.eye(2), temperature=tau)
    s_on, s_off = 1.0, 0.0
    expected = np.log(1.0 + np.exp((s_off - s_on) / tau))
    assert loss.item() == pytest.approx(expected, rel=1e-12)


def test_infonce_uniform_logits_is_ln_n():
    n, d = 5, 4
    mu_a = Tensor(np.tile(np.eye(1, d), (n, 1)))   # all identical -> equal sims
    loss = infonce_loss(mu_a, mu_a, np.eye(n), temperature=0.07)
    assert loss.item() == pytest.approx(np.log(n), rel=1e-12)


def test_infonce_rejects_row_without_positive():
    mu = Tensor(np.eye(2))
    with pytest.raises(ValueError):
        infonce_loss(mu, mu, np.zeros((2, 2)), temperature=0.1)


def test_infonce_gradients_pass_fd_check():
    rng = np.random.default_rng(13)
    params = ParamStore()
    params.add("mu_a", rng.normal(size=(3, 4)))
    params.add("mu_b", rng.normal(size=(3, 4)))

    def loss_fn():
        return infonce_loss(params["mu_a"], params["mu_b"], np.eye(3), temperature=0.2)

    assert grad_check(loss_fn, params, eps=1e-5) < 1e-4


# -- vib --------------------------------------------------------------------------------


def test_vib_standard_normal_is_zero():
    loss = vib_regularizer(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_vib_direct_formula_d1():
    loss = vib_regularizer(Tensor(np.zeros((1, 1))), Tensor(np.ones((1, 1))))
    assert loss.item() == pytest.approx(0.5 * (np.e - 2.0), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_vib_nonnegative(seed):
    rng = np.random.default_rng(seed)
    loss = vib_regularizer(
        Tensor(rng.normal(size=(3, 6))), Tensor(rng.uniform(-3, 3, (3, 6)))
    )
    assert loss.item() >= 0.0


def test_vib_gradients_pass_fd_check():
    rng = np.random.default_rng(17)
    params = ParamStore()
    params.add("mu", rng.normal(size=(2, 5)))
    params.add("lv", rng.uniform(-2, 1, (2, 5)))

    def loss_fn():
        return vib_regularizer(params["mu"], params["lv"])

    assert grad_check(loss_fn, params, eps=1e-5) < 1e-4


# -- teacher aggregation -------------------------------------------------------------


def test_teacher_single_frame_hits_variance_floor():
    z = teacher_aggregate(FrameEmbeddingSet(np.ones((1, 4))))
    np.testing.assert_allclose(z.mu, 1.0)
    np.testing.assert_allclose(z.log_var, np.log(1e-8))


def test_teacher_symmetric_pair():
    rng = np.random.default_rng(3)
    e = rng.normal(size=4)
    z = teacher_aggregate(FrameEmbeddingSet(np.stack([e, -e])))
    np.testing.assert_allclose(z.mu, 0.0, atol=1e-15)
    np.testing.assert_allclose(np.exp(z.log_var), e * e + 1e-8, rtol=1e-12)


def test_teacher_matches_two_pass_oracle():
    rng = np.random.default_rng(29)
    for _ in range(50):
        n = int(rng.integers(1, 65))
        frames = rng.normal(size=(n, 16))
        z = teacher_aggregate(FrameEmbeddingSet(frames))
        # Direct two-pass loop.
        mu = np.zeros(16)
        for row in frames:
            mu += row
        mu /= n
        var = np.zeros(16)
        for row in frames:
            var += (row - mu) ** 2
        var /= n
        np.testing.assert_allclose(z.mu, mu, atol=1e-12)
        np.testing.assert_allclose(np.exp(z.log_var), var + 1e-8, atol=1e-12)


def test_frame_set_rejects_empty_or_nonfinite():
    with pytest.raises(ValueError):
        FrameEmbeddingSet(np.zeros((0, 4)))
    with pytest.raises(ValueError):
        FrameEmbeddingSet(np.array([[np.nan, 1.0]]))


# -- combined loss & uncertainty --------------------------------------------------------


def test_combined_loss_reductions():
    assert combined_loss(2.0, 4.0, 1.0) == pytest.approx(2.0)
    assert combined_loss(2.0, 4.0, 0.5) == pytest.approx(3.0)
    assert combined_loss(2.0, 4.0, 0.0) == pytest.approx(4.0)


def test_combined_loss_affine_in_lambda():
    l1, l2 = 1.7, 0.3
    vals = [combined_loss(l1, l2, lam) for lam in (0.0, 0.25, 0.5, 0.75, 1.0)]
    diffs = np.diff(vals)
    np.testing.assert_allclose(diffs, diffs[0], rtol=1e-12)


def test_combined_loss_rejects_bad_lambda():
    with pytest.raises(ValueError):
        combined_loss(1.0, 1.0, 1.5)


def test_uncertainty_scalar_values():
    z = ProbEmbedding(np.zeros(8), np.zeros(8))
    assert uncertainty_scalar(z) == pytest.approx(1.0)
    z4 = ProbEmbedding(np.zeros(8), np.full(8, np.log(4.0)))
    assert uncertainty_scalar(z4) == pytest.approx(4.0)


def test_uncertainty_scalar_matches_loop():
    rng = np.random.default_rng(37)
    lv = rng.uniform(-3, 3, 32)
    z = ProbEmbedding(np.zeros(32), lv)
    acc = 0.0
    for v in lv:
        acc += np.exp(v)
    assert uncertainty_scalar(z) == pytest.approx(acc / 32, rel=1e-12)


def test_uncertainty_orders_shifted_populations():
    rng = np.random.default_rng(41)
    base = rng.uniform(-2, 0, size=(20, 16))
    lo = [uncertainty_scalar(ProbEmbedding(np.zeros(16), lv)) for lv in base]
    hi = [uncertainty_scalar(ProbEmbedding(np.zeros(16), lv + 1.0)) for lv in base]
    assert max(lo) < min(hi) or all(h > l for h, l in zip(hi, lo))
    assert all(h > l for h, l in zip(hi, lo))


# -- projection heads ---------------------------------------------------------------


def test_heads_normalize_mu():
    rng = np.random.default_rng(43)
    params = ParamStore()
    heads = ProjectionHeads("h", 6, 8)
    heads.init_into(params, rng)
    mu, lv = heads(Tensor(rng.normal(size=(5, 6))), params)
    np.testing.assert_allclose(np.linalg.norm(mu.data, axis=1), 1.0, atol=1e-9)
    assert np.all(lv.data >= LOGVAR_MIN) and np.all(lv.data <= LOGVAR_MAX)


def test_heads_mu_direction_example():
    params = ParamStore()
    heads = ProjectionHeads("h", 3, 4)
    params.add("h.mu.w", np.zeros((3, 4)))
    params.add("h.mu.b", np.array([2.0, 0.0, 0.0, 0.0]))
    params.add("h.lv.w", np.zeros((3, 4)))
    params.add("h.lv.b", np.full(4, -2.0))
    mu, lv = heads(Tensor(np.ones((1, 3))), params)
    np.testing.assert_allclose(mu.data, [[1.0, 0.0, 0.0, 0.0]])
    np.testing.assert_allclose(lv.data, -2.0)


def test_heads_zero_norm_mu_is_error():
    params = ParamStore()
    heads = ProjectionHeads("h", 3, 4)
    params.add("h.mu.w", np.zeros((3, 4)))
    params.add("h.mu.b", np.zeros(4))
    params.add("h.lv.w", np.zeros((3, 4)))
    params.add("h.lv.b", np.zeros(4))
    with pytest.raises(ValueError):
        heads(Tensor(np.ones((1, 3))), params)


def test_heads_gradients_pass_fd_check():
    rng = np.random.default_rng(47)
    params = ParamStore()
    heads = ProjectionHeads("h", 4, 5)
    heads.init_into(params, rng)
    x = Tensor(rng.normal(size=(2, 4)))

    def loss_fn():
        mu, lv = heads(x, params)
        return (mu * 0.3).sum() + (lv.exp() * 0.1).sum()

    assert grad_check(loss_fn, params, eps=1e-5) < 1e-4


def test_loss_weights_validation():
    LossWeights()  # defaults are valid
    with pytest.raises(ValueError):
        LossWeights(lam=1.2)
    with pytest.raises(ValueError):
        LossWeights(sigmoid_scale=0.0)
    with pytest.raises(ValueError):
        LossWeights(vib_weight=-1.0)
    with pytest.raises(ValueError):
        LossWeights(infonce_temperature=0.0)


def test_identity_match():
    np.testing.assert_array_equal(identity_match(3), np.eye(3))
