import numpy as np
import pytest

from pxm.autodiff import (
    Conv1d,
    Dense,
    GlobalAvgPool,
    LayerNorm,
    ParamStore,
    Relu,
    ResidualBlock1d,
    ShapeError,
    Tensor,
    adamw_step,
    backward,
    conv1d,
    dense,
    embedding,
    forward_graph,
    grad_check,
    layer_norm,
    load_checkpoint,
    save_checkpoint,
)


# -- forward_graph ------------------------------------------------------------


def test_forward_graph_identity_chain():
    params = ParamStore()
    x = Tensor(np.arange(6.0).reshape(2, 3))
    out = forward_graph([], x, params)
    assert out is x


def test_forward_graph_zero_dense_gives_zero():
    params = ParamStore()
    layer = Dense("d0", 3, 4)
    params.add("d0.w", np.zeros((3, 4)))
    params.add("d0.b", np.zeros(4))
    out = forward_graph([layer], Tensor(np.random.default_rng(0).normal(size=(2, 3))), params)
    assert np.all(out.data == 0.0)


def test_forward_graph_two_dense_matches_hand_product():
    # Independent oracle: explicit matrix product chain.
    rng = np.random.default_rng(7)
    w1, b1 = rng.normal(size=(3, 5)), rng.normal(size=5)
    w2, b2 = rng.normal(size=(5, 2)), rng.normal(size=2)
    params = ParamStore()
    params.add("a.w", w1), params.add("a.b", b1)
    params.add("b.w", w2), params.add("b.b", b2)
    x = rng.normal(size=(1, 3))
    out = forward_graph([Dense("a", 3, 5), Dense("b", 5, 2)], Tensor(x), params)
    expected = (x @ w1 + b1) @ w2 + b2
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-14)


def test_forward_graph_shape_mismatch_names_layer():
    params = ParamStore()
    layer = Dense("dense3", 3, 4)
    params.add("dense3.w", np.zeros((3, 4)))
    params.add("dense3.b", np.zeros(4))
    with pytest.raises(ShapeError, match="dense3"):
        forward_graph([layer], Tensor(np.zeros((2, 7))), params)


# -- backward -----------------------------------------------------------------


def test_backward_constant_loss_zeroes_all_params():
    params = ParamStore()
    params.add("w", np.ones(3))
    loss = Tensor(4.0)
    backward(loss, params)
    np.testing.assert_array_equal(params["w"].grad, np.zeros(3))


def test_backward_linear_case():
    params = ParamStore()
    w = params.add("w", 3.0)
    loss = w * Tensor(2.0)
    backward(loss, params)
    assert params["w"].grad == pytest.approx(2.0)


def test_backward_rejects_nonscalar_loss():
    with pytest.raises(ShapeError):
        backward(Tensor(np.ones(3)), None)


def test_backward_full_model_against_finite_differences():
    rng = np.random.default_rng(3)
    params = ParamStore()
    layers = [Dense("l1", 4, 6), Relu(), Dense("l2", 6, 3)]
    for l in layers:
        l.init_into(params, rng)
    x = Tensor(rng.normal(size=(2, 4)))

    def loss_fn():
        out = forward_graph(layers, x, params)
        return (out * out).sum()

    assert grad_check(loss_fn, params, eps=1e-5) < 1e-4


# -- grad_check ---------------------------------------------------------------


def test_grad_check_quadratic_is_near_exact():
    params = ParamStore()
    w = params.add("w", 1.0)

    def loss_fn():
        return params["w"] * params["w"]

    assert grad_check(loss_fn, params, eps=1e-5) < 1e-8


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda: Tensor(0.0), ParamStore(), eps=0.0)


@pytest.mark.parametrize("op_name", ["dense", "conv", "relu", "residual", "gap", "layernorm"])
def test_grad_check_each_layer_type(op_name):
    rng = np.random.default_rng(11)
    params = ParamStore()
    x3 = Tensor(rng.normal(size=(2, 3, 8)))
    x2 = Tensor(rng.normal(size=(2, 5)))
    if op_name == "dense":
        layer = Dense("d", 5, 4)
        layer.init_into(params, rng)
        fn = lambda: (forward_graph([layer], x2, params) * 0.3).sum()
    elif op_name == "conv":
        layer = Conv1d("c", 3, 4, kernel=3, stride=2, padding=1)
        layer.init_into(params, rng)
        fn = lambda: (forward_graph([layer], x3, params) * 0.7).sum()
    elif op_name == "relu":
        layer = Dense("d", 5, 4)
        layer.init_into(params, rng)
        fn = lambda: forward_graph([layer, Relu()], x2, params).sum()
    elif op_name == "residual":
        layer = ResidualBlock1d("rb", 3, 6, kernel=3, stride=2)
        layer.init_into(params, rng)
        fn = lambda: (forward_graph([layer], x3, params) * 0.1).sum()
    elif op_name == "gap":
        layer = Conv1d("c", 3, 4, kernel=3, stride=1, padding=1)
        layer.init_into(params, rng)
        fn = lambda: forward_graph([layer, GlobalAvgPool()], x3, params).sum()
    else:
        layer = Conv1d("c", 3, 4, kernel=1)
        norm = LayerNorm("ln", 4)
        layer.init_into(params, rng)
        norm.init_into(params, rng)
        fn = lambda: (forward_graph([layer, norm], x3, params) * 0.5).sum()
    assert grad_check(fn, params, eps=1e-5) < 1e-4


def test_grad_check_embedding():
    rng = np.random.default_rng(5)
    params = ParamStore()
    params.add("emb", rng.normal(size=(7, 4)))
    ids = np.array([[1, 3, 3], [0, 6, 2]])

    def fn():
        e = embedding(params["emb"], ids)
        return (e.sum(axis=1) * 0.25).sum()

    assert grad_check(fn, params, eps=1e-5) < 1e-4


# -- conv1d semantics ----------------------------------------------------------


def test_conv1d_unit_kernel_is_identity():
    x = Tensor(np.random.default_rng(1).normal(size=(1, 1, 9)))
    w = Tensor(np.ones((1, 1, 1)))
    out = conv1d(x, w, None, stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv1d_zero_input_gives_bias():
    w = Tensor(np.random.default_rng(2).normal(size=(4, 2, 3)))
    b = Tensor(np.array([1.0, -2.0, 0.5, 3.0]))
    out = conv1d(Tensor(np.zeros((1, 2, 10))), w, b, stride=1, padding=1)
    assert out.shape == (1, 4, 10)
    np.testing.assert_allclose(out.data, b.data[None, :, None] * np.ones((1, 4, 10)))


def test_conv1d_matches_sliding_dot_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 1, 8))
    w = rng.normal(size=(1, 1, 3))
    out = conv1d(Tensor(x), Tensor(w), None, stride=1, padding=0)
    # Brute-force nested loops.
    expect = np.zeros(6)
    for t in range(6):
        for k in range(3):
            expect[t] += x[0, 0, t + k] * w[0, 0, k]
    np.testing.assert_allclose(out.data[0, 0], expect, atol=1e-14)


@pytest.mark.parametrize("t,k,stride,pad,expected", [(10, 3, 1, 0, 8), (10, 3, 2, 1, 5), (7, 7, 1, 0, 1)])
def test_conv1d_output_length(t, k, stride, pad, expected):
    out = conv1d(Tensor(np.zeros((1, 1, t))), Tensor(np.zeros((1, 1, k))), None, stride, pad)
    assert out.shape[2] == expected


def test_conv1d_invalid_geometry():
    with pytest.raises(ShapeError):
        conv1d(Tensor(np.zeros((1, 1, 4))), Tensor(np.zeros((1, 1, 9))), None, 1, 0)
    with pytest.raises(ShapeError):
        conv1d(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 3, 3))), None, 1, 0)


# -- adamw ---------------------------------------------------------------------


def _scalar_adamw_reference(w0, grads, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    # Independently coded scalar AdamW iteration.
    w, m, v = w0, 0.0, 0.0
    trajectory = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        w = w * (1 - lr * wd)
        w = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        trajectory.append(w)
    return trajectory


def test_adamw_zero_grad_no_decay_is_noop():
    params = ParamStore()
    params.add("w", np.array([1.0, -2.0]))
    params["w"].grad = np.zeros(2)
    adamw_step(params, lr=4e-4, weight_decay=0.0)
    np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])


def test_adamw_decay_shrinks_by_exact_factor():
    params = ParamStore()
    params.add("w", np.array([2.0, -4.0]))
    lr, wd = 4e-4, 0.1
    for step in range(1, 4):
        params["w"].grad = np.zeros(2)
        adamw_step(params, lr=lr, weight_decay=wd)
        np.testing.assert_allclose(
            params["w"].data, np.array([2.0, -4.0]) * (1 - lr * wd) ** step, rtol=1e-15
        )


def test_adamw_matches_scalar_reference_on_quadratic():
    # Loss w^2 from w0=1 for 100 steps, paper-style lr/wd.
    lr, wd = 4e-4, 0.1
    params = ParamStore()
    params.add("w", 1.0)
    mine = []
    grads = []
    for _ in range(100):
        params.zero_grad()
        loss = params["w"] * params["w"]
        backward(loss, params)
        grads.append(float(params["w"].grad))
        adamw_step(params, lr=lr, weight_decay=wd)
        mine.append(float(params["w"].data))
    ref = _scalar_adamw_reference(1.0, grads, lr, wd)
    np.testing.assert_allclose(mine, ref, rtol=0, atol=1e-12)


def test_adamw_rejects_bad_hyperparams():
    params = ParamStore()
    params.add("w", 1.0)
    with pytest.raises(ValueError):
        adamw_step(params, lr=0.0)
    with pytest.raises(ValueError):
        adamw_step(params, lr=1e-3, beta1=1.0)


# -- determinism & finiteness ---------------------------------------------------


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    layers = [Conv1d("c", 2, 3, 3, 1, 1), Relu(), GlobalAvgPool(), Dense("d", 3, 2)]
    params = ParamStore()
    for l in layers:
        l.init_into(params, rng)
    x = Tensor(rng.normal(size=(4, 2, 16)))
    a = forward_graph(layers, x, params).data
    b = forward_graph(layers, x, params).data
    np.testing.assert_array_equal(a, b)


def test_ops_finite_for_finite_inputs():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(2, 3, 10)) * 100)
    w = Tensor(rng.normal(size=(4, 3, 3)))
    out = conv1d(x, w, None, 1, 1)
    assert np.all(np.isfinite(out.data))
    assert np.all(np.isfinite(out.relu().data))
    g = Tensor(np.ones(4))
    b = Tensor(np.zeros(4))
    assert np.all(np.isfinite(layer_norm(out, g, b).data))


# -- paramstore & checkpoint -----------------------------------------------------


def test_paramstore_rejects_duplicate_names():
    params = ParamStore()
    params.add("w", 1.0)
    with pytest.raises(ValueError):
        params.add("w", 2.0)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(21)
    params = ParamStore()
    params.add("enc.w", rng.normal(size=(3, 5, 7)))
    params.add("enc.b", rng.normal(size=5))
    params.add("scalar", 0.123456789123456789)
    path = tmp_path / "model.pxm"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert set(loaded) == {"enc.w", "enc.b", "scalar"}
    for name in loaded:
        assert loaded[name].tobytes() == params[name].data.tobytes()

    fresh = ParamStore()
    fresh.add("enc.w", np.zeros((3, 5, 7)))
    fresh.add("enc.b", np.zeros(5))
    fresh.add("scalar", 0.0)
    fresh.load_values(loaded)
    assert fresh["scalar"].data.tobytes() == params["scalar"].data.tobytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_load_values_rejects_name_mismatch():
    params = ParamStore()
    params.add("a", 1.0)
    with pytest.raises(ValueError):
        params.load_values({"b": np.array(1.0)})
