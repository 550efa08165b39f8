import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajbayes import tensor as T
from trajbayes.segnet import NetConfig, SegNet, init_params, param_shapes

from gradcheck import CASES, TOL, check_case, numeric_grad, rel_error

N_SHAPES = 5


@pytest.mark.parametrize("kind", sorted(CASES))
def test_layer_gradients(kind):
    rng = np.random.default_rng(abs(hash(kind)) % 2**32)
    for _ in range(N_SHAPES):
        arrays, build = CASES[kind](rng)
        errs = check_case(arrays, build)
        assert max(errs.values()) < TOL, (kind, {k: v for k, v in errs.items()}, {k: a.shape for k, a in arrays.items()})


def test_network_gradient_covers_all_params():
    cfg = NetConfig(in_channels=1, num_classes=3, base_width=2, depth=2)
    params = init_params(cfg, T.Rng(3))
    params = T.ParamSet({k: v.astype(np.float64) for k, v in params.items()})
    net = SegNet(cfg, params)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 8, 8, 1))
    y = rng.integers(0, 3, size=(2, 8, 8))

    def loss_value(track):
        logits, leaves = net.forward(x, train_bn=True, dropout_active=False, rng=None, track_grad=track)
        return T.add(T.cross_entropy(logits, y), T.soft_dice_loss(logits, y)), leaves

    def f():
        # running stats are mutated in train mode; restore so every probe sees the same state
        saved = {k: params[k].copy() for k in params if T.is_buffer(k)}
        v = float(loss_value(False)[0].data)
        for k, a in saved.items():
            params[k][...] = a
        return v

    saved = {k: params[k].copy() for k in params if T.is_buffer(k)}
    loss, leaves = loss_value(True)
    for k, a in saved.items():
        params[k][...] = a
    grads = T.backward(loss, leaves)
    assert set(params.trainable()) <= set(grads)
    rng_pick = np.random.default_rng(1)
    for name in params.trainable():
        arr = params[name]
        g = grads[name]
        # probe a handful of coordinates per tensor to keep runtime small
        idx = rng_pick.choice(arr.size, size=min(arr.size, 6), replace=False)
        num = np.empty(len(idx))
        flat = arr.reshape(-1)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + 1e-5
            fp = f()
            flat[i] = old - 1e-5
            fm = f()
            flat[i] = old
            num[j] = (fp - fm) / 2e-5
        ga = g.reshape(-1)[idx]
        if max(np.abs(ga).max(), np.abs(num).max()) < 1e-8:
            continue  # biases feeding a train-mode batchnorm have zero gradient
        assert rel_error(ga, num) < TOL, name


def test_numeric_grad_oracle_on_quadratic():
    a = np.array([1.0, -2.0, 3.0])
    g = numeric_grad(lambda: float((a**2).sum()), a)
    np.testing.assert_allclose(g, 2 * a, rtol=1e-8)


def test_backward_requires_scalar():
    x = T.leaf(np.ones((2, 2)), "x")
    with pytest.raises(T.AutodiffError):
        T.backward(T.scale(x, 2.0), {"x": x})


def test_backward_without_graph():
    x = T.leaf(np.ones(3), "x", requires_grad=False)
    with pytest.raises(T.AutodiffError):
        T.backward(T.sum_all(x), {"x": x})


def test_unused_leaf_gets_zero_grad():
    x = T.leaf(np.ones(3), "x")
    y = T.leaf(np.ones(4), "y")
    g = T.backward(T.sum_all(x), {"x": x, "y": y})
    np.testing.assert_array_equal(g["y"], np.zeros(4))
    np.testing.assert_array_equal(g["x"], np.ones(3))


def test_shared_subexpression_accumulates():
    x = T.leaf(np.array([3.0]), "x")
    g = T.backward(T.sum_all(T.mul(x, x)), {"x": x})
    assert g["x"][0] == 6.0


def test_nonfinite_raises():
    x = T.leaf(np.array([np.inf, 1.0]), "x")
    with pytest.raises(T.NonFiniteError):
        T.scale(x, 1.0)


def test_dtype_preserved():
    x = T.leaf(np.ones((1, 4, 4, 2), dtype=np.float32))
    w = T.leaf(np.ones((3, 2, 3, 3), dtype=np.float32))
    b = T.leaf(np.zeros(3, dtype=np.float32))
    assert T.conv3x3(x, w, b).data.dtype == np.float32


def test_conv3x3_against_direct_loop():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 4, 5, 2))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = T.conv3x3(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 4, 5, 3))
    for i in range(4):
        for j in range(5):
            patch = pad[0, i:i + 3, j:j + 3, :]  # (3, 3, C)
            ref[0, i, j] = np.einsum("yxc,ocyx->o", patch, w) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_maxpool_first_max_wins_gradient():
    x = T.leaf(np.ones((1, 2, 2, 1)), "x")
    g = T.backward(T.sum_all(T.maxpool2(x)), {"x": x})
    assert g["x"].sum() == 1.0 and g["x"][0, 0, 0, 0] == 1.0


def test_batchnorm_eval_is_affine_and_batch_independent():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4, 4, 2))
    g, b = rng.uniform(0.5, 2, 2), rng.standard_normal(2)
    rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
    full = T.batchnorm(T.Tensor(x), T.Tensor(g), T.Tensor(b), rm, rv, train=False).data
    one = T.batchnorm(T.Tensor(x[1:2]), T.Tensor(g), T.Tensor(b), rm, rv, train=False).data
    np.testing.assert_array_equal(full[1:2], one)
    np.testing.assert_allclose(full, (x - rm) / np.sqrt(rv + 1e-5) * g + b, rtol=1e-12)


def test_batchnorm_train_running_update():
    x = np.arange(8, dtype=np.float64).reshape(2, 2, 2, 1)
    rm, rv = np.zeros(1), np.ones(1)
    T.batchnorm(T.Tensor(x), T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)), rm, rv, train=True)
    assert rm[0] == pytest.approx(0.1 * 3.5)
    assert rv[0] == pytest.approx(0.9 + 0.1 * np.var(np.arange(8), ddof=1))


def test_dropout_identity_cases():
    x = T.Tensor(np.ones((2, 3)))
    assert T.dropout(x, 0.5, False, None) is x
    assert T.dropout(x, 0.0, True, T.Rng(0)) is x
    with pytest.raises(ValueError):
        T.dropout(x, 0.5, True, None)


def test_forward_layer_dispatch():
    x = T.Tensor(np.arange(4.0).reshape(1, 2, 2, 1))
    np.testing.assert_array_equal(T.forward_layer("maxpool", {}, x).data, [[[[3.0]]]])
    with pytest.raises(ValueError):
        T.forward_layer("nope", {}, x)
    with pytest.raises(ValueError):
        T.forward_layer("relu", {}, x, mode="test")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_simplex_and_shift_invariance(z, k):
    z = np.array(z)
    p = T.softmax(T.Tensor(z)).data
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(T.softmax(T.Tensor(z + k)).data, p, atol=1e-12)


def test_cross_entropy_uniform():
    z = T.Tensor(np.zeros((1, 2, 2, 4)))
    assert float(T.cross_entropy(z, np.zeros((1, 2, 2), dtype=int)).data) == pytest.approx(np.log(4))


def test_soft_dice_perfect_prediction_is_near_zero():
    labels = np.array([[[0, 1], [2, 2]]])
    z = np.eye(3)[labels] * 40.0
    assert float(T.soft_dice_loss(T.Tensor(z), labels).data) < 1e-6


# --------------------------------------------------------------------------
# optimiser


def _ps(**kw):
    return T.ParamSet({k: np.array(v, dtype=np.float64) for k, v in kw.items()})


def test_sgd_plain_step():
    w, v = T.sgd_momentum_step(_ps(a=[1.0]), _ps(a=[0.5]), _ps(a=[0.0]), lr=0.1, momentum=0.0)
    assert w["a"][0] == pytest.approx(0.95)
    assert v["a"][0] == pytest.approx(-0.05)


def test_sgd_heavy_ball_two_steps():
    w0 = _ps(a=[1.0])
    g = _ps(a=[1.0])
    w1, v1 = T.sgd_momentum_step(w0, g, w0.zeros_like(), lr=0.1, momentum=0.9)
    assert v1["a"][0] == pytest.approx(-0.1)
    w2, v2 = T.sgd_momentum_step(w1, g, v1, lr=0.1, momentum=0.9)
    assert v2["a"][0] == pytest.approx(-0.19)
    assert w2["a"][0] == pytest.approx(1.0 - 0.29)


def test_sgd_nesterov_step():
    w, v = T.sgd_momentum_step(_ps(a=[1.0]), _ps(a=[1.0]), _ps(a=[0.0]), lr=0.1, momentum=0.9, nesterov=True)
    assert v["a"][0] == pytest.approx(-0.1)
    assert w["a"][0] == pytest.approx(1.0 + 0.9 * -0.1 - 0.1)


def test_sgd_weight_decay():
    w, _ = T.sgd_momentum_step(_ps(a=[2.0]), _ps(a=[0.0]), _ps(a=[0.0]), lr=0.5, momentum=0.0, weight_decay=0.1)
    assert w["a"][0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_sgd_zero_lr_is_bit_exact():
    rng = np.random.default_rng(0)
    p = T.ParamSet({"a.weight": rng.standard_normal(5).astype(np.float32)})
    g = T.ParamSet({"a.weight": rng.standard_normal(5).astype(np.float32)})
    w, _ = T.sgd_momentum_step(p, g, p.zeros_like(), lr=0.0, momentum=0.99, weight_decay=3e-5, nesterov=True)
    assert w.bit_equal(p)


def test_sgd_skips_buffers_and_rejects_negative_lr():
    p = _ps(**{"bn.weight": [1.0], "bn.running_mean": [5.0]})
    g = _ps(**{"bn.weight": [1.0], "bn.running_mean": [1.0]})
    w, _ = T.sgd_momentum_step(p, g, p.zeros_like(), lr=0.1, momentum=0.0)
    assert w["bn.running_mean"][0] == 5.0
    with pytest.raises(ValueError):
        T.sgd_momentum_step(p, g, p.zeros_like(), lr=-1.0, momentum=0.0)


def test_sgd_incompatible_sets():
    with pytest.raises(ValueError):
        T.sgd_momentum_step(_ps(a=[1.0]), _ps(b=[1.0]), _ps(a=[0.0]), lr=0.1, momentum=0.0)


# --------------------------------------------------------------------------
# containers and rng


def test_paramset_sorted_and_copy_independent():
    p = T.ParamSet({"b": np.zeros(1), "a": np.zeros(2)})
    assert list(p) == ["a", "b"]
    q = p.copy()
    q["a"][0] = 1.0
    assert p["a"][0] == 0.0
    assert p.size() == 3


def test_rng_streams_deterministic_and_distinct():
    a = T.Rng(7).normal((4,))
    b = T.Rng(7).normal((4,))
    c = T.Rng(7).child(1).normal((4,))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_init_params_cover_all_shapes():
    cfg = NetConfig()
    p = init_params(cfg, T.Rng(0))
    assert p.shapes() == param_shapes(cfg)
