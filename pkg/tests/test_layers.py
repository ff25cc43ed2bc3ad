"""Layer-level oracles: brute-force convolution, naive attention, Adam hand
values, and the binary checkpoint format."""

import numpy as np
import pytest

from binsep import autograd as ag
from binsep.autograd import DiffTensor, finite_diff_check
from binsep.layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    adaptive_max_pool2d,
    conv2d,
    conv_transpose2d,
    kaiming_uniform,
)
from binsep.params import ParamStore, adam_step, load_checkpoint, save_checkpoint

TOL = 1e-3


def conv2d_loop(x, w, b, stride, padding):
    """O(everything) reference convolution."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (wd + 2 * pw - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    patch = xp[ni, :, yi * stride : yi * stride + kh, xi * stride : xi * stride + kw]
                    out[ni, oi, yi, xi] = np.sum(patch * w[oi])
            if b is not None:
                out[ni, oi] += b[oi]
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = conv2d(DiffTensor(x), DiffTensor(w), DiffTensor(b), stride=stride, padding=padding)
    ref = conv2d_loop(x, w, b, stride, padding)
    np.testing.assert_allclose(out.values, ref, atol=1e-6)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 4, 4))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = conv2d(DiffTensor(x), DiffTensor(w))
    np.testing.assert_allclose(out.values, x, atol=1e-12)


def test_conv2d_ones_kernel_interior():
    x = np.ones((1, 1, 5, 5))
    w = np.ones((1, 1, 3, 3))
    out = conv2d(DiffTensor(x), DiffTensor(w), padding=1).values
    assert out[0, 0, 2, 2] == pytest.approx(9.0)


def test_conv2d_channel_mismatch():
    with pytest.raises(ValueError):
        conv2d(DiffTensor(np.zeros((1, 2, 4, 4))), DiffTensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((2, 2, 3, 3))
        err = finite_diff_check(
            lambda t: ag.sum_(conv2d(t, DiffTensor(w), stride=2, padding=1) ** 2.0), x
        )
        assert err < TOL
        err = finite_diff_check(
            lambda t: ag.sum_(conv2d(DiffTensor(x), t, stride=2, padding=1) ** 2.0), w
        )
        assert err < TOL


def test_conv_transpose_adjoint_of_conv():
    """<conv(x), y> == <x, conv_T(y)> with the same kernel, stride, padding."""
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 3, 8, 8))
    # conv reads w as (O, C, kh, kw); conv_transpose reads it as (C_in, C_out, kh, kw)
    w = rng.standard_normal((2, 3, 4, 4))
    fwd = conv2d(DiffTensor(x), DiffTensor(w), stride=2, padding=1)
    y = rng.standard_normal(fwd.shape)
    bwd = conv_transpose2d(DiffTensor(y), DiffTensor(w), stride=2, padding=1)
    lhs = np.sum(fwd.values * y)
    rhs = np.sum(x * bwd.values)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10)


def test_conv_transpose_gradients():
    for seed in range(20):
        rng = np.random.default_rng(50 + seed)
        x = rng.standard_normal((1, 2, 3, 3))
        w = rng.standard_normal((2, 2, 4, 4))
        err = finite_diff_check(
            lambda t: ag.sum_(conv_transpose2d(t, DiffTensor(w), stride=2, padding=1) ** 2.0),
            x,
        )
        assert err < TOL
        err = finite_diff_check(
            lambda t: ag.sum_(conv_transpose2d(DiffTensor(x), t, stride=2, padding=1) ** 2.0),
            w,
        )
        assert err < TOL


def test_linear_identity_and_gradient():
    rng = np.random.default_rng(3)
    lin = Linear(rng, 4, 4)
    lin.weight.values = np.eye(4, dtype=np.float32)
    lin.bias.values[...] = 0.0
    x = rng.standard_normal((5, 4)).astype(np.float32)
    np.testing.assert_allclose(lin(DiffTensor(x)).values, x, atol=1e-6)
    x64 = rng.standard_normal((5, 4))
    err = finite_diff_check(lambda t: ag.sum_(lin(t) ** 2.0), x64)
    assert err < TOL


def test_batchnorm_training_stats_and_gradient():
    rng = np.random.default_rng(4)
    bn = BatchNorm2d(3)
    x = rng.standard_normal((4, 3, 5, 5))
    out = bn(DiffTensor(x), training=True).values
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-7)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    # running stats moved toward batch stats with momentum 0.1
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-6)
    err = finite_diff_check(lambda t: ag.sum_(bn(t, training=True) ** 2.0), x)
    assert err < TOL


def test_batchnorm_batch_of_one_raises():
    bn = BatchNorm2d(2)
    with pytest.raises(ValueError):
        bn(DiffTensor(np.zeros((1, 2, 3, 3))), training=True)


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNorm2d(2)
    x = np.full((1, 2, 2, 2), 3.0)
    out = bn(DiffTensor(x), training=False).values  # running mean 0, var 1
    np.testing.assert_allclose(out, x, atol=1e-4)


def naive_mha(mha, q, k, v):
    """Per-head attention computed with plain numpy, no batching tricks."""
    heads = mha.heads
    d = q.shape[-1]
    dh = d // heads
    qp = q @ mha.wq.weight.values + mha.wq.bias.values
    kp = k @ mha.wk.weight.values + mha.wk.bias.values
    vp = v @ mha.wv.weight.values + mha.wv.bias.values
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = qp[:, sl] @ kp[:, sl].T / np.sqrt(dh)
        w = np.exp(scores - scores.max(axis=-1, keepdims=True))
        w = w / w.sum(axis=-1, keepdims=True)
        outs.append(w @ vp[:, sl])
    concat = np.concatenate(outs, axis=-1)
    return concat @ mha.wo.weight.values + mha.wo.bias.values


def test_mha_matches_naive_oracle():
    rng = np.random.default_rng(5)
    mha = MultiHeadAttention(rng, 8, heads=2)
    q = rng.standard_normal((3, 8))
    k = rng.standard_normal((5, 8))
    v = rng.standard_normal((5, 8))
    out = mha(DiffTensor(q), DiffTensor(k), DiffTensor(v)).values
    ref = naive_mha(mha, q, k, v)
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_mha_single_key_identity():
    rng = np.random.default_rng(6)
    mha = MultiHeadAttention(rng, 4, heads=1)
    for lin in (mha.wq, mha.wk, mha.wv, mha.wo):
        lin.weight.values = np.eye(4, dtype=np.float32)
        lin.bias.values[...] = 0.0
    v = rng.standard_normal((1, 4))
    out = mha(DiffTensor(np.zeros((2, 4))), DiffTensor(np.zeros((1, 4))), DiffTensor(v)).values
    np.testing.assert_allclose(out, np.tile(v, (2, 1)), atol=1e-6)


def test_mha_equidistant_keys_average():
    rng = np.random.default_rng(7)
    mha = MultiHeadAttention(rng, 4, heads=1)
    for lin in (mha.wq, mha.wk, mha.wv, mha.wo):
        lin.weight.values = np.eye(4, dtype=np.float32)
        lin.bias.values[...] = 0.0
    v = rng.standard_normal((2, 4))
    out = mha(
        DiffTensor(np.zeros((1, 4))), DiffTensor(np.zeros((2, 4))), DiffTensor(v)
    ).values
    np.testing.assert_allclose(out[0], v.mean(axis=0), atol=1e-6)


def test_mha_indivisible_heads_raises():
    rng = np.random.default_rng(8)
    with pytest.raises(ValueError):
        MultiHeadAttention(rng, 6, heads=4)


def test_mha_gradient():
    rng = np.random.default_rng(9)
    mha = MultiHeadAttention(rng, 8, heads=2)
    kv = rng.standard_normal((4, 8))
    q = rng.standard_normal((3, 8))
    err = finite_diff_check(
        lambda t: ag.sum_(mha(t, DiffTensor(kv), DiffTensor(kv)) ** 2.0), q
    )
    assert err < TOL


def test_adaptive_max_pool_brute_force():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((64, 8, 8))
    out = adaptive_max_pool2d(x, (4, 4))
    for i in range(4):
        for j in range(4):
            ref = x[:, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(1, 2))
            np.testing.assert_array_equal(out[:, i, j], ref)
    # uneven partition
    out = adaptive_max_pool2d(x[:, :7, :5], (3, 2))
    for i in range(3):
        lo_i, hi_i = (i * 7) // 3, -(-((i + 1) * 7) // 3)
        for j in range(2):
            lo_j, hi_j = (j * 5) // 2, -(-((j + 1) * 5) // 2)
            ref = x[:, :7, :5][:, lo_i:hi_i, lo_j:hi_j].max(axis=(1, 2))
            np.testing.assert_array_equal(out[:, i, j], ref)


def test_adam_first_step_hand_value():
    theta = DiffTensor(np.zeros(3, dtype=np.float64), requires_grad=True)
    store = ParamStore({"theta": theta})
    theta.grad = np.ones(3)
    adam_step(store, lr=1e-3, weight_decay=0.0)
    # t=1: m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
    expected = -1e-3 / (1.0 + 1e-8)
    np.testing.assert_allclose(theta.values, expected, rtol=1e-12)
    assert store.step_count == 1


def test_adam_zero_gradient_zero_wd_no_change():
    theta = DiffTensor(np.full(3, 2.0), requires_grad=True)
    store = ParamStore({"theta": theta})
    theta.grad = np.zeros(3)
    adam_step(store, lr=1e-3, weight_decay=0.0)
    np.testing.assert_array_equal(theta.values, np.full(3, 2.0))


def test_adam_missing_gradient_names_parameter():
    theta = DiffTensor(np.zeros(2), requires_grad=True)
    store = ParamStore({"some_weight": theta})
    with pytest.raises(ValueError, match="some_weight"):
        adam_step(store, lr=1e-3)


def test_adam_determinism():
    def run():
        theta = DiffTensor(np.linspace(0, 1, 4), requires_grad=True)
        store = ParamStore({"w": theta})
        for _ in range(5):
            theta.grad = theta.values * 0.5
            adam_step(store, lr=1e-2)
        return theta.values.copy()

    np.testing.assert_array_equal(run(), run())


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    arrays = {
        "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "b.bias": rng.standard_normal(7).astype(np.float32),
        "scalar": np.float32(2.5),
    }
    path = tmp_path / "test.ckpt"
    save_checkpoint(path, arrays)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], np.asarray(arrays[k], dtype=np.float32))
    # save -> load -> save is byte-identical
    path2 = tmp_path / "test2.ckpt"
    save_checkpoint(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_crc_tamper(tmp_path):
    path = tmp_path / "bad.ckpt"
    save_checkpoint(path, {"w": np.ones(4, dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    raw[20] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="CRC"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "not.ckpt"
    path.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_kaiming_uniform_bound():
    rng = np.random.default_rng(12)
    w = kaiming_uniform(rng, (64, 64), fan_in=64).values
    bound = np.sqrt(6.0 / 64)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.5 * bound  # actually fills the range


def test_module_state_dict_round_trip():
    rng = np.random.default_rng(13)

    class Net(Module):
        def __init__(self):
            self.lin = Linear(rng, 3, 3)
            self.convs = [Conv2d(rng, 1, 2, 3), Conv2d(rng, 2, 1, 3)]
            self.bn = BatchNorm2d(2)

    net, net2 = Net(), Net()
    state = net.state_dict()
    assert "convs.0.weight" in state and "bn.running_mean" in state
    net2.load_state_dict(state)
    for (k1, v1), (k2, v2) in zip(sorted(net.named_params()), sorted(net2.named_params())):
        assert k1 == k2
        np.testing.assert_array_equal(v1.values, v2.values)


def test_load_state_dict_shape_mismatch():
    rng = np.random.default_rng(14)

    class Net(Module):
        def __init__(self):
            self.lin = Linear(rng, 3, 3)

    net = Net()
    state = net.state_dict()
    state["lin.weight"] = np.zeros((2, 2), dtype=np.float32)
    with pytest.raises(ValueError):
        net.load_state_dict(state)


def test_convtranspose_layer_shapes():
    rng = np.random.default_rng(15)
    up = ConvTranspose2d(rng, 4, 2, 4, stride=2, padding=1)
    x = DiffTensor(np.zeros((2, 4, 8, 8), dtype=np.float32))
    assert up(x).shape == (2, 2, 16, 16)
    ln = LayerNorm(6)
    y = ln(DiffTensor(np.random.default_rng(0).standard_normal((3, 6))))
    assert y.shape == (3, 6)
