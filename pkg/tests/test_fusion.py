"""Cross-modal fusion: zeroed-branch layer-norm oracle, key permutation
invariance, query assembly bookkeeping, and shape contracts."""

import numpy as np
import pytest

from binsep import autograd as ag
from binsep.autograd import DiffTensor
from binsep.config import PRESETS
from binsep.fusion import (
    AVPFusion,
    AudioQuerySet,
    CMABlock,
    CMAStack,
    QueryProjections,
    VPCrossAttention,
    assemble_audio_queries,
)
from binsep.separator import LAVSSModel, ModelConfig


def layer_norm_oracle(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _zero_branches(block):
    """Zero the attention output projection and the FFN output layer so the
    block reduces to LN(LN(m))."""
    block.mha.wo.weight.values[:] = 0
    block.mha.wo.bias.values[:] = 0
    block.ffn.fc2.weight.values[:] = 0
    block.ffn.fc2.bias.values[:] = 0


def test_cma_block_zeroed_is_double_layer_norm():
    rng = np.random.default_rng(0)
    dim = 16
    block = CMABlock(rng, dim, heads=4)
    _zero_branches(block)
    m = rng.standard_normal((2, 5, dim)).astype(np.float32)
    n = rng.standard_normal((2, 7, dim)).astype(np.float32)
    out = block(DiffTensor(m), DiffTensor(n)).values
    expected = layer_norm_oracle(layer_norm_oracle(m))
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_cma_block_output_shape_follows_queries():
    rng = np.random.default_rng(1)
    block = CMABlock(rng, 8, heads=2)
    m = DiffTensor(rng.standard_normal((3, 4, 8)).astype(np.float32))
    n = DiffTensor(rng.standard_normal((3, 11, 8)).astype(np.float32))
    assert block(m, n).shape == (3, 4, 8)


def test_cma_stack_key_permutation_invariance():
    """Attention pools over key/value tokens, so permuting them is a no-op."""
    rng = np.random.default_rng(2)
    stack = CMAStack(rng, 8, heads=2, depth=2)
    m = DiffTensor(rng.standard_normal((1, 4, 8)).astype(np.float32))
    n = rng.standard_normal((1, 9, 8)).astype(np.float32)
    perm = rng.permutation(9)
    out = stack(m, DiffTensor(n)).values
    out_p = stack(m, DiffTensor(n[:, perm])).values
    np.testing.assert_allclose(out, out_p, atol=1e-5)


def test_cma_stack_depth_one_equals_single_block():
    rng1 = np.random.default_rng(3)
    rng2 = np.random.default_rng(3)
    stack = CMAStack(rng1, 8, heads=2, depth=1)
    block = CMABlock(rng2, 8, heads=2)
    m = DiffTensor(np.random.default_rng(4).standard_normal((2, 3, 8)).astype(np.float32))
    n = DiffTensor(np.random.default_rng(5).standard_normal((2, 6, 8)).astype(np.float32))
    np.testing.assert_array_equal(stack(m, n).values, block(m, n).values)


def test_vp_cross_attention_shapes_and_grid_check():
    rng = np.random.default_rng(6)
    dim = 8
    vp = VPCrossAttention(rng, dim, heads=2, depth=1)
    fv = DiffTensor(rng.standard_normal((dim, 3, 4)).astype(np.float32))
    fp = DiffTensor(rng.standard_normal((dim, 3, 4)).astype(np.float32))
    out = vp(fv, fp)
    assert out.shape == (dim, 3, 4)
    bad = DiffTensor(rng.standard_normal((dim, 4, 3)).astype(np.float32))
    with pytest.raises(ValueError, match="grid"):
        vp(fv, bad)


def test_vp_cross_attention_batched_matches_unbatched():
    rng = np.random.default_rng(7)
    dim = 8
    vp = VPCrossAttention(rng, dim, heads=2, depth=1)
    fv = np.random.default_rng(8).standard_normal((dim, 2, 3)).astype(np.float32)
    fp = np.random.default_rng(9).standard_normal((dim, 2, 3)).astype(np.float32)
    single = vp(DiffTensor(fv), DiffTensor(fp)).values
    batched = vp(DiffTensor(fv[None]), DiffTensor(fp[None])).values
    np.testing.assert_allclose(batched[0], single, atol=1e-6)


def test_audio_query_set_bookkeeping():
    data = DiffTensor(np.zeros((84, 8), dtype=np.float32))
    q = AudioQuerySet(data=data, block_sizes=(4, 16, 64), bottleneck_hw=(2, 2))
    assert q.block_sizes[0] == 4
    with pytest.raises(ValueError, match="query count"):
        AudioQuerySet(data=data, block_sizes=(4, 16, 32), bottleneck_hw=(2, 2))
    with pytest.raises(ValueError, match="bottleneck"):
        AudioQuerySet(data=data, block_sizes=(4, 16, 64), bottleneck_hw=(2, 4))


def test_assemble_audio_queries_shapes():
    rng = np.random.default_rng(10)
    dim = 8
    projs = QueryProjections(rng, (16, 8, 4), dim)
    feats = [
        DiffTensor(rng.standard_normal((16, 2, 2)).astype(np.float32)),
        DiffTensor(rng.standard_normal((8, 4, 4)).astype(np.float32)),
        DiffTensor(rng.standard_normal((4, 8, 8)).astype(np.float32)),
    ]
    q = assemble_audio_queries(feats, projs)
    assert q.data.shape == (84, dim)
    assert q.block_sizes == (4, 16, 64)
    assert q.bottleneck_hw == (2, 2)


def test_assemble_audio_queries_validation():
    rng = np.random.default_rng(11)
    projs = QueryProjections(rng, (16, 8, 4), 8)
    feats = [
        DiffTensor(np.zeros((16, 2, 2), dtype=np.float32)),
        DiffTensor(np.zeros((8, 4, 4), dtype=np.float32)),
        DiffTensor(np.zeros((4, 7, 8), dtype=np.float32)),
    ]
    with pytest.raises(ValueError, match="double"):
        assemble_audio_queries(feats, projs)
    with pytest.raises(ValueError, match="three"):
        assemble_audio_queries(feats[:2], QueryProjections(rng, (16, 8), 8))


@pytest.mark.parametrize("preset_name", ["paper", "desk"])
def test_query_count_is_84_for_presets(preset_name):
    """The three deepest U-Net levels contribute 2x2 + 4x4 + 8x8 = 84 queries
    for both the full-scale and desk-scale configurations."""
    preset = PRESETS[preset_name]
    t = preset.t_frames
    levels = len(preset.unet_channels)
    bottleneck = t // (2**levels)
    total = sum((bottleneck * 2**i) ** 2 for i in range(3))
    assert total == 84


def test_query_count_84_realized_by_model():
    """Running the desk model end to end produces an 84-token query set."""
    cfg = ModelConfig.from_preset(PRESETS["tiny"])
    model = LAVSSModel(cfg, seed=0)
    t = PRESETS["tiny"].t_frames
    levels = len(PRESETS["tiny"].unet_channels)
    bottleneck = t // (2**levels)
    assert sum((bottleneck * 2**i) ** 2 for i in range(3)) == 84


def test_avp_fusion_output_shape_and_dim_check():
    rng = np.random.default_rng(12)
    dim = 8
    fus = AVPFusion(rng, dim, heads=2, depth=1)
    q = AudioQuerySet(
        data=DiffTensor(rng.standard_normal((84, dim)).astype(np.float32)),
        block_sizes=(4, 16, 64),
        bottleneck_hw=(2, 2),
    )
    fvp = DiffTensor(rng.standard_normal((dim, 3, 4)).astype(np.float32))
    out = fus(q, fvp)
    assert out.shape == (dim, 2, 2)
    assert np.isfinite(out.values).all()
    bad = DiffTensor(rng.standard_normal((dim + 1, 3, 4)).astype(np.float32))
    with pytest.raises(ValueError, match="dim"):
        fus(q, bad)


def test_avp_fusion_gradients_flow_to_both_modalities():
    rng = np.random.default_rng(13)
    dim = 8
    fus = AVPFusion(rng, dim, heads=2, depth=1)
    qdata = DiffTensor(
        rng.standard_normal((84, dim)).astype(np.float32), requires_grad=True
    )
    q = AudioQuerySet(data=qdata, block_sizes=(4, 16, 64), bottleneck_hw=(2, 2))
    fvp = DiffTensor(
        rng.standard_normal((dim, 3, 4)).astype(np.float32), requires_grad=True
    )
    out = fus(q, fvp)
    loss = ag.sum_(out * out)
    loss.backward()
    assert qdata.grad is not None and np.abs(qdata.grad).max() > 0
    assert fvp.grad is not None and np.abs(fvp.grad).max() > 0
