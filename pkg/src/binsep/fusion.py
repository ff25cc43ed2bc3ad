"""Cross-modal attention stack: CMA blocks, vision-position fusion,
multi-scale audio query assembly, and audio-vision-position fusion.

All functions operate on batched token tensors (B, L, d); spatial maps
(B, C, H, W) are flattened to H*W tokens. Unbatched (C, H, W) inputs are
accepted and return unbatched outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import DiffTensor
from .layers import Conv2d, Linear, LayerNorm, Module, MultiHeadAttention


class FeedForward(Module):
    """d -> 4d -> d with ReLU."""

    def __init__(self, rng, dim):
        self.fc1 = Linear(rng, dim, 4 * dim)
        self.fc2 = Linear(rng, 4 * dim, dim)

    def __call__(self, x):
        return self.fc2(ag.relu(self.fc1(x)))


class CMABlock(Module):
    """One cross-modal attention block:
    a = LN(MHA(M, N, N) + M); out = LN(FFN(a) + a).
    """

    def __init__(self, rng, dim, heads=8):
        self.mha = MultiHeadAttention(rng, dim, heads)
        self.ffn = FeedForward(rng, dim)
        self.ln1 = LayerNorm(dim)
        self.ln2 = LayerNorm(dim)

    def __call__(self, m, n):
        a = self.ln1(self.mha(m, n, n) + m)
        return self.ln2(self.ffn(a) + a)


class CMAStack(Module):
    """`depth` stacked CMA blocks attending to the same key/value tokens."""

    def __init__(self, rng, dim, heads=8, depth=2):
        self.blocks = [CMABlock(rng, dim, heads) for _ in range(depth)]

    def __call__(self, m, n):
        for block in self.blocks:
            m = block(m, n)
        return m


def _to_tokens(x):
    """(B, C, H, W) or (C, H, W) -> ((B, H*W, C), (H, W), batched_flag)."""
    batched = x.ndim == 4
    if not batched:
        x = ag.reshape(x, (1,) + x.shape)
    b, c, h, w = x.shape
    tokens = ag.transpose(ag.reshape(x, (b, c, h * w)), (0, 2, 1))
    return tokens, (h, w), batched


def _to_map(tokens, hw, batched):
    b, l, c = tokens.shape
    h, w = hw
    x = ag.reshape(ag.transpose(tokens, (0, 2, 1)), (b, c, h, w))
    if not batched:
        x = ag.reshape(x, (c, h, w))
    return x


class VPCrossAttention(Module):
    """Fuse visual and positional maps into a visual-positional map.

    Both directions of cross attention are computed, concatenated along
    channels and halved back by a pointwise projection.
    """

    def __init__(self, rng, dim, heads=8, depth=2):
        self.dim = dim
        self.v_from_p = CMAStack(rng, dim, heads, depth)
        self.p_from_v = CMAStack(rng, dim, heads, depth)
        self.halve = Linear(rng, 2 * dim, dim)

    def __call__(self, fv, fp):
        tv, hw_v, batched = _to_tokens(fv)
        tp, hw_p, _ = _to_tokens(fp)
        if hw_v != hw_p:
            raise ValueError(f"visual grid {hw_v} != position grid {hw_p}")
        a = self.v_from_p(tv, tp)
        b = self.p_from_v(tp, tv)
        fused = self.halve(ag.concat([a, b], axis=2))
        return _to_map(fused, hw_v, batched)


@dataclass
class AudioQuerySet:
    """Multi-scale query tokens (B, Q_a, C_a) with per-level bookkeeping.

    block_sizes records the query count contributed by each U-Net level,
    deepest (bottleneck) first; bottleneck_hw is the spatial shape the
    first block reshapes back to.
    """

    data: DiffTensor
    block_sizes: tuple
    bottleneck_hw: tuple

    def __post_init__(self):
        if self.data.shape[-2] != sum(self.block_sizes):
            raise ValueError(
                f"query count {self.data.shape[-2]} != sum of blocks {self.block_sizes}"
            )
        if self.block_sizes[0] != self.bottleneck_hw[0] * self.bottleneck_hw[1]:
            raise ValueError("bottleneck block size inconsistent with its spatial shape")


class QueryProjections(Module):
    """Per-level pointwise projections of encoder features to a common dim."""

    def __init__(self, rng, level_channels, dim):
        self.projs = [Linear(rng, c, dim) for c in level_channels]


def assemble_audio_queries(feats, projections):
    """Project and flatten the last three encoder levels into query tokens.

    `feats` is ordered deepest-first (level N, N-1, N-2); spatial dims must
    double level to level.
    """
    if len(feats) != 3 or len(projections.projs) != 3:
        raise ValueError("expected exactly three encoder levels")
    tokens = []
    sizes = []
    hw0 = None
    prev_hw = None
    batched = feats[0].ndim == 4
    for f, proj in zip(feats, projections.projs):
        t, hw, b = _to_tokens(f)
        if b != batched:
            raise ValueError("mixed batched/unbatched level features")
        if prev_hw is not None and (hw[0] != prev_hw[0] * 2 or hw[1] != prev_hw[1] * 2):
            raise ValueError(f"level dims {hw} do not double {prev_hw}")
        if hw0 is None:
            hw0 = hw
        prev_hw = hw
        tokens.append(proj(t))
        sizes.append(hw[0] * hw[1])
    data = ag.concat(tokens, axis=1)
    if not batched:
        data = ag.reshape(data, data.shape[1:])
    return AudioQuerySet(data=data, block_sizes=tuple(sizes), bottleneck_hw=hw0)


class AVPFusion(Module):
    """Fuse audio queries with the visual-positional map into bottleneck
    guidance of shape (C_a, T/S, F/S).
    """

    def __init__(self, rng, dim, heads=8, depth=2):
        self.dim = dim
        self.a_from_vp = CMAStack(rng, dim, heads, depth)
        self.vp_from_a = CMAStack(rng, dim, heads, depth)
        # 1-D conv over the token axis of the second branch (kernel 3)
        self.token_conv = Conv2d(rng, dim, dim, kernel=(3, 1), padding=(1, 0))
        self.out_conv = Conv2d(rng, 2 * dim, dim, kernel=3, padding=1)

    def __call__(self, queries, fvp):
        batched = queries.data.ndim == 3
        qdata = queries.data if batched else ag.reshape(queries.data, (1,) + queries.data.shape)
        tvp, hw, _ = _to_tokens(fvp if fvp.ndim == 4 else ag.reshape(fvp, (1,) + fvp.shape))
        b, qa, d = qdata.shape
        if d != self.dim or tvp.shape[2] != self.dim:
            raise ValueError("model dim mismatch in AVP fusion")
        br1 = self.a_from_vp(qdata, tvp)  # (B, Q_a, d)
        br2 = self.vp_from_a(tvp, qdata)  # (B, HW, d)
        # token-axis conv, then pool and broadcast over the query axis
        br2_map = ag.reshape(ag.transpose(br2, (0, 2, 1)), (b, d, tvp.shape[1], 1))
        br2_map = self.token_conv(br2_map)
        br2 = ag.transpose(ag.reshape(br2_map, (b, d, tvp.shape[1])), (0, 2, 1))
        pooled = ag.mean(br2, axis=1, keepdims=True)  # (B, 1, d)
        ones = DiffTensor(np.ones((qa, 1), dtype=np.float32))
        broadcast = ag.matmul(ones, pooled)  # (B, Q_a, d)
        cat = ag.concat([br1, broadcast], axis=2)  # (B, Q_a, 2d)
        qn = queries.block_sizes[0]
        hs, ws = queries.bottleneck_hw
        bottom = cat[:, :qn, :]
        grid = ag.transpose(ag.reshape(bottom, (b, hs, ws, 2 * d)), (0, 3, 1, 2))
        out = self.out_conv(grid)  # (B, d, hs, ws)
        if not batched:
            out = ag.reshape(out, out.shape[1:])
        return out
