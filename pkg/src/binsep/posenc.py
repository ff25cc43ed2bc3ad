"""Sinusoidal 2D positional encoding of object regions.

Pixel coordinates inside a bounding box are normalized over the full frame
to [-1, 1] (pixel-center convention), lifted with the sin/cos frequency
stack, adaptively max-pooled to the visual grid, and projected per spatial
location by a two-layer MLP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .layers import Linear, Module, adaptive_max_pool2d


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"box {self} has negative coordinates")

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def center(self):
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)


def encode_coords(x, y, depth):
    """Frequency lifting of normalized coordinates; returns 4*depth channels.

    Channel order per level k: sin(2^k pi x), cos(2^k pi x),
    sin(2^k pi y), cos(2^k pi y).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    chans = []
    for k in range(depth):
        f = (2.0**k) * np.pi
        chans.extend([np.sin(f * x), np.cos(f * x), np.sin(f * y), np.cos(f * y)])
    return np.stack(chans, axis=0)


def encode_region(box, frame_w, frame_h, depth=16):
    """Encode every pixel of `box`; output shape (4*depth, H_b, W_b)."""
    if box.x1 > frame_w or box.y1 > frame_h:
        raise ValueError(f"box {box} exceeds frame {frame_w}x{frame_h}")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    xs = 2.0 * (np.arange(box.x0, box.x1) + 0.5) / frame_w - 1.0
    ys = 2.0 * (np.arange(box.y0, box.y1) + 0.5) / frame_h - 1.0
    gx, gy = np.meshgrid(xs, ys)  # (H_b, W_b)
    return encode_coords(gx, gy, depth)


class PositionProjector(Module):
    """Pointwise MLP after adaptive max pooling: 4*depth -> hidden -> out."""

    def __init__(self, rng, depth, hidden, out_dim):
        self.depth = depth
        self.fc1 = Linear(rng, 4 * depth, hidden)
        self.fc2 = Linear(rng, hidden, out_dim)

    def __call__(self, pooled):
        """pooled: ndarray (C_e, H, W) -> DiffTensor (out_dim, H, W)."""
        ce, h, w = pooled.shape
        tokens = ag.DiffTensor(
            pooled.reshape(ce, h * w).T.astype(np.float32)
        )  # (H*W, C_e)
        hid = ag.relu(self.fc1(tokens))
        out = self.fc2(hid)  # (H*W, out)
        return ag.transpose(ag.reshape(out, (h, w, -1)), (2, 0, 1))


def pool_and_project(enc, target_hw, projector):
    """Adaptive max pool to `target_hw`, then pointwise MLP projection."""
    if enc.shape[0] != 4 * projector.depth:
        raise ValueError(
            f"encoding channels {enc.shape[0]} != 4*depth {4 * projector.depth}"
        )
    pooled = adaptive_max_pool2d(enc, target_hw)
    return projector(pooled)
