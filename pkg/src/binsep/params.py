"""Parameter store, Adam updates, and the binary checkpoint format."""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .autograd import DiffTensor

CKPT_MAGIC = b"BSEP"
CKPT_VERSION = 1


class ParamStore:
    """Named trainable parameters plus per-parameter Adam state."""

    def __init__(self, params):
        self.params = dict(params)
        if len(self.params) != len(set(self.params)):
            raise ValueError("duplicate parameter names")
        self.moment1 = {k: np.zeros_like(p.values) for k, p in self.params.items()}
        self.moment2 = {k: np.zeros_like(p.values) for k, p in self.params.items()}
        self.step_count = 0

    @classmethod
    def from_module(cls, module):
        return cls(dict(module.named_params()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
    """One Adam update; weight decay enters as an L2 term on the gradient."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.values
        m = store.moment1[name]
        v = store.moment2[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.values -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.values.dtype)


def save_checkpoint(path, arrays):
    """Write named float arrays: magic, version, entries, trailing CRC32.

    Layout per entry (little-endian): u16 name length, UTF-8 name, u8 rank,
    u32 dims, float32 payload.
    """
    body = bytearray()
    body += CKPT_MAGIC
    body += struct.pack("<II", CKPT_VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float32)
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded))
        body += encoded
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.astype("<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(body))


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    crc_stored = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc_stored:
        raise ValueError(f"{path}: checkpoint CRC mismatch")
    version, count = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + nlen].decode("utf-8")
        offset += nlen
        (rank,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(dims).copy()
        offset += 4 * n
    return arrays
