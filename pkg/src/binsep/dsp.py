"""Time-frequency transforms: STFT, inverse STFT, log compression,
log-frequency rescaling.

Conventions (fixed for the whole package):
  - Hann window is periodic; frames are center-padded with zeros by
    frame_len // 2 on each side before framing.
  - No forward scaling; synthesis divides the overlap-added signal by the
    overlap-added squared window, which reconstructs unmodified frames
    exactly for any window with full coverage.
  - Log compression is log(1 + |X|) on amplitudes, so silence maps to 0.
  - The log-frequency grid is geometric over bin indices from 1 to F-1;
    the DC bin is merged into bin 1.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Waveform:
    """Time-domain audio, amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 11025

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """STFT output: complex bins of shape (frame_len // 2 + 1) x T."""

    bins: np.ndarray
    frame_len: int
    hop_len: int
    window: str = "hann"
    sample_rate: int = 11025

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.complex128)
        if self.bins.shape[0] != self.frame_len // 2 + 1:
            raise ValueError(
                f"bin count {self.bins.shape[0]} inconsistent with frame_len {self.frame_len}"
            )
        if not np.all(np.isfinite(self.bins)):
            raise ValueError("spectrogram contains non-finite bins")

    @property
    def n_frames(self):
        return self.bins.shape[1]

    @property
    def magnitude(self):
        """Magnitudes as a (T, F) matrix."""
        return np.abs(self.bins).T

    @property
    def phase(self):
        return np.angle(self.bins).T


@dataclass
class FeatureMap:
    """Real network-input tensor of shape (C, T, F) with a frequency-axis tag."""

    data: np.ndarray
    freq_axis: str = "linear"  # "linear" or "log"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("feature map must have shape (C, T, F)")
        if self.freq_axis not in ("linear", "log"):
            raise ValueError(f"unknown freq_axis {self.freq_axis!r}")


def get_window(name, frame_len):
    if name == "hann":
        # periodic Hann
        n = np.arange(frame_len)
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / frame_len)
    if name == "rect":
        return np.ones(frame_len)
    raise ValueError(f"unknown window {name!r}")


def _frame(x, frame_len, hop_len):
    n_frames = (x.size - frame_len) // hop_len + 1
    stride = x.strides[0]
    return np.lib.stride_tricks.as_strided(
        x, shape=(n_frames, frame_len), strides=(hop_len * stride, stride), writeable=False
    )


def stft(w, frame_len, hop_len, window="hann"):
    """Short-time Fourier transform with center padding."""
    if len(w) < frame_len:
        raise ValueError("input too short: signal shorter than one frame")
    win = get_window(window, frame_len)
    pad = frame_len // 2
    xp = np.pad(w.samples, (pad, pad))
    frames = _frame(xp, frame_len, hop_len) * win
    bins = np.fft.rfft(frames, axis=1).T
    return ComplexSpectrogram(
        bins, frame_len=frame_len, hop_len=hop_len, window=window, sample_rate=w.sample_rate
    )


def _overlap_add(frames, hop_len, total_len):
    out = np.zeros(total_len, dtype=frames.dtype)
    frame_len = frames.shape[1]
    for t in range(frames.shape[0]):
        out[t * hop_len : t * hop_len + frame_len] += frames[t]
    return out


def _window_square_sum(window, frame_len, hop_len, n_frames, total_len):
    win = get_window(window, frame_len)
    wsq = np.tile(win * win, (n_frames, 1))
    return _overlap_add(wsq, hop_len, total_len)


def istft(s, out_len):
    """Weighted overlap-add synthesis with squared-window normalization."""
    frame_len, hop_len = s.frame_len, s.hop_len
    pad = frame_len // 2
    n_frames = s.n_frames
    total_len = (n_frames - 1) * hop_len + frame_len
    if out_len <= 0 or out_len + pad > total_len:
        raise ValueError(f"out_len {out_len} outside the synthesizable range")
    win = get_window(s.window, frame_len)
    frames = np.fft.irfft(s.bins.T, n=frame_len, axis=1) * win
    num = _overlap_add(frames, hop_len, total_len)
    den = _window_square_sum(s.window, frame_len, hop_len, n_frames, total_len)
    interior = den[pad : total_len - pad]
    if interior.size and interior.min() < 1e-8:
        warnings.warn("reconstruction not exact: window/hop leaves coverage gaps")
    y = num / np.maximum(den, 1e-12)
    return Waveform(y[pad : pad + out_len], sample_rate=s.sample_rate)


def istft_adjoint(grad_out, frame_len, hop_len, window, n_frames, out_len):
    """Adjoint of the linear map bins -> istft(bins) for fixed geometry.

    Returns the complex (F, T) gradient such that
    Re(<grad_bins, d_bins>) matches <grad_out, d_istft>.
    """
    pad = frame_len // 2
    total_len = (n_frames - 1) * hop_len + frame_len
    win = get_window(window, frame_len)
    den = _window_square_sum(window, frame_len, hop_len, n_frames, total_len)
    g_pad = np.zeros(total_len)
    g_pad[pad : pad + out_len] = grad_out
    g_pad /= np.maximum(den, 1e-12)
    frames_g = _frame(g_pad, frame_len, hop_len) * win
    spec = np.fft.rfft(frames_g, axis=1)
    mult = np.full(frame_len // 2 + 1, 2.0)
    mult[0] = 1.0
    if frame_len % 2 == 0:
        mult[-1] = 1.0
    return (spec * (mult / frame_len)).T


def log_mag(s):
    """Log-compressed magnitude, shape (1, T, F_lin)."""
    return FeatureMap(
        np.log1p(np.abs(s.bins.T))[None, :, :],
        freq_axis="linear",
        meta={"frame_len": s.frame_len, "sample_rate": s.sample_rate},
    )


@functools.lru_cache(maxsize=16)
def _interp_matrix(src_positions_key, dst_positions_key):
    src = np.asarray(src_positions_key)
    dst = np.asarray(dst_positions_key)
    w = np.zeros((dst.size, src.size))
    for j, p in enumerate(dst):
        p = min(max(p, src[0]), src[-1])
        i = int(np.searchsorted(src, p, side="right")) - 1
        i = min(i, src.size - 2)
        frac = (p - src[i]) / (src[i + 1] - src[i])
        w[j, i] = 1.0 - frac
        w[j, i + 1] = frac
    return w


def _log_positions(f_lin, f_log):
    # geometric grid over bin indices 1 .. f_lin-1; DC merged into bin 1
    return np.geomspace(1.0, f_lin - 1.0, f_log)


@functools.lru_cache(maxsize=16)
def log_grid_matrix(f_lin, f_log):
    """(f_log, f_lin) linear-interpolation matrix, linear bins -> log bins."""
    if f_log > f_lin:
        raise ValueError(f"target bins {f_log} exceed source bins {f_lin}")
    src = tuple(np.arange(float(f_lin)))
    dst = tuple(_log_positions(f_lin, f_log))
    w = _interp_matrix(src, dst).copy()
    # DC merged into the lowest log bin: average of bins 0 and 1
    w[0, :] = 0.0
    w[0, 0] = 0.5
    w[0, 1] = 0.5
    return w


@functools.lru_cache(maxsize=16)
def linear_grid_matrix(f_lin, f_log):
    """(f_lin, f_log) interpolation matrix, log bins -> linear bins."""
    src = tuple(np.log(_log_positions(f_lin, f_log)))
    dst = tuple(np.log(np.maximum(np.arange(float(f_lin)), 1.0)))
    return _interp_matrix(src, dst)


def log_freq_rescale(m, f_log):
    """Resample a linear-frequency map onto `f_log` geometric bins."""
    if m.freq_axis != "linear":
        raise ValueError("input map must be on the linear frequency axis")
    f_lin = m.data.shape[2]
    w = log_grid_matrix(f_lin, f_log)
    return FeatureMap(m.data @ w.T, freq_axis="log", meta=dict(m.meta))


def linear_freq_rescale(m, f_lin):
    """Inverse companion of log_freq_rescale (mask projection back)."""
    if m.freq_axis != "log":
        raise ValueError("input map must be on the log frequency axis")
    f_log = m.data.shape[2]
    w = linear_grid_matrix(f_lin, f_log)
    return FeatureMap(m.data @ w.T, freq_axis="linear", meta=dict(m.meta))
