"""Binaural operations: IPD extraction, synthetic spatialization, mixing.

Spatialization is a simple spherical-head model: Woodworth interaural time
difference applied to the far ear as a fractional delay, plus a frequency-
independent level difference. Positive azimuth moves the source toward the
left ear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import ComplexSpectrogram, Waveform

HEAD_RADIUS_M = 0.0875
SPEED_OF_SOUND = 343.0
ILD_MAX_DB = 6.0  # total left/right level difference at |azimuth| = 90 deg
SILENT_EPS = 1e-8
DELAY_TAPS = 31


@dataclass
class BinauralClip:
    left: Waveform
    right: Waveform

    def __post_init__(self):
        if len(self.left) != len(self.right):
            raise ValueError("left/right lengths differ")
        if self.left.sample_rate != self.right.sample_rate:
            raise ValueError("left/right sample rates differ")

    def __len__(self):
        return len(self.left)

    @property
    def sample_rate(self):
        return self.left.sample_rate

    def stereo(self):
        """(n, 2) array for WAV output."""
        return np.stack([self.left.samples, self.right.samples], axis=1)


@dataclass
class IPDMap:
    """Cosine of the left/right phase difference, shape (T, F), values in [-1, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("IPD map must be (T, F)")
        if self.data.min() < -1.0 - 1e-12 or self.data.max() > 1.0 + 1e-12:
            raise ValueError("IPD values outside [-1, 1]")


def compute_ipd(xl, xr):
    """IPD(u, v) = cos(angle(X_L) - angle(X_R)); silent bins map to 1."""
    if xl.bins.shape != xr.bins.shape:
        raise ValueError(f"spectrogram shapes differ: {xl.bins.shape} vs {xr.bins.shape}")
    # cos(a - b) from the normalized cross-spectrum avoids angle wrapping
    cross = xl.bins * np.conj(xr.bins)
    mag = np.abs(cross)
    data = np.ones_like(mag)
    live = (np.abs(xl.bins) >= SILENT_EPS) | (np.abs(xr.bins) >= SILENT_EPS)
    ok = live & (mag > 0)
    data[ok] = np.clip(cross.real[ok] / mag[ok], -1.0, 1.0)
    return IPDMap(data.T)


def woodworth_itd(azimuth_deg):
    """Interaural time difference in seconds for a spherical head."""
    theta = np.deg2rad(abs(azimuth_deg))
    return HEAD_RADIUS_M / SPEED_OF_SOUND * (theta + np.sin(theta))


def fractional_delay(x, delay_samples, taps=DELAY_TAPS):
    """Delay a signal by a fractional number of samples (windowed sinc)."""
    if delay_samples == 0:
        return x.copy()
    n = np.arange(taps) - (taps - 1) / 2
    kernel = np.sinc(n - delay_samples)
    kernel *= np.hanning(taps)
    kernel /= kernel.sum()
    full = np.convolve(x, kernel)
    start = (taps - 1) // 2
    return full[start : start + x.size]


def render_binaural(mono, azimuth_deg):
    """Spatialize a mono source: ITD on the far ear, +-ILD/2 per-ear gains."""
    if abs(azimuth_deg) > 90:
        raise ValueError(f"azimuth {azimuth_deg} outside [-90, 90]")
    sr = mono.sample_rate
    itd = woodworth_itd(azimuth_deg)
    delay = itd * sr
    sin_t = np.sin(np.deg2rad(azimuth_deg))
    gain_l = 10.0 ** (+ILD_MAX_DB * sin_t / 40.0)
    gain_r = 10.0 ** (-ILD_MAX_DB * sin_t / 40.0)
    x = mono.samples
    if azimuth_deg > 0:  # source on the left: right ear is far
        left = gain_l * x
        right = gain_r * fractional_delay(x, delay)
    elif azimuth_deg < 0:
        left = gain_l * fractional_delay(x, delay)
        right = gain_r * x
    else:
        left = x.copy()
        right = x.copy()
    return BinauralClip(Waveform(left, sr), Waveform(right, sr))


def mix(clips):
    """Per-channel sample-wise sum; no normalization."""
    if not clips:
        raise ValueError("mix requires at least one clip")
    length = len(clips[0])
    rate = clips[0].sample_rate
    for c in clips[1:]:
        if len(c) != length:
            raise ValueError("clip lengths differ")
        if c.sample_rate != rate:
            raise ValueError("clip sample rates differ")
    left = np.sum([c.left.samples for c in clips], axis=0)
    right = np.sum([c.right.samples for c in clips], axis=0)
    return BinauralClip(Waveform(left, rate), Waveform(right, rate))
