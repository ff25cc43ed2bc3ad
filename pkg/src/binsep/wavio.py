"""WAV file I/O (16-bit PCM) and windowed-sinc resampling."""

from __future__ import annotations

import wave

import numpy as np


def write_wav(path, samples, sample_rate):
    """Write float samples in [-1, 1] as 16-bit PCM; (n,) mono or (n, 2) stereo."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        channels = 1
    elif samples.ndim == 2 and samples.shape[1] in (1, 2):
        channels = samples.shape[1]
    else:
        raise ValueError("samples must be (n,) or (n, channels<=2)")
    clipped = np.clip(samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def read_wav(path):
    """Read a 16-bit PCM WAV; returns (samples float64 in [-1, 1], sample_rate)."""
    with wave.open(str(path), "rb") as w:
        channels = w.getnchannels()
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM supported")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    samples = pcm.astype(np.float64) / 32767.0
    if channels > 1:
        samples = samples.reshape(-1, channels)
    return samples, rate


def resample(x, rate_in, rate_out, taps=32):
    """Windowed-sinc resampling of a 1-D signal to a new rate."""
    x = np.asarray(x, dtype=np.float64)
    if rate_in == rate_out:
        return x.copy()
    n_out = int(round(x.size * rate_out / rate_in))
    # anti-aliasing cutoff relative to the input Nyquist
    fc = min(1.0, rate_out / rate_in)
    t = np.arange(n_out) * (rate_in / rate_out)
    k0 = np.floor(t).astype(int) - taps // 2 + 1
    offsets = np.arange(taps)
    idx = k0[:, None] + offsets[None, :]
    frac = t[:, None] - idx
    kernel = fc * np.sinc(fc * frac)
    # Hann taper over the tap span
    kernel *= 0.5 + 0.5 * np.cos(np.pi * np.clip(frac / (taps // 2), -1.0, 1.0))
    valid = (idx >= 0) & (idx < x.size)
    gathered = np.where(valid, x[np.clip(idx, 0, x.size - 1)], 0.0)
    return (gathered * kernel).sum(axis=1)
