"""Separation backbone: U-Net with guidance injection, the full model
(visual encoder + position pathway + fusion + U-Net), mask construction,
reconstruction, per-channel inference, and mono-to-binaural transfer.

The network always predicts a magnitude mask on the log-frequency grid;
reconstruction projects the mask back to linear bins, scales the mixture
magnitude, reuses the mixture phase, and inverts the STFT.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import DiffTensor
from .dsp import (
    ComplexSpectrogram,
    FeatureMap,
    Waveform,
    istft,
    istft_adjoint,
    linear_grid_matrix,
    log_freq_rescale,
    log_mag,
    stft,
)
from .fusion import AVPFusion, QueryProjections, VPCrossAttention, assemble_audio_queries
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .posenc import PositionProjector, encode_region, pool_and_project
from .spatial import compute_ipd


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a model from a checkpoint."""

    sample_rate: int
    frame_len: int
    hop_len: int
    t_frames: int
    f_bins: int  # log-frequency bins fed to the U-Net
    unet_channels: tuple
    model_dim: int
    heads: int
    cma_depth: int
    pos_depth: int
    pos_hidden: int
    visual_blocks: int
    patch_size: int
    frame_w: int
    frame_h: int
    in_channels: int = 2
    use_position: bool = True
    mono: bool = False  # single-channel pretraining mode (not binaural)

    def __post_init__(self):
        n = len(self.unet_channels)
        if self.t_frames % (1 << n) or self.f_bins % (1 << n):
            raise ValueError("T and F must be divisible by 2^levels")
        if self.in_channels not in (1, 2):
            raise ValueError("in_channels must be 1 or 2")
        if self.mono and self.in_channels != 1:
            raise ValueError("mono mode requires in_channels=1")

    @property
    def levels(self):
        return len(self.unet_channels)

    @property
    def f_lin(self):
        return self.frame_len // 2 + 1

    @property
    def clip_samples(self):
        return (self.t_frames - 1) * self.hop_len

    @property
    def visual_grid(self):
        return self.patch_size >> self.visual_blocks

    @classmethod
    def from_preset(cls, preset, in_channels=2, use_position=True, mono=False):
        return cls(
            sample_rate=preset.sample_rate,
            frame_len=preset.frame_len,
            hop_len=preset.hop_len,
            t_frames=preset.t_frames,
            f_bins=preset.f_log,
            unet_channels=tuple(preset.unet_channels),
            model_dim=preset.model_dim,
            heads=preset.heads,
            cma_depth=preset.cma_depth,
            pos_depth=preset.pos_depth,
            pos_hidden=preset.pos_hidden,
            visual_blocks=preset.visual_blocks,
            patch_size=preset.patch_size,
            frame_w=preset.frame_w,
            frame_h=preset.frame_h,
            in_channels=in_channels,
            use_position=use_position,
            mono=mono,
        )

    _SCALARS = (
        "sample_rate frame_len hop_len t_frames f_bins model_dim heads cma_depth "
        "pos_depth pos_hidden visual_blocks patch_size frame_w frame_h in_channels"
    ).split()

    def to_arrays(self):
        arrays = {f"config.{k}": np.array([getattr(self, k)], dtype=np.float32) for k in self._SCALARS}
        arrays["config.use_position"] = np.array([float(self.use_position)], dtype=np.float32)
        arrays["config.mono"] = np.array([float(self.mono)], dtype=np.float32)
        arrays["config.unet_channels"] = np.array(self.unet_channels, dtype=np.float32)
        return arrays

    @classmethod
    def from_arrays(cls, arrays):
        kwargs = {k: int(arrays[f"config.{k}"][0]) for k in cls._SCALARS}
        kwargs["use_position"] = bool(arrays["config.use_position"][0])
        if "config.mono" in arrays:
            kwargs["mono"] = bool(arrays["config.mono"][0])
        kwargs["unet_channels"] = tuple(int(c) for c in arrays["config.unet_channels"])
        return cls(**kwargs)


class VisualEncoder(Module):
    """Strided CNN over object patches; output grid patch_size / 2^blocks."""

    def __init__(self, rng, dim, blocks):
        chans = [dim >> (blocks - 1 - i) for i in range(blocks)]
        self.convs = []
        prev = 3
        for c in chans:
            self.convs.append(Conv2d(rng, prev, c, 4, stride=2, padding=1))
            prev = c
        self.bns = [BatchNorm2d(c) for c in chans[1:]]

    def __call__(self, x, training=False):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i > 0:
                x = self.bns[i - 1](x, training)
            x = ag.leaky_relu(x, 0.2)
        return x


class UNet(Module):
    """Strided-conv encoder / transposed-conv decoder with skip connections.

    Guidance enters at the bottleneck by channel concatenation followed by
    a pointwise conv back to the schedule width.
    """

    def __init__(self, rng, in_channels, channels, guidance_dim):
        n = len(channels)
        self.enc_convs = []
        prev = in_channels
        for c in channels:
            self.enc_convs.append(Conv2d(rng, prev, c, 4, stride=2, padding=1))
            prev = c
        self.enc_bns = [BatchNorm2d(c) for c in channels[1:]]
        self.merge = Conv2d(rng, channels[-1] + guidance_dim, channels[-1], 1)
        self.dec_convs = []
        self.dec_bns = []
        for j in range(n):
            in_ch = channels[n - 1] if j == 0 else 2 * channels[n - 1 - j]
            out_ch = 1 if j == n - 1 else channels[n - 2 - j]
            self.dec_convs.append(ConvTranspose2d(rng, in_ch, out_ch, 4, stride=2, padding=1))
            if j < n - 1:
                self.dec_bns.append(BatchNorm2d(out_ch))

    def encode(self, x, training=False):
        skips = []
        h = x
        for i, conv in enumerate(self.enc_convs):
            h = conv(h)
            if i > 0:
                h = self.enc_bns[i - 1](h, training)
            h = ag.leaky_relu(h, 0.2)
            skips.append(h)
        return skips

    def decode(self, skips, guidance=None, training=False):
        n = len(self.enc_convs)
        h = skips[-1]
        if guidance is not None:
            if guidance.shape[-2:] != h.shape[-2:]:
                raise ValueError(
                    f"guidance spatial shape {guidance.shape[-2:]} != bottleneck {h.shape[-2:]}"
                )
            h = self.merge(ag.concat([h, guidance], axis=1))
        for j, conv in enumerate(self.dec_convs):
            if j > 0:
                h = ag.concat([h, skips[n - 1 - j]], axis=1)
            h = conv(h)
            if j < n - 1:
                h = self.dec_bns[j](h, training)
                h = ag.relu(h)
        return h  # (B, 1, T, F) logits

    def forward(self, x, guidance=None, training=False):
        return self.decode(self.encode(x, training), guidance, training)


class LAVSSModel(Module):
    """Visual encoder, position pathway, fusion stack, and U-Net."""

    def __init__(self, cfg, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d = cfg.model_dim
        self.visual = VisualEncoder(rng, d, cfg.visual_blocks)
        self.pos_proj = PositionProjector(rng, cfg.pos_depth, cfg.pos_hidden, d)
        self.vp = VPCrossAttention(rng, d, cfg.heads, cfg.cma_depth)
        n = cfg.levels
        self.qprojs = QueryProjections(
            rng, [cfg.unet_channels[n - 1], cfg.unet_channels[n - 2], cfg.unet_channels[n - 3]], d
        )
        self.avp = AVPFusion(rng, d, cfg.heads, cfg.cma_depth)
        self.unet = UNet(rng, cfg.in_channels, cfg.unet_channels, d)

    def position_features(self, boxes):
        g = self.cfg.visual_grid
        feats = []
        for box in boxes:
            enc = encode_region(box, self.cfg.frame_w, self.cfg.frame_h, self.cfg.pos_depth)
            f = pool_and_project(enc, (g, g), self.pos_proj)
            feats.append(ag.reshape(f, (1,) + f.shape))
        return ag.concat(feats, axis=0)

    def forward_masks(self, inputs, patches, boxes, obj_index=None, training=False):
        """Mask logits for a batch of spectro-spatial inputs.

        inputs: (B, C_in, T, F); patches: (B_obj, 3, P, P); boxes: list of
        length B_obj; obj_index maps each input row to its object (identity
        when omitted). Returns logits of shape (B, T, F).
        """
        x = inputs if isinstance(inputs, DiffTensor) else DiffTensor(
            np.asarray(inputs, dtype=np.float32)
        )
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}"
            )
        pt = patches if isinstance(patches, DiffTensor) else DiffTensor(
            np.asarray(patches, dtype=np.float32)
        )
        fv = self.visual(pt, training)
        if self.cfg.use_position:
            fp = self.position_features(boxes)
            fvp = fv + self.vp(fv, fp)
        else:
            fvp = fv
        if obj_index is not None:
            fvp = ag.take(fvp, np.asarray(obj_index))
        elif fvp.shape[0] != x.shape[0]:
            raise ValueError("object count differs from batch size; pass obj_index")
        skips = self.unet.encode(x, training)
        queries = assemble_audio_queries([skips[-1], skips[-2], skips[-3]], self.qprojs)
        guidance = self.avp(queries, fvp)
        logits = self.unet.decode(skips, guidance, training)
        return ag.reshape(logits, (x.shape[0], x.shape[2], x.shape[3]))


# -- input feature construction ----------------------------------------------


def _crop_spec(spec, t_frames):
    if spec.n_frames < t_frames:
        raise ValueError(f"clip too short: {spec.n_frames} frames < {t_frames}")
    return ComplexSpectrogram(
        spec.bins[:, :t_frames],
        frame_len=spec.frame_len,
        hop_len=spec.hop_len,
        window=spec.window,
        sample_rate=spec.sample_rate,
    )


def _log_feature(spec, f_bins):
    return log_freq_rescale(log_mag(spec), f_bins).data[0]  # (T, F_log)


def binaural_inputs(mixture, cfg, use_ipd=True):
    """Per-channel network inputs for a binaural mixture.

    Returns (inputs, (spec_left, spec_right)) where inputs has shape
    (2, C_in, T, F): row 0 drives the left-channel pass, row 1 the right.
    The IPD plane is shared by both passes.
    """
    sl = _crop_spec(stft(mixture.left, cfg.frame_len, cfg.hop_len), cfg.t_frames)
    sr = _crop_spec(stft(mixture.right, cfg.frame_len, cfg.hop_len), cfg.t_frames)
    mag_l = _log_feature(sl, cfg.f_bins)
    mag_r = _log_feature(sr, cfg.f_bins)
    if use_ipd:
        ipd_lin = compute_ipd(sl, sr).data  # (T, F_lin)
        ipd_map = log_freq_rescale(FeatureMap(ipd_lin[None], freq_axis="linear"), cfg.f_bins)
        ipd = np.clip(ipd_map.data[0], -1.0, 1.0)
        inputs = np.stack(
            [np.stack([mag_l, ipd]), np.stack([mag_r, ipd])]
        )
    else:
        inputs = np.stack([mag_l[None], mag_r[None]])
    return inputs.astype(np.float32), (sl, sr)


def mono_inputs(wave, cfg):
    spec = _crop_spec(stft(wave, cfg.frame_len, cfg.hop_len), cfg.t_frames)
    feat = _log_feature(spec, cfg.f_bins)
    return feat[None, None].astype(np.float32), spec


# -- masks and reconstruction --------------------------------------------------


def ground_truth_mask(source_mag, mixture_mag):
    """Binary dominance mask: 1 where the source dominates the mixture.

    A source dominates a bin when it contributes at least half the mixture
    magnitude there. In a 2-source mixture this keeps the bins where this
    source is the majority contributor, which is what makes the oracle
    reconstruction a genuine upper bound (comparing against the full mixture
    magnitude instead would discard most shared bins).
    """
    source_mag = np.asarray(source_mag)
    mixture_mag = np.asarray(mixture_mag)
    if source_mag.shape != mixture_mag.shape:
        raise ValueError("magnitude shapes differ")
    return (source_mag >= 0.5 * mixture_mag).astype(np.float64)


def log_grid_magnitude(spec, f_bins):
    """Mixture/stem magnitudes resampled to the log grid, shape (T, F_log)."""
    mag = FeatureMap(np.abs(spec.bins.T)[None], freq_axis="linear")
    return log_freq_rescale(mag, f_bins).data[0]


def mask_to_linear(mask, f_lin):
    """Project a log-grid mask back to linear bins, clipped to [0, 1]."""
    w = linear_grid_matrix(f_lin, mask.shape[1])
    return np.clip(mask @ w.T, 0.0, 1.0)


def apply_mask_and_reconstruct(mask, mixture_spec, out_len):
    """Scale the mixture magnitude by the mask, keep the mixture phase, ISTFT."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.min() < -1e-9 or mask.max() > 1.0 + 1e-9:
        raise ValueError("mask values outside [0, 1]")
    f_lin = mixture_spec.bins.shape[0]
    if mask.shape[0] != mixture_spec.n_frames:
        raise ValueError("mask frame count differs from spectrogram")
    mask_lin = mask if mask.shape[1] == f_lin else mask_to_linear(mask, f_lin)
    bins = mask_lin.T * mixture_spec.bins
    est = ComplexSpectrogram(
        bins,
        frame_len=mixture_spec.frame_len,
        hop_len=mixture_spec.hop_len,
        window=mixture_spec.window,
        sample_rate=mixture_spec.sample_rate,
    )
    return istft(est, out_len)


def masked_istft(mask_log, mixture_spec, out_len):
    """Differentiable mask -> waveform path for the time-domain loss.

    mask_log: DiffTensor (T, F_log). The linear-grid projection is a fixed
    matrix multiply inside the graph; the ISTFT gradient uses the analytic
    adjoint of the synthesis operator.
    """
    f_lin = mixture_spec.bins.shape[0]
    w = linear_grid_matrix(f_lin, mask_log.shape[1])
    mask_lin = ag.matmul(mask_log, DiffTensor(w.T.astype(np.float32)))
    z = mixture_spec.bins.T  # (T, F_lin) complex
    bins = (mask_lin.values.astype(np.float64) * z).T
    est = ComplexSpectrogram(
        bins,
        frame_len=mixture_spec.frame_len,
        hop_len=mixture_spec.hop_len,
        window=mixture_spec.window,
        sample_rate=mixture_spec.sample_rate,
    )
    y = istft(est, out_len).samples

    def backward(g):
        if mask_lin.requires_grad:
            d_bins = istft_adjoint(
                g.astype(np.float64),
                mixture_spec.frame_len,
                mixture_spec.hop_len,
                mixture_spec.window,
                mixture_spec.n_frames,
                out_len,
            ).T  # (T, F_lin)
            mask_lin._accumulate((np.conj(z) * d_bins).real.astype(np.float32))

    return ag.custom_op(y.astype(np.float32), (mask_lin,), backward)


# -- inference -----------------------------------------------------------------


def separate(model, mixture, objects):
    """Per-object, per-channel separation with shared network weights.

    objects: list of (patch (3, P, P) float array, BoundingBox).
    Returns one estimated BinauralClip per object.
    """
    if not objects:
        raise ValueError("at least one object is required")
    cfg = model.cfg
    if cfg.mono:
        raise ValueError("mono-mode model cannot separate binaural input")
    inputs, (sl, sr) = binaural_inputs(mixture, cfg, use_ipd=cfg.in_channels == 2)
    out = []
    with ag.no_grad():
        for patch, box in objects:
            logits = model.forward_masks(
                inputs, np.asarray(patch)[None], [box], obj_index=np.array([0, 0])
            )
            masks = ag.sigmoid(logits).values
            est_l = apply_mask_and_reconstruct(masks[0], sl, min(len(mixture), cfg.clip_samples))
            est_r = apply_mask_and_reconstruct(masks[1], sr, min(len(mixture), cfg.clip_samples))
            left = np.zeros(len(mixture))
            right = np.zeros(len(mixture))
            left[: est_l.samples.size] = est_l.samples
            right[: est_r.samples.size] = est_r.samples
            out.append(
                type(mixture)(
                    Waveform(left, mixture.sample_rate), Waveform(right, mixture.sample_rate)
                )
            )
    return out


# -- checkpointing and transfer -------------------------------------------------


def model_state(model):
    state = model.state_dict()
    state.update(model.cfg.to_arrays())
    return state


def build_from_state(state, seed=0):
    cfg = ModelConfig.from_arrays(state)
    model = LAVSSModel(cfg, seed=seed)
    model.load_state_dict({k: v for k, v in state.items() if not k.startswith("config.")})
    return model


def transfer_from_mono(mono_state, binaural_cfg, seed=0):
    """Inflate a mono checkpoint into a binaural model.

    The magnitude column of the first conv is copied, the IPD column is
    zero-initialized, and the fresh position pathway is wired to contribute
    zero at initialization, so the inflated model reproduces the mono model
    exactly on matched inputs.
    """
    mono_cfg = ModelConfig.from_arrays(mono_state)
    shared = replace(mono_cfg, in_channels=binaural_cfg.in_channels,
                     use_position=binaural_cfg.use_position, mono=False)
    if shared != binaural_cfg:
        diffs = [
            name
            for name in binaural_cfg.__dataclass_fields__
            if getattr(shared, name) != getattr(binaural_cfg, name)
        ]
        raise ValueError(f"incompatible schedules; mismatched fields: {diffs}")
    model = LAVSSModel(binaural_cfg, seed=seed)
    fresh = {"pos_proj.", "vp."}
    state = {}
    for name, arr in mono_state.items():
        if name.startswith("config.") or any(name.startswith(p) for p in fresh):
            continue
        state[name] = arr
    first = "unet.enc_convs.0.weight"
    if binaural_cfg.in_channels == 2 and state[first].shape[1] == 1:
        inflated = np.zeros(
            (state[first].shape[0], 2) + state[first].shape[2:], dtype=np.float32
        )
        inflated[:, 0] = state[first][:, 0]
        state[first] = inflated
    expected = {
        n for n, _ in model.named_params() if not any(n.startswith(p) for p in fresh)
    }
    expected |= {
        n for n, _ in model.named_buffers() if not any(n.startswith(p) for p in fresh)
    }
    missing = expected - set(state)
    if missing:
        raise ValueError(f"mono checkpoint missing parameters: {sorted(missing)}")
    model.load_state_dict(state, strict=False)
    # position pathway contributes zero at init (exact transfer identity)
    model.vp.halve.weight.values[...] = 0.0
    model.vp.halve.bias.values[...] = 0.0
    return model
