"""Mask construction, reconstruction, differentiable mask-to-waveform path,
model forward contracts, checkpoint round trips, and mono-to-binaural
transfer identity."""

import numpy as np
import pytest

from binsep import autograd as ag
from binsep.autograd import DiffTensor
from binsep.config import PRESETS
from binsep.dsp import Waveform, istft, stft
from binsep.posenc import BoundingBox
from binsep.separator import (
    LAVSSModel,
    ModelConfig,
    apply_mask_and_reconstruct,
    binaural_inputs,
    build_from_state,
    ground_truth_mask,
    log_grid_magnitude,
    mask_to_linear,
    masked_istft,
    model_state,
    mono_inputs,
    separate,
    transfer_from_mono,
)
from binsep.spatial import render_binaural


TINY = PRESETS["tiny"]


def _tiny_mixture(seed=0):
    rng = np.random.default_rng(seed)
    n = TINY.clip_samples
    a = render_binaural(Waveform(rng.standard_normal(n) * 0.2, TINY.sample_rate), 40.0)
    b = render_binaural(Waveform(rng.standard_normal(n) * 0.2, TINY.sample_rate), -30.0)
    from binsep.spatial import mix

    return mix([a, b])


def _tiny_objects(rng):
    p = TINY.patch_size
    patch = rng.uniform(0, 1, size=(3, p, p))
    box = BoundingBox(10, 10, 10 + p, 10 + p)
    return [(patch, box)]


# -- masks ----------------------------------------------------------------------


def test_ground_truth_mask_fixtures():
    # dominance = at least half the mixture magnitude
    src = np.array([[0.8, 0.25, 0.2, 0.0]])
    mixm = np.array([[0.5, 0.5, 0.5, 0.0]])
    np.testing.assert_array_equal(ground_truth_mask(src, mixm), [[1.0, 1.0, 0.0, 1.0]])
    with pytest.raises(ValueError):
        ground_truth_mask(np.zeros((2, 3)), np.zeros((3, 2)))


def test_mask_to_linear_ones_and_range():
    ones = np.ones((5, 16))
    lin = mask_to_linear(ones, 32)
    np.testing.assert_allclose(lin, 1.0, atol=1e-12)
    rng = np.random.default_rng(0)
    m = rng.uniform(0, 1, size=(5, 16))
    lin = mask_to_linear(m, 32)
    assert lin.min() >= 0.0 and lin.max() <= 1.0


def test_identity_mask_reconstructs_mixture():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(1000)
    spec = stft(Waveform(x, 8000), 254, 64)
    ones = np.ones((spec.n_frames, spec.bins.shape[0]))
    y = apply_mask_and_reconstruct(ones, spec, len(x))
    assert np.abs(y.samples - x).max() < 1e-4


def test_identity_mask_on_log_grid_reconstructs_mixture():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(1000)
    spec = stft(Waveform(x, 8000), 254, 64)
    ones = np.ones((spec.n_frames, 64))
    y = apply_mask_and_reconstruct(ones, spec, len(x))
    assert np.abs(y.samples - x).max() < 1e-4


def test_zero_mask_reconstructs_silence():
    spec = stft(Waveform(np.random.default_rng(3).standard_normal(800), 8000), 254, 64)
    y = apply_mask_and_reconstruct(np.zeros((spec.n_frames, 128)), spec, 500)
    np.testing.assert_array_equal(y.samples, 0)


def test_mask_out_of_range_rejected():
    spec = stft(Waveform(np.ones(800), 8000), 254, 64)
    bad = np.full((spec.n_frames, 128), 1.5)
    with pytest.raises(ValueError, match="outside"):
        apply_mask_and_reconstruct(bad, spec, 500)


def test_log_grid_magnitude_shape_and_values():
    spec = stft(Waveform(np.random.default_rng(4).standard_normal(800), 8000), 254, 64)
    m = log_grid_magnitude(spec, 64)
    assert m.shape == (spec.n_frames, 64)
    assert (m >= 0).all()


# -- differentiable mask path ----------------------------------------------------


def test_masked_istft_forward_matches_reconstruction():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(600)
    spec = stft(Waveform(x, 8000), 62, 32)
    mask = rng.uniform(0, 1, size=(spec.n_frames, 16))
    ref = apply_mask_and_reconstruct(mask, spec, 500).samples
    out = masked_istft(DiffTensor(mask.astype(np.float32)), spec, 500).values
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_masked_istft_gradient_matches_finite_differences():
    """Backward pass matches float64 central differences of the numpy
    reconstruction path (the float32 forward is too coarse for FD)."""
    rng = np.random.default_rng(6)
    x = rng.standard_normal(300)
    spec = stft(Waveform(x, 8000), 62, 32)
    w = rng.standard_normal(200)
    mask0 = rng.uniform(0.2, 0.8, size=(spec.n_frames, 16))

    t = DiffTensor(mask0.copy(), requires_grad=True)
    loss = ag.sum_(masked_istft(t, spec, 200) * DiffTensor(w.astype(np.float32)))
    loss.backward()
    g = t.grad

    def loss64(m):
        y = apply_mask_and_reconstruct(m, spec, 200).samples
        return float(np.dot(y, w))

    h = 1e-5
    fd = np.zeros_like(mask0)
    for i in range(mask0.shape[0]):
        for j in range(mask0.shape[1]):
            m = mask0.copy()
            m[i, j] += h
            hi = loss64(m)
            m[i, j] -= 2 * h
            lo = loss64(m)
            fd[i, j] = (hi - lo) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
    assert np.max(np.abs(g - fd) / denom) < 1e-4


# -- input construction ----------------------------------------------------------


def test_binaural_inputs_shapes_and_shared_ipd():
    cfg = ModelConfig.from_preset(TINY)
    mixture = _tiny_mixture()
    inputs, (sl, sr) = binaural_inputs(mixture, cfg)
    assert inputs.shape == (2, 2, cfg.t_frames, cfg.f_bins)
    assert inputs.dtype == np.float32
    np.testing.assert_array_equal(inputs[0, 1], inputs[1, 1])  # shared IPD plane
    assert np.abs(inputs[0, 1]).max() <= 1.0
    assert sl.n_frames == cfg.t_frames and sr.n_frames == cfg.t_frames


def test_binaural_inputs_without_ipd():
    cfg = ModelConfig.from_preset(TINY, in_channels=1)
    inputs, _ = binaural_inputs(_tiny_mixture(), cfg, use_ipd=False)
    assert inputs.shape == (2, 1, cfg.t_frames, cfg.f_bins)


def test_mono_inputs_shape():
    cfg = ModelConfig.from_preset(TINY, in_channels=1, use_position=False, mono=True)
    rng = np.random.default_rng(7)
    feat, spec = mono_inputs(Waveform(rng.standard_normal(cfg.clip_samples), 8000), cfg)
    assert feat.shape == (1, 1, cfg.t_frames, cfg.f_bins)
    assert spec.n_frames == cfg.t_frames


def test_binaural_inputs_too_short():
    cfg = ModelConfig.from_preset(TINY)
    rng = np.random.default_rng(8)
    short = render_binaural(Waveform(rng.standard_normal(100), TINY.sample_rate), 0.0)
    with pytest.raises(ValueError, match="too short"):
        binaural_inputs(short, cfg)


# -- model forward ---------------------------------------------------------------


def test_forward_masks_shapes_and_batch_equivariance():
    cfg = ModelConfig.from_preset(TINY)
    model = LAVSSModel(cfg, seed=0)
    rng = np.random.default_rng(9)
    inputs, _ = binaural_inputs(_tiny_mixture(), cfg)
    patch, box = _tiny_objects(rng)[0]
    with ag.no_grad():
        logits = model.forward_masks(
            inputs, patch[None], [box], obj_index=np.array([0, 0])
        ).values
        swapped = model.forward_masks(
            inputs[::-1].copy(), patch[None], [box], obj_index=np.array([0, 0])
        ).values
    assert logits.shape == (2, cfg.t_frames, cfg.f_bins)
    assert np.isfinite(logits).all()
    np.testing.assert_allclose(swapped, logits[::-1], atol=1e-5)


def test_forward_masks_channel_count_check():
    cfg = ModelConfig.from_preset(TINY)
    model = LAVSSModel(cfg, seed=0)
    rng = np.random.default_rng(10)
    bad = rng.standard_normal((2, 1, cfg.t_frames, cfg.f_bins)).astype(np.float32)
    patch, box = _tiny_objects(rng)[0]
    with pytest.raises(ValueError, match="channels"):
        model.forward_masks(bad, patch[None], [box], obj_index=np.array([0, 0]))


def test_forward_masks_requires_obj_index_on_mismatch():
    cfg = ModelConfig.from_preset(TINY)
    model = LAVSSModel(cfg, seed=0)
    rng = np.random.default_rng(11)
    inputs, _ = binaural_inputs(_tiny_mixture(), cfg)
    patch, box = _tiny_objects(rng)[0]
    with pytest.raises(ValueError, match="obj_index"):
        model.forward_masks(inputs, patch[None], [box])


def test_gradient_reaches_ipd_input_column():
    """Backprop through the full model produces nonzero gradient on the IPD
    column of the first convolution."""
    cfg = ModelConfig.from_preset(TINY)
    model = LAVSSModel(cfg, seed=0)
    rng = np.random.default_rng(12)
    inputs, _ = binaural_inputs(_tiny_mixture(), cfg)
    patch, box = _tiny_objects(rng)[0]
    logits = model.forward_masks(inputs, patch[None], [box], obj_index=np.array([0, 0]))
    loss = ag.mean(ag.sigmoid(logits) * ag.sigmoid(logits))
    loss.backward()
    g = model.unet.enc_convs[0].weight.grad
    assert g is not None
    assert np.abs(g[:, 1]).max() > 0  # IPD column
    assert np.abs(g[:, 0]).max() > 0  # magnitude column


# -- inference -------------------------------------------------------------------


def test_separate_outputs_are_sane():
    cfg = ModelConfig.from_preset(TINY)
    model = LAVSSModel(cfg, seed=0)
    mixture = _tiny_mixture()
    objects = _tiny_objects(np.random.default_rng(13)) * 2
    ests = separate(model, mixture, objects)
    assert len(ests) == 2
    for est in ests:
        assert len(est.left.samples) == len(mixture)
        assert np.isfinite(est.left.samples).all()
        assert np.isfinite(est.right.samples).all()
        # masked magnitudes never exceed the mixture's, up to grid projection
        assert np.abs(est.left.samples).max() <= np.abs(mixture.left.samples).max() * 2


def test_separate_rejects_mono_model_and_empty_objects():
    mono_cfg = ModelConfig.from_preset(TINY, in_channels=1, use_position=False, mono=True)
    model = LAVSSModel(mono_cfg, seed=0)
    mixture = _tiny_mixture()
    with pytest.raises(ValueError, match="mono"):
        separate(model, mixture, _tiny_objects(np.random.default_rng(14)))
    bin_model = LAVSSModel(ModelConfig.from_preset(TINY), seed=0)
    with pytest.raises(ValueError, match="object"):
        separate(bin_model, mixture, [])


def test_separate_works_without_ipd_channel():
    cfg = ModelConfig.from_preset(TINY, in_channels=1)
    model = LAVSSModel(cfg, seed=0)
    ests = separate(model, _tiny_mixture(), _tiny_objects(np.random.default_rng(15)))
    assert len(ests) == 1
    assert np.isfinite(ests[0].left.samples).all()


# -- checkpoint round trip and transfer -------------------------------------------


def test_model_state_round_trip_identical_outputs():
    cfg = ModelConfig.from_preset(TINY)
    model = LAVSSModel(cfg, seed=0)
    rebuilt = build_from_state(model_state(model), seed=99)
    assert rebuilt.cfg == cfg
    rng = np.random.default_rng(16)
    inputs, _ = binaural_inputs(_tiny_mixture(), cfg)
    patch, box = _tiny_objects(rng)[0]
    with ag.no_grad():
        a = model.forward_masks(inputs, patch[None], [box], obj_index=np.array([0, 0]))
        b = rebuilt.forward_masks(inputs, patch[None], [box], obj_index=np.array([0, 0]))
    np.testing.assert_array_equal(a.values, b.values)


def test_transfer_identity_on_matched_inputs():
    """The inflated binaural model reproduces the mono model exactly when the
    magnitude channel matches: max |logit difference| < 1e-6."""
    mono_cfg = ModelConfig.from_preset(TINY, in_channels=1, use_position=False, mono=True)
    mono_model = LAVSSModel(mono_cfg, seed=3)
    bin_cfg = ModelConfig.from_preset(TINY)  # IPD + position enabled
    inflated = transfer_from_mono(model_state(mono_model), bin_cfg, seed=7)

    rng = np.random.default_rng(17)
    mag = rng.standard_normal((1, 1, TINY.t_frames, TINY.f_log)).astype(np.float32)
    ipd = rng.uniform(-1, 1, size=(1, 1, TINY.t_frames, TINY.f_log)).astype(np.float32)
    both = np.concatenate([mag, ipd], axis=1)
    patch, box = _tiny_objects(rng)[0]
    with ag.no_grad():
        ref = mono_model.forward_masks(mag, patch[None], [box]).values
        out = inflated.forward_masks(both, patch[None], [box]).values
    assert np.abs(out - ref).max() < 1e-6


def test_transfer_rejects_mismatched_schedule():
    mono_cfg = ModelConfig.from_preset(TINY, in_channels=1, use_position=False, mono=True)
    mono_model = LAVSSModel(mono_cfg, seed=0)
    desk_cfg = ModelConfig.from_preset(PRESETS["desk"])
    with pytest.raises(ValueError, match="mismatched fields"):
        transfer_from_mono(model_state(mono_model), desk_cfg)


def test_transfer_rejects_incomplete_state():
    mono_cfg = ModelConfig.from_preset(TINY, in_channels=1, use_position=False, mono=True)
    mono_model = LAVSSModel(mono_cfg, seed=0)
    state = model_state(mono_model)
    del state["unet.merge.weight"]
    with pytest.raises(ValueError, match="missing"):
        transfer_from_mono(state, ModelConfig.from_preset(TINY))


def test_config_array_round_trip():
    cfg = ModelConfig.from_preset(PRESETS["desk"], in_channels=1, use_position=False)
    assert ModelConfig.from_arrays(cfg.to_arrays()) == cfg
    mono = ModelConfig.from_preset(TINY, in_channels=1, use_position=False, mono=True)
    assert ModelConfig.from_arrays(mono.to_arrays()) == mono


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig.from_preset(
            PRESETS["tiny"]
        ).__class__(**{**ModelConfig.from_preset(TINY).__dict__, "t_frames": 12})
    with pytest.raises(ValueError, match="mono"):
        ModelConfig.from_preset(TINY, in_channels=2, mono=True)
