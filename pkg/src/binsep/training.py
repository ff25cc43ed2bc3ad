"""Mix-and-separate training loop and dataset evaluation.

Each scene holds two solo stems; training mixes them, predicts one mask
per (object, channel) with shared network weights, and regresses against
ideal binary masks plus a time-domain reconstruction term.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import DiffTensor
from .metrics import bss_eval
from .params import ParamStore, adam_step
from .separator import (
    _crop_spec,
    apply_mask_and_reconstruct,
    binaural_inputs,
    ground_truth_mask,
    log_grid_magnitude,
    masked_istft,
    mono_inputs,
    separate,
)
from .dsp import stft


@dataclass
class SceneFeatures:
    """Precomputed per-scene training tensors."""

    inputs: np.ndarray  # (n_ch, C_in, T, F)
    specs: list  # mixture ComplexSpectrogram per channel
    gt_masks: np.ndarray  # (n_obj, n_ch, T, F)
    targets: np.ndarray  # (n_obj, n_ch, clip_samples)
    patches: np.ndarray  # (n_obj, 3, P, P)
    boxes: list


def prepare_scene(scene, cfg, use_ipd=True, mono=False):
    n_obj = len(scene.stems)
    clip = cfg.clip_samples
    if mono:
        mixture = scene.mono_mixture()
        inputs, spec = mono_inputs(mixture, cfg)
        specs = [spec]
        mix_mags = [log_grid_magnitude(spec, cfg.f_bins)]
        stem_waves = [[stem.samples[:clip]] for stem in scene.stems]
        stem_specs = [
            [_crop_spec(stft(stem, cfg.frame_len, cfg.hop_len), cfg.t_frames)]
            for stem in scene.stems
        ]
    else:
        mixture = scene.mixture()
        inputs, (sl, sr) = binaural_inputs(mixture, cfg, use_ipd=use_ipd)
        specs = [sl, sr]
        mix_mags = [log_grid_magnitude(sl, cfg.f_bins), log_grid_magnitude(sr, cfg.f_bins)]
        stem_waves = [
            [clipd.left.samples[:clip], clipd.right.samples[:clip]] for clipd in scene.binaural
        ]
        stem_specs = []
        for clipd in scene.binaural:
            stem_specs.append(
                [
                    _crop_spec(stft(clipd.left, cfg.frame_len, cfg.hop_len), cfg.t_frames),
                    _crop_spec(stft(clipd.right, cfg.frame_len, cfg.hop_len), cfg.t_frames),
                ]
            )
    n_ch = len(specs)
    t, f = cfg.t_frames, cfg.f_bins
    gt = np.zeros((n_obj, n_ch, t, f), dtype=np.float32)
    targets = np.zeros((n_obj, n_ch, clip), dtype=np.float32)
    for j in range(n_obj):
        for c in range(n_ch):
            stem_mag = log_grid_magnitude(stem_specs[j][c], cfg.f_bins)
            gt[j, c] = ground_truth_mask(stem_mag, mix_mags[c])
            targets[j, c] = stem_waves[j][c]
    return SceneFeatures(
        inputs=inputs,
        specs=specs,
        gt_masks=gt,
        targets=targets,
        patches=np.stack(scene.patches).astype(np.float32),
        boxes=list(scene.boxes),
    )


def _batch_rows(feats):
    """Flatten scene features into aligned per-(scene, object, channel) rows."""
    inputs, gt, targets, specs = [], [], [], []
    patches, boxes, obj_index = [], [], []
    obj_base = 0
    for sf in feats:
        n_obj, n_ch = sf.gt_masks.shape[:2]
        for j in range(n_obj):
            patches.append(sf.patches[j])
            boxes.append(sf.boxes[j])
            for c in range(n_ch):
                inputs.append(sf.inputs[c])
                gt.append(sf.gt_masks[j, c])
                targets.append(sf.targets[j, c])
                specs.append(sf.specs[c])
                obj_index.append(obj_base + j)
        obj_base += n_obj
    return (
        np.stack(inputs),
        np.stack(gt),
        np.stack(targets),
        specs,
        np.stack(patches),
        boxes,
        np.asarray(obj_index),
    )


def train_step(model, store, feats, run_cfg, lr=None):
    """One optimizer step over a batch of scenes; returns loss parts."""
    inputs, gt, targets, specs, patches, boxes, obj_index = _batch_rows(feats)
    n_scenes = len(feats)
    logits = model.forward_masks(inputs, patches, boxes, obj_index=obj_index, training=True)
    if not np.isfinite(logits.values).all():
        raise RuntimeError("non-finite loss: mask logits contain NaN or inf")
    masks = ag.sigmoid(logits)
    diff = masks - DiffTensor(gt)
    freq_l1 = ag.sum_(ag.mean(ag.abs_(diff), axis=(1, 2))) / n_scenes
    freq_l2 = ag.sum_(ag.power(ag.mean(diff * diff, axis=(1, 2)) + 1e-12, 0.5)) / n_scenes
    if run_cfg.beta:
        time_terms = None
        for i, spec in enumerate(specs):
            wav = masked_istft(masks[i], spec, model.cfg.clip_samples)
            term = ag.mean(ag.abs_(wav - DiffTensor(targets[i])))
            time_terms = term if time_terms is None else time_terms + term
        time_l1 = time_terms / n_scenes
    else:
        time_l1 = DiffTensor(np.zeros((), dtype=np.float32))
    total = freq_l1 + run_cfg.alpha * freq_l2 + run_cfg.beta * time_l1
    if not np.isfinite(total.item()):
        raise RuntimeError(
            f"non-finite loss: freq_l1={freq_l1.item()}, freq_l2={freq_l2.item()}, "
            f"time_l1={time_l1.item()}"
        )
    store.zero_grad()
    total.backward()
    adam_step(store, lr=run_cfg.lr if lr is None else lr, weight_decay=run_cfg.weight_decay)
    return freq_l1.item(), time_l1.item(), total.item()


def train(model, scenes, run_cfg, log_path=None, progress=None):
    """Train in place; returns per-epoch records.

    Deterministic given run_cfg.seed: scene order and all parameter updates
    depend only on the seed and the dataset.
    """
    rng = np.random.default_rng(run_cfg.seed)
    feats = [
        prepare_scene(s, model.cfg, use_ipd=model.cfg.in_channels == 2, mono=model.cfg.mono)
        for s in scenes
    ]
    params = dict(model.named_params())
    if not model.cfg.use_position:
        # the position pathway is never evaluated, so it gets no gradients
        params = {
            k: v
            for k, v in params.items()
            if not (k.startswith("pos_proj.") or k.startswith("vp."))
        }
    store = ParamStore(params)
    records = []
    # linear learning-rate warmup over the first epoch's steps
    warmup_steps = -(-len(feats) // max(run_cfg.batch, 1))
    global_step = 0
    for epoch in range(run_cfg.epochs):
        order = rng.permutation(len(feats))
        sums = np.zeros(3)
        n_steps = 0
        for start in range(0, len(order), run_cfg.batch):
            batch = [feats[i] for i in order[start : start + run_cfg.batch]]
            lr = run_cfg.lr * min(1.0, (global_step + 1) / max(warmup_steps, 1))
            parts = train_step(model, store, batch, run_cfg, lr=lr)
            global_step += 1
            sums += parts
            n_steps += 1
        lf, lt, ltot = (sums / max(n_steps, 1)).tolist()
        records.append({"epoch": epoch, "loss_freq": lf, "loss_time": lt, "loss_total": ltot})
        if progress:
            progress(records[-1])
    if log_path:
        with open(log_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "loss_freq", "loss_time", "loss_total"])
            writer.writeheader()
            writer.writerows(records)
    return records


# -- evaluation -----------------------------------------------------------------


def _scene_estimates(model, scene, mode):
    """Per-object stereo estimates: model inference, oracle masks, or the
    mixture-as-estimate baseline."""
    cfg = model.cfg
    mixture = scene.mixture()
    clip = cfg.clip_samples
    if mode == "baseline":
        return [
            np.stack([mixture.left.samples[:clip], mixture.right.samples[:clip]])
            for _ in scene.stems
        ]
    if mode == "oracle":
        sl = _crop_spec(stft(mixture.left, cfg.frame_len, cfg.hop_len), cfg.t_frames)
        sr = _crop_spec(stft(mixture.right, cfg.frame_len, cfg.hop_len), cfg.t_frames)
        mix_mags = [log_grid_magnitude(sl, cfg.f_bins), log_grid_magnitude(sr, cfg.f_bins)]
        out = []
        for clipd in scene.binaural:
            chans = []
            for c, (spec, ch_wave) in enumerate(
                [(sl, clipd.left), (sr, clipd.right)]
            ):
                stem_spec = _crop_spec(stft(ch_wave, cfg.frame_len, cfg.hop_len), cfg.t_frames)
                gt = ground_truth_mask(log_grid_magnitude(stem_spec, cfg.f_bins), mix_mags[c])
                chans.append(apply_mask_and_reconstruct(gt, spec, clip).samples)
            out.append(np.stack(chans))
        return out
    estimates = separate(model, mixture, list(zip(scene.patches, scene.boxes)))
    return [np.stack([e.left.samples[:clip], e.right.samples[:clip]]) for e in estimates]


def evaluate(model, scenes, filter_len=1, mode="model"):
    """Score every (scene, source, channel) triple; returns row dicts."""

    def one(scene):
        cfg = model.cfg
        clip = cfg.clip_samples
        ests = _scene_estimates(model, scene, mode)
        refs = [
            np.stack([c.left.samples[:clip], c.right.samples[:clip]]) for c in scene.binaural
        ]
        rows = []
        for c, channel in enumerate(("left", "right")):
            score = bss_eval(
                [e[c] for e in ests], [r[c] for r in refs], filter_len=filter_len
            )
            for j in range(len(ests)):
                rows.append(
                    {
                        "scene_id": scene.scene_id,
                        "source_id": j,
                        "channel": channel,
                        "sdr_db": score.sdr_db[j],
                        "sir_db": score.sir_db[j],
                    }
                )
        return rows

    workers = int(os.environ.get("BINSEP_THREADS", "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, scenes))
    else:
        results = [one(s) for s in scenes]
    return [row for rows in results for row in rows]


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["scene_id", "source_id", "channel", "sdr_db", "sir_db"]
        )
        writer.writeheader()
        writer.writerows(rows)


def summarize(rows):
    """Mean SDR/SIR per channel and overall."""
    out = {}
    for channel in ("left", "right"):
        sel = [r for r in rows if r["channel"] == channel]
        if sel:
            out[channel] = {
                "sdr_db": float(np.mean([r["sdr_db"] for r in sel])),
                "sir_db": float(np.mean([r["sir_db"] for r in sel])),
            }
    out["average"] = {
        "sdr_db": float(np.mean([r["sdr_db"] for r in rows])),
        "sir_db": float(np.mean([r["sir_db"] for r in rows])),
    }
    return out
