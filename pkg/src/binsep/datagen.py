"""Synthetic scene generation.

Sources are procedural "instruments" (deterministic per category + seed),
spatialized by azimuth; each object also gets a procedural image patch
placed in the frame so that the horizontal box center encodes its azimuth:
azimuth = 90 * (2 * cx / frame_w - 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Waveform
from .posenc import BoundingBox
from .spatial import BinauralClip, mix, render_binaural
from .wavio import read_wav, write_wav

CATEGORIES = (
    "harmonic-low",
    "harmonic-high",
    "pluck",
    "noise-burst",
    "chirp",
    "am-tone",
)

MANIFEST_VERSION = 1
PEAK_LEVEL = 0.8  # headroom before mixing (contract: peak <= 0.9)


def _source_rng(category, seed, stream=0):
    # audio (stream 0) and patch (stream 1) randomness must be decorrelated:
    # with a shared stream the stripe phase and the pitch are the same
    # underlying uniform draw, so the patch texture leaks the instance's
    # audio parameters and appearance alone can separate same-category scenes
    return np.random.default_rng([CATEGORIES.index(category), seed & 0x7FFFFFFF, stream])


def _harmonic(t, f0, n_harm, rng):
    out = np.zeros_like(t)
    for h in range(1, n_harm + 1):
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * f0 * h * t + phase) / h
    return out


def _envelope(n, attack_frac=0.05, release_frac=0.1):
    env = np.ones(n)
    a = max(1, int(n * attack_frac))
    r = max(1, int(n * release_frac))
    env[:a] = np.linspace(0, 1, a)
    env[-r:] *= np.linspace(1, 0, r)
    return env


def synth_source(category, duration_s, seed, sample_rate=8000):
    """Deterministic procedural source; acoustically distinct per category."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    rng = _source_rng(category, seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    if category == "harmonic-low":
        x = _harmonic(t, rng.uniform(80, 160), 6, rng)
    elif category == "harmonic-high":
        x = _harmonic(t, rng.uniform(900, 1600), 3, rng)
    elif category == "pluck":
        f0 = rng.uniform(200, 400)
        period = rng.uniform(0.10, 0.16)
        x = np.zeros(n)
        start = 0.0
        while start < duration_s:
            i0 = int(start * sample_rate)
            seg = t[i0:] - start
            x[i0:] += np.exp(-18.0 * seg) * _harmonic(seg, f0, 4, rng)
            start += period
    elif category == "noise-burst":
        lo = rng.uniform(900, 1600)
        hi = lo + rng.uniform(600, 1200)
        noise = rng.standard_normal(n)
        spec = np.fft.rfft(noise)
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spec[(freqs < lo) | (freqs > hi)] = 0.0
        x = np.fft.irfft(spec, n=n)
        gate_hz = rng.uniform(3, 7)
        x *= (np.sin(2 * np.pi * gate_hz * t + rng.uniform(0, 2 * np.pi)) > 0).astype(float)
    elif category == "chirp":
        f0 = rng.uniform(200, 500)
        f1 = rng.uniform(1500, 3000)
        x = np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / duration_s * t**2))
    else:  # am-tone
        fc = rng.uniform(400, 1200)
        fm = rng.uniform(4, 12)
        x = np.sin(2 * np.pi * fc * t) * (0.55 + 0.45 * np.sin(2 * np.pi * fm * t))

    x *= _envelope(n)
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= PEAK_LEVEL / peak
    return Waveform(x, sample_rate)


# -- image patches ---------------------------------------------------------------

_PALETTE = {
    "harmonic-low": (0.85, 0.25, 0.20),
    "harmonic-high": (0.20, 0.55, 0.90),
    "pluck": (0.30, 0.75, 0.35),
    "noise-burst": (0.65, 0.65, 0.65),
    "chirp": (0.90, 0.75, 0.20),
    "am-tone": (0.60, 0.30, 0.80),
}


def render_patch(category, seed, size=64):
    """Category-keyed striped texture, (3, size, size) in [0, 1]."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    rng = _source_rng(category, seed, stream=1)
    base = np.array(_PALETTE[category]).reshape(3, 1, 1)
    yy, xx = np.mgrid[0:size, 0:size] / size
    idx = CATEGORIES.index(category)
    angle = idx * np.pi / len(CATEGORIES)
    coord = xx * np.cos(angle) + yy * np.sin(angle)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (3 + idx) * coord + rng.uniform(0, 2 * np.pi))
    patch = base * (0.45 + 0.55 * stripes[None])
    patch += rng.normal(0, 0.02, size=patch.shape)
    return np.clip(patch, 0.0, 1.0)


# -- scenes ----------------------------------------------------------------------


def azimuth_to_cx(azimuth_deg, frame_w):
    return frame_w * (azimuth_deg / 90.0 + 1.0) / 2.0


def cx_to_azimuth(cx, frame_w):
    return 90.0 * (2.0 * cx / frame_w - 1.0)


@dataclass
class SceneSample:
    """One mix-and-separate unit: solo stems plus their visual placements."""

    stems: list  # mono Waveforms
    categories: list
    azimuths: list
    binaural: list  # BinauralClips, one per stem
    boxes: list  # BoundingBoxes
    patches: list  # (3, patch, patch) float arrays
    frame_w: int
    frame_h: int
    seed: int
    scene_id: str = ""

    def mixture(self):
        return mix(self.binaural)

    def mono_mixture(self):
        samples = np.sum([s.samples for s in self.stems], axis=0)
        return Waveform(samples, self.stems[0].sample_rate)

    @property
    def sample_rate(self):
        return self.stems[0].sample_rate


def make_scene(
    categories,
    azimuths,
    duration_s,
    seed,
    sample_rate=8000,
    frame_w=1280,
    frame_h=720,
    patch_size=64,
):
    """Render a two-object scene; box positions encode the azimuths."""
    categories = list(categories)
    azimuths = [float(a) for a in azimuths]
    if len(categories) != 2 or len(azimuths) != 2:
        raise ValueError("make_scene expects category and azimuth pairs")
    if any(abs(a) > 90 for a in azimuths):
        raise ValueError("azimuths must lie in [-90, 90]")
    if categories[0] == categories[1] and azimuths[0] == azimuths[1]:
        raise ValueError("indistinguishable scene: same category and same azimuth")
    stems, binaural, boxes, patches = [], [], [], []
    half = patch_size // 2
    cy = frame_h // 2
    for i, (cat, az) in enumerate(zip(categories, azimuths)):
        stem = synth_source(cat, duration_s, seed * 4 + i, sample_rate)
        stems.append(stem)
        binaural.append(render_binaural(stem, az))
        cx = int(round(azimuth_to_cx(az, frame_w)))
        box = BoundingBox(cx - half, cy - half, cx + half, cy + half)
        if box.x1 > frame_w or box.y1 > frame_h or box.x0 < 0:
            raise ValueError(f"azimuth {az} places box outside the frame")
        boxes.append(box)
        patches.append(render_patch(cat, seed * 4 + i, patch_size))
    return SceneSample(
        stems=stems,
        categories=categories,
        azimuths=azimuths,
        binaural=binaural,
        boxes=boxes,
        patches=patches,
        frame_w=frame_w,
        frame_h=frame_h,
        seed=seed,
    )


def sample_scene(rng, preset, same_category=False, seed=None):
    """Draw a random scene under a preset's geometry."""
    if seed is None:
        seed = int(rng.integers(0, 2**31 - 1))
    if same_category:
        cat = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        cats = (cat, cat)
    else:
        i, j = rng.choice(len(CATEGORIES), size=2, replace=False)
        cats = (CATEGORIES[int(i)], CATEGORIES[int(j)])
    # keep the two sources well separated in angle and patches inside the frame
    a0 = float(rng.uniform(-80, 0))
    a1 = float(rng.uniform(10, 80))
    if rng.random() < 0.5:
        a0, a1 = a1, a0
    duration = preset.clip_samples / preset.sample_rate
    return make_scene(
        cats,
        (a0, a1),
        duration,
        seed,
        sample_rate=preset.sample_rate,
        frame_w=preset.frame_w,
        frame_h=preset.frame_h,
        patch_size=preset.patch_size,
    )


def make_dataset(preset, n_scenes, seed, same_category=False):
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n_scenes):
        s = sample_scene(rng, preset, same_category=same_category)
        s.scene_id = f"scene_{i:04d}"
        scenes.append(s)
    return scenes


def split_dataset(scenes, ratios=(0.8, 0.1, 0.1), seed=0):
    """Assign train/val/test split labels; sizes honor ratios within 1."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(scenes))
    n_train = int(round(len(scenes) * ratios[0]))
    n_val = int(round(len(scenes) * ratios[1]))
    labels = {}
    for rank, idx in enumerate(order):
        sid = scenes[idx].scene_id
        if rank < n_train:
            labels[sid] = "train"
        elif rank < n_train + n_val:
            labels[sid] = "val"
        else:
            labels[sid] = "test"
    return labels


@dataclass
class DatasetManifest:
    version: int
    frame_size: tuple
    scenes: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)


def export_manifest(scenes, out_dir, splits=None, patch_size=64):
    """Write stem WAVs and the JSON manifest; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for scene in scenes:
        objects = []
        for j, (cat, az, box, stem) in enumerate(
            zip(scene.categories, scene.azimuths, scene.boxes, scene.stems)
        ):
            rel = f"{scene.scene_id}_obj{j}.wav"
            write_wav(out_dir / rel, stem.samples, stem.sample_rate)
            objects.append(
                {
                    "category": cat,
                    "azimuth_deg": az,
                    "box": [box.x0, box.y0, box.x1, box.y1],
                    "stem_wav": rel,
                }
            )
        records.append(
            {
                "id": scene.scene_id,
                "seed": scene.seed,
                "objects": objects,
                "duration_s": len(scene.stems[0]) / scene.sample_rate,
                "sample_rate": scene.sample_rate,
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "frame_size": [scenes[0].frame_w, scenes[0].frame_h],
        "patch_size": patch_size,
        "scenes": records,
        "splits": splits or {},
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return DatasetManifest(
        version=MANIFEST_VERSION,
        frame_size=(scenes[0].frame_w, scenes[0].frame_h),
        scenes=records,
        splits=splits or {},
    )


def import_manifest(in_dir):
    """Load scenes back; binaural stems and patches are re-derived
    deterministically from the stored categories, azimuths, and seeds."""
    in_dir = Path(in_dir)
    path = in_dir / "manifest.json"
    with open(path) as f:
        raw = json.load(f)
    if raw.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version")
    frame_w, frame_h = raw["frame_size"]
    patch_size = raw.get("patch_size", 64)
    scenes = []
    for rec in raw["scenes"]:
        stems, cats, azs, binaural, boxes, patches = [], [], [], [], [], []
        for j, obj in enumerate(rec["objects"]):
            wav_path = in_dir / obj["stem_wav"]
            if not wav_path.exists():
                raise FileNotFoundError(f"missing stem file {wav_path}")
            samples, rate = read_wav(wav_path)
            expected = int(round(rec["duration_s"] * rate))
            if samples.ndim != 1 or samples.size != expected:
                raise ValueError(
                    f"{wav_path}: stem length {samples.shape} does not match manifest"
                )
            stem = Waveform(samples, rate)
            stems.append(stem)
            cats.append(obj["category"])
            azs.append(obj["azimuth_deg"])
            binaural.append(render_binaural(stem, obj["azimuth_deg"]))
            boxes.append(BoundingBox(*obj["box"]))
            patches.append(render_patch(obj["category"], rec["seed"] * 4 + j, patch_size))
        scene = SceneSample(
            stems=stems,
            categories=cats,
            azimuths=azs,
            binaural=binaural,
            boxes=boxes,
            patches=patches,
            frame_w=frame_w,
            frame_h=frame_h,
            seed=rec["seed"],
            scene_id=rec["id"],
        )
        scenes.append(scene)
    manifest = DatasetManifest(
        version=raw["version"],
        frame_size=(frame_w, frame_h),
        scenes=raw["scenes"],
        splits=raw.get("splits", {}),
    )
    return scenes, manifest
