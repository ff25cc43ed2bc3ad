"""Command-line entry points: data generation, training, evaluation,
separation, and spectrogram rendering.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite loss). BINSEP_THREADS caps evaluation parallelism.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .config import PRESETS, make_run_config, parse_config_file
from .datagen import export_manifest, import_manifest, make_dataset, split_dataset
from .dsp import stft
from .params import load_checkpoint, save_checkpoint
from .separator import (
    LAVSSModel,
    ModelConfig,
    build_from_state,
    model_state,
    separate,
    transfer_from_mono,
)
from .training import evaluate, summarize, train, write_metrics_csv
from .wavio import write_wav

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# -- shared helpers --------------------------------------------------------------


def _load_dataset(data_dir):
    try:
        return import_manifest(data_dir)
    except FileNotFoundError as e:
        raise CliError(EXIT_DATA, str(e)) from e
    except (ValueError, KeyError) as e:
        raise CliError(EXIT_DATA, f"bad dataset at {data_dir}: {e}") from e


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as e:
        raise CliError(EXIT_DATA, str(e)) from e
    except ValueError as e:
        raise CliError(EXIT_CONFIG, str(e)) from e


def _split_scenes(scenes, manifest, split):
    if split == "all" or not manifest.splits:
        return scenes
    picked = [s for s in scenes if manifest.splits.get(s.scene_id) == split]
    if not picked:
        raise CliError(EXIT_DATA, f"no scenes in split {split!r}")
    return picked


def _run_config(args, forced=None):
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        overrides = {
            k: getattr(args, k, None)
            for k in (
                "preset",
                "seed",
                "lr",
                "batch",
                "epochs",
                "alpha",
                "beta",
                "weight_decay",
            )
        }
        if getattr(args, "no_ipd", False):
            overrides["use_ipd"] = "false"
        if getattr(args, "no_position", False):
            overrides["use_position"] = "false"
        if getattr(args, "from_mono", None):
            overrides["from_mono_ckpt"] = args.from_mono
        overrides.update(forced or {})
        return make_run_config(file_values, overrides)
    except FileNotFoundError as e:
        raise CliError(EXIT_CONFIG, str(e)) from e
    except ValueError as e:
        raise CliError(EXIT_CONFIG, str(e)) from e


def _model_config(run_cfg):
    preset = run_cfg.preset_obj
    if run_cfg.mono:
        return ModelConfig.from_preset(preset, in_channels=1, use_position=False, mono=True)
    return ModelConfig.from_preset(
        preset,
        in_channels=2 if run_cfg.use_ipd else 1,
        use_position=run_cfg.use_position,
    )


def _check_rates(scenes, cfg):
    rate = scenes[0].sample_rate
    if rate != cfg.sample_rate:
        raise CliError(
            EXIT_CONFIG,
            f"dataset sample rate {rate} != preset sample rate {cfg.sample_rate}",
        )
    if len(scenes[0].stems[0]) < cfg.clip_samples:
        raise CliError(
            EXIT_CONFIG,
            f"scene clips shorter than the preset window ({cfg.clip_samples} samples)",
        )


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args):
    if args.scenes <= 0:
        raise CliError(EXIT_CONFIG, "--scenes must be a positive integer")
    if args.preset not in PRESETS:
        raise CliError(EXIT_CONFIG, f"unknown preset {args.preset!r}")
    preset = PRESETS[args.preset]
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(EXIT_DATA, f"{out} already exists and is not empty (use --force)")
    scenes = make_dataset(preset, args.scenes, args.seed, same_category=args.same_category)
    splits = split_dataset(scenes, seed=args.seed)
    export_manifest(scenes, out, splits=splits, patch_size=preset.patch_size)
    counts = {}
    for label in splits.values():
        counts[label] = counts.get(label, 0) + 1
    print(f"wrote {len(scenes)} scenes to {out}")
    for label in ("train", "val", "test"):
        print(f"  {label}: {counts.get(label, 0)}")
    return 0


def _cmd_fit(args, forced):
    run_cfg = _run_config(args, forced)
    scenes, manifest = _load_dataset(args.data)
    train_scenes = _split_scenes(scenes, manifest, "train")
    cfg = _model_config(run_cfg)
    _check_rates(train_scenes, cfg)
    if run_cfg.from_mono_ckpt:
        state = _load_ckpt(run_cfg.from_mono_ckpt)
        try:
            model = transfer_from_mono(state, cfg, seed=run_cfg.seed)
        except ValueError as e:
            raise CliError(EXIT_CONFIG, str(e)) from e
    else:
        model = LAVSSModel(cfg, seed=run_cfg.seed)

    def progress(rec):
        print(
            f"epoch {rec['epoch']:3d}  loss {rec['loss_total']:.5f} "
            f"(freq {rec['loss_freq']:.5f}, time {rec['loss_time']:.5f})"
        )

    try:
        train(model, train_scenes, run_cfg, log_path=args.log or None, progress=progress)
    except RuntimeError as e:
        raise CliError(EXIT_NUMERIC, str(e)) from e
    save_checkpoint(args.out, model_state(model))
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_pretrain_mono(args):
    return _cmd_fit(args, {"mono": "true", "use_ipd": "false", "use_position": "false"})


def cmd_train(args):
    return _cmd_fit(args, {"mono": "false"})


def cmd_eval(args):
    if args.oracle and args.baseline:
        raise CliError(EXIT_CONFIG, "--oracle and --baseline are mutually exclusive")
    mode = "oracle" if args.oracle else "baseline" if args.baseline else "model"
    scenes, manifest = _load_dataset(args.data)
    scenes = _split_scenes(scenes, manifest, args.split)
    if mode == "model":
        if not args.ckpt:
            raise CliError(EXIT_CONFIG, "eval requires --ckpt (or --oracle/--baseline)")
        state = _load_ckpt(args.ckpt)
        try:
            model = build_from_state(state)
        except (ValueError, KeyError) as e:
            raise CliError(EXIT_CONFIG, str(e)) from e
    else:
        if args.ckpt:
            model = build_from_state(_load_ckpt(args.ckpt))
        else:
            if args.preset not in PRESETS:
                raise CliError(EXIT_CONFIG, f"unknown preset {args.preset!r}")
            cfg = ModelConfig.from_preset(PRESETS[args.preset])
            model = SimpleNamespace(cfg=cfg)
    _check_rates(scenes, model.cfg)
    rows = evaluate(model, scenes, filter_len=args.filter_len, mode=mode)
    if args.out:
        write_metrics_csv(rows, args.out)
    summary = summarize(rows)
    print(f"{'channel':<10}{'mean SDR (dB)':>15}{'mean SIR (dB)':>15}")
    for channel in ("left", "right", "average"):
        if channel in summary:
            s = summary[channel]
            print(f"{channel:<10}{s['sdr_db']:>15.2f}{s['sir_db']:>15.2f}")
    return 0


def _find_scene(scenes, scene_id):
    if scene_id is None:
        return scenes[0]
    for s in scenes:
        if s.scene_id == scene_id:
            return s
    raise CliError(EXIT_DATA, f"scene {scene_id!r} not found")


def cmd_separate(args):
    scenes, _ = _load_dataset(args.data)
    scene = _find_scene(scenes, args.scene)
    model = build_from_state(_load_ckpt(args.ckpt))
    _check_rates([scene], model.cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mixture = scene.mixture()
    estimates = separate(model, mixture, list(zip(scene.patches, scene.boxes)))
    write_wav(out / f"{scene.scene_id}_mixture.wav", mixture.stereo(), mixture.sample_rate)
    for j, est in enumerate(estimates):
        path = out / f"{scene.scene_id}_est{j}.wav"
        write_wav(path, est.stereo(), est.sample_rate)
        print(f"wrote {path}")
    return 0


def _spec_png(spec, path):
    """8-bit grayscale, fixed dB range [-60, 0], low frequencies at the bottom."""
    from PIL import Image

    mag = np.abs(spec.bins)  # (F, T)
    db = 20.0 * np.log10(np.maximum(mag, 1e-12))
    db = np.clip(db, -60.0, 0.0)
    img = np.round((db + 60.0) / 60.0 * 255.0).astype(np.uint8)
    Image.fromarray(img[::-1], mode="L").save(path)


def cmd_render_spec(args):
    scenes, _ = _load_dataset(args.data)
    scene = _find_scene(scenes, args.scene)
    if args.ckpt:
        model = build_from_state(_load_ckpt(args.ckpt))
        cfg = model.cfg
    else:
        model = None
        if args.preset not in PRESETS:
            raise CliError(EXIT_CONFIG, f"unknown preset {args.preset!r}")
        cfg = ModelConfig.from_preset(PRESETS[args.preset])
    _check_rates([scene], cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mixture = scene.mixture()
    panels = [("mixture_left", mixture.left), ("mixture_right", mixture.right)]
    for j, clip in enumerate(scene.binaural):
        panels += [(f"gt{j}_left", clip.left), (f"gt{j}_right", clip.right)]
    if model is not None:
        estimates = separate(model, mixture, list(zip(scene.patches, scene.boxes)))
        for j, est in enumerate(estimates):
            panels += [(f"est{j}_left", est.left), (f"est{j}_right", est.right)]
    for name, wave in panels:
        spec = stft(wave, cfg.frame_len, cfg.hop_len)
        path = out / f"{scene.scene_id}_{name}.png"
        _spec_png(spec, path)
        print(f"wrote {path}")
    return 0


# -- argument parsing -------------------------------------------------------------


def _add_fit_args(p, ablations):
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", default="", help="per-epoch CSV log path")
    p.add_argument("--config", default="", help="key=value config file")
    p.add_argument("--preset", default=None, choices=sorted(PRESETS))
    p.add_argument("--seed", default=None)
    p.add_argument("--lr", default=None)
    p.add_argument("--batch", default=None)
    p.add_argument("--epochs", default=None)
    p.add_argument("--alpha", default=None)
    p.add_argument("--beta", default=None)
    p.add_argument("--weight-decay", dest="weight_decay", default=None)
    if ablations:
        p.add_argument("--no-ipd", action="store_true", help="drop the IPD input plane")
        p.add_argument("--no-position", action="store_true", help="drop position guidance")
        p.add_argument("--from-mono", default=None, help="mono checkpoint to inflate")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="binsep", description="Location-guided binaural source separation."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.add_argument(
        "--same-category", action="store_true", help="both objects share a sound category"
    )
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-mono", help="train the 1-channel model (no IPD/position)")
    _add_fit_args(p, ablations=False)
    p.set_defaults(func=cmd_pretrain_mono)

    p = sub.add_parser("train", help="train the binaural model")
    _add_fit_args(p, ablations=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default="")
    p.add_argument("--out", default="", help="metrics CSV path")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--filter-len", dest="filter_len", type=int, default=1)
    p.add_argument("--oracle", action="store_true", help="score ideal-binary-mask estimates")
    p.add_argument("--baseline", action="store_true", help="score the mixture as the estimate")
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("separate", help="write per-object stereo estimates for one scene")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", default=None, help="scene id (default: first scene)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("render-spec", help="write grayscale spectrogram PNGs for one scene")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default="")
    p.add_argument("--scene", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_render_spec)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
