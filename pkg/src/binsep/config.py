"""Presets and run configuration.

The paper-scale preset keeps the published hyperparameters; the desk
preset shrinks every axis so the full pipeline trains on a laptop CPU;
tiny exists for gradient checks only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace


@dataclass(frozen=True)
class Preset:
    name: str
    sample_rate: int
    frame_len: int
    hop_len: int
    f_log: int
    t_frames: int
    unet_channels: tuple
    model_dim: int  # common attention dim; equals visual channels
    heads: int
    cma_depth: int
    pos_depth: int  # frequency levels of the coordinate encoding
    pos_hidden: int
    visual_blocks: int
    patch_size: int
    frame_w: int = 1280
    frame_h: int = 720

    @property
    def levels(self):
        return len(self.unet_channels)

    @property
    def f_lin(self):
        return self.frame_len // 2 + 1

    @property
    def clip_samples(self):
        # exactly t_frames STFT frames after center padding
        return (self.t_frames - 1) * self.hop_len

    @property
    def visual_grid(self):
        return self.patch_size >> self.visual_blocks


PRESETS = {
    "paper": Preset(
        name="paper",
        sample_rate=11025,
        frame_len=1022,
        hop_len=256,
        f_log=256,
        t_frames=256,
        unet_channels=(32, 64, 128, 256, 512, 512, 512),
        model_dim=512,
        heads=8,
        cma_depth=2,
        pos_depth=16,
        pos_hidden=256,
        visual_blocks=5,
        patch_size=224,
    ),
    "desk": Preset(
        name="desk",
        sample_rate=8000,
        frame_len=254,
        hop_len=64,
        f_log=64,
        t_frames=64,
        unet_channels=(16, 32, 64, 128, 128),
        model_dim=128,
        heads=8,
        cma_depth=2,
        pos_depth=16,
        pos_hidden=64,
        visual_blocks=4,
        patch_size=64,
    ),
    "tiny": Preset(
        name="tiny",
        sample_rate=8000,
        frame_len=62,
        hop_len=32,
        f_log=16,
        t_frames=16,
        unet_channels=(8, 16, 16),
        model_dim=16,
        heads=2,
        cma_depth=1,
        pos_depth=2,
        pos_hidden=8,
        visual_blocks=3,
        patch_size=16,
    ),
}


@dataclass
class RunConfig:
    """Experiment settings: preset plus training hyperparameters and flags."""

    preset: str = "desk"
    seed: int = 0
    lr: float = 1e-3
    batch: int = 8
    epochs: int = 20
    alpha: float = 0.5
    beta: float = 0.25
    weight_decay: float = 1e-4
    filter_len: int = 1
    use_ipd: bool = True
    use_position: bool = True
    mono: bool = False
    from_mono_ckpt: str = ""

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.mono and (self.use_ipd or self.use_position):
            raise ValueError("mono pretraining forbids use_ipd/use_position")

    @property
    def preset_obj(self):
        return PRESETS[self.preset]


_BOOL_FIELDS = {"use_ipd", "use_position", "mono"}


def parse_config_file(path):
    """Flat key=value config file; '#' starts a comment."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
    return values


def make_run_config(file_values=None, overrides=None):
    """Build a RunConfig from file values plus flag overrides (strings)."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    kwargs = {}
    valid = {f.name: f.type for f in fields(RunConfig)}
    for key, val in merged.items():
        if key not in valid:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(val, str):
            if key in _BOOL_FIELDS:
                val = val.lower() in ("1", "true", "yes", "on")
            elif key in ("preset", "from_mono_ckpt"):
                pass
            elif key in ("seed", "batch", "epochs", "filter_len"):
                val = int(val)
            else:
                val = float(val)
        kwargs[key] = val
    return RunConfig(**kwargs)
