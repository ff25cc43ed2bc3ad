"""Location-guided binaural audio-visual source separation.

Self-contained numpy implementation: STFT/ISTFT signal path, synthetic
binaural spatialization, a reverse-mode autograd engine with conv /
attention layers, cross-modal fusion, a masking U-Net, procedural scene
generation, and SDR/SIR evaluation.
"""

from .autograd import DiffTensor, finite_diff_check, no_grad
from .config import PRESETS, Preset, RunConfig, make_run_config, parse_config_file
from .datagen import (
    CATEGORIES,
    SceneSample,
    export_manifest,
    import_manifest,
    make_dataset,
    make_scene,
    split_dataset,
    synth_source,
)
from .dsp import ComplexSpectrogram, FeatureMap, Waveform, istft, log_freq_rescale, log_mag, stft
from .metrics import LossBreakdown, SeparationScore, binaural_loss, bss_eval
from .params import ParamStore, adam_step, load_checkpoint, save_checkpoint
from .posenc import BoundingBox, encode_region
from .separator import (
    LAVSSModel,
    ModelConfig,
    apply_mask_and_reconstruct,
    binaural_inputs,
    build_from_state,
    ground_truth_mask,
    model_state,
    separate,
    transfer_from_mono,
)
from .spatial import BinauralClip, IPDMap, compute_ipd, mix, render_binaural, woodworth_itd
from .training import evaluate, prepare_scene, summarize, train
from .wavio import read_wav, resample, write_wav

__version__ = "0.1.0"

__all__ = [
    "BinauralClip",
    "BoundingBox",
    "CATEGORIES",
    "ComplexSpectrogram",
    "DiffTensor",
    "FeatureMap",
    "IPDMap",
    "LAVSSModel",
    "LossBreakdown",
    "ModelConfig",
    "PRESETS",
    "ParamStore",
    "Preset",
    "RunConfig",
    "SceneSample",
    "SeparationScore",
    "Waveform",
    "adam_step",
    "apply_mask_and_reconstruct",
    "binaural_inputs",
    "binaural_loss",
    "bss_eval",
    "build_from_state",
    "compute_ipd",
    "encode_region",
    "evaluate",
    "export_manifest",
    "finite_diff_check",
    "ground_truth_mask",
    "import_manifest",
    "istft",
    "load_checkpoint",
    "log_freq_rescale",
    "log_mag",
    "make_dataset",
    "make_run_config",
    "make_scene",
    "mix",
    "model_state",
    "no_grad",
    "parse_config_file",
    "prepare_scene",
    "read_wav",
    "render_binaural",
    "resample",
    "save_checkpoint",
    "separate",
    "split_dataset",
    "stft",
    "summarize",
    "synth_source",
    "train",
    "transfer_from_mono",
    "woodworth_itd",
    "write_wav",
]
