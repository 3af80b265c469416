"""Device fingerprinting from packet-length spectrograms.

Packet traces are segmented, mean-centered, turned into STFT or CWT dB
spectrograms, rendered as images, and classified by a small from-scratch
vision transformer trained with exact analytic gradients.
"""

from .config import RunConfig, derive_seed
from .errors import NumericError, ParseError, ValidationError
from .evaluation import (
    EvalReport,
    ExperimentConfig,
    bootstrap_ci,
    cross_config_eval,
    enumerate_configs,
    evaluate,
    weighted_f1,
)
from .imaging import (
    AugmentConfig,
    ChannelStats,
    PercentileBounds,
    SpectroImage,
    augment,
    bilinear_resize,
    fit_channel_stats,
    fit_percentile_bounds,
    normalize_spectrogram,
    render_image,
)
from .pipeline import (
    ExperimentResult,
    TrainedPipeline,
    load_run_dir,
    run_experiment,
    save_run_dir,
)
from .segmentation import Segment, SegmentationParams, mean_center, segment_trace
from .spectral import (
    CwtParams,
    Spectrogram,
    StftParams,
    cwt,
    cwt_spectrogram,
    stft,
    stft_spectrogram,
)
from .synth import SynthProfile, generate_trace
from .traces import PacketTrace, TraceStats, load_traces, parse_traces, save_traces, trace_stats
from .training import SplitSpec, TrainConfig, TrainHistory, lr_at, split_dataset, train
from .vit import VitConfig, VitModel, forward, forward_batch, init_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "ChannelStats",
    "CwtParams",
    "EvalReport",
    "ExperimentConfig",
    "ExperimentResult",
    "NumericError",
    "PacketTrace",
    "ParseError",
    "PercentileBounds",
    "RunConfig",
    "Segment",
    "SegmentationParams",
    "SpectroImage",
    "Spectrogram",
    "SplitSpec",
    "StftParams",
    "SynthProfile",
    "TraceStats",
    "TrainConfig",
    "TrainHistory",
    "TrainedPipeline",
    "ValidationError",
    "VitConfig",
    "VitModel",
    "augment",
    "bilinear_resize",
    "bootstrap_ci",
    "cross_config_eval",
    "cwt",
    "cwt_spectrogram",
    "derive_seed",
    "enumerate_configs",
    "evaluate",
    "fit_channel_stats",
    "fit_percentile_bounds",
    "forward",
    "forward_batch",
    "generate_trace",
    "init_model",
    "load_checkpoint",
    "load_run_dir",
    "load_traces",
    "lr_at",
    "mean_center",
    "normalize_spectrogram",
    "parse_traces",
    "render_image",
    "run_experiment",
    "save_checkpoint",
    "save_run_dir",
    "save_traces",
    "segment_trace",
    "split_dataset",
    "stft",
    "stft_spectrogram",
    "trace_stats",
    "train",
    "weighted_f1",
]
