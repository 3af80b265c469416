"""End-to-end experiment pipeline.

Wires the stage modules together: packet traces are segmented, centered,
transformed, normalized with train-fit statistics, rendered, and fed to the
transformer. A TrainedPipeline carries everything needed to classify raw
traces later (including OOD trace suffixes under a different segmentation),
and run directories persist enough state to rebuild one bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import os
import csv
from dataclasses import dataclass
from typing import IO, Mapping, Sequence

import numpy as np

from .config import (
    RunConfig,
    derive_seed,
    load_sections,
    run_config_from_sections,
    run_config_to_sections,
    write_sections,
)
from .errors import ParseError, ValidationError
from .evaluation import EvalReport, evaluate
from .imaging import (
    GLOBAL_BOUNDS_ID,
    AugmentConfig,
    ChannelStats,
    PercentileBounds,
    SpectroImage,
    fit_channel_stats,
    fit_global_bounds,
    fit_percentile_bounds,
    load_stats_sidecar,
    normalize_spectrogram,
    render_image,
    save_stats_sidecar,
    standardize_pixels,
)
from .segmentation import SegmentationParams, mean_center, segment_trace
from .spectral import (
    CwtParams,
    Spectrogram,
    StftParams,
    cwt_spectrogram,
    stft_spectrogram,
)
from .traces import PacketTrace, load_traces
from .training import (
    ClassificationData,
    SplitIndices,
    SplitSpec,
    TrainConfig,
    TrainHistory,
    split_dataset,
    train,
    write_history_csv,
)
from .vit import VitConfig, VitModel, forward_batch, init_model, load_checkpoint, save_checkpoint

CONFIG_NAME = "config.txt"
HISTORY_NAME = "history.csv"
CHECKPOINT_NAME = "best.ckpt"
SPLIT_NAME = "split.csv"
STATS_NAME = "stats.txt"

_EVAL_BATCH = 256


def spectral_params_for(cfg: RunConfig) -> StftParams | CwtParams:
    if cfg.method == "STFT":
        return StftParams(resolution=cfg.resolution, frame_stride_frac=cfg.f_stride)
    return CwtParams(resolution=cfg.resolution)


def seg_params_for(cfg: RunConfig) -> SegmentationParams:
    return SegmentationParams(seg_len=cfg.seg_len, overlap=cfg.overlap)


def fit_region(trace: PacketTrace, packets: int | None) -> PacketTrace:
    """Leading slice of a trace used for fitting; the rest stays OOD."""
    if packets is None:
        return trace
    if trace.count < packets:
        raise ValidationError(
            f"device {trace.device_id} has {trace.count} packets, "
            f"fit region needs {packets}"
        )
    return PacketTrace(
        device_id=trace.device_id,
        device_name=trace.device_name,
        lengths=trace.lengths[:packets],
    )


def trace_spectrograms(
    trace: PacketTrace,
    seg_params: SegmentationParams,
    spectral: StftParams | CwtParams,
) -> list[Spectrogram]:
    """Segment, mean-center and transform one trace."""
    out = []
    for segment in segment_trace(trace, seg_params):
        centered = mean_center(segment)
        if isinstance(spectral, StftParams):
            out.append(stft_spectrogram(centered, spectral))
        else:
            out.append(cwt_spectrogram(centered, spectral))
    return out


def _stage_key(traces: Sequence[PacketTrace], cfg: RunConfig) -> str:
    """Hash of everything the spectrogram stage depends on."""
    h = hashlib.sha256()
    knobs = {
        "packets": cfg.packets_per_device,
        "seg_len": cfg.seg_len,
        "overlap": cfg.overlap,
        "method": cfg.method,
        "resolution": cfg.resolution,
        "f_stride": cfg.f_stride if cfg.method == "STFT" else None,
    }
    h.update(json.dumps(knobs, sort_keys=True).encode())
    for trace in traces:
        h.update(f"|{trace.device_id}:{trace.device_name}:".encode())
        h.update(np.asarray(trace.lengths, dtype=np.int64).tobytes())
    return h.hexdigest()[:32]


def build_spectrograms(
    traces: Sequence[PacketTrace],
    cfg: RunConfig,
    cache_dir=None,
) -> dict[int, list[Spectrogram]]:
    """Per-device spectrogram lists for the fit region, disk-cached by a
    hash of the trace contents and the stage config."""
    spectral = spectral_params_for(cfg)
    seg_params = seg_params_for(cfg)
    cache_path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        cache_path = os.path.join(cache_dir, f"spec_{_stage_key(traces, cfg)}.npz")
        if os.path.exists(cache_path):
            return _load_spectrogram_cache(cache_path)

    specs: dict[int, list[Spectrogram]] = {}
    for trace in traces:
        region = fit_region(trace, cfg.packets_per_device)
        specs[trace.device_id] = trace_spectrograms(region, seg_params, spectral)

    if cache_path is not None:
        _save_spectrogram_cache(cache_path, cfg.method, specs)
    return specs


def _save_spectrogram_cache(path, method: str, specs: Mapping[int, list[Spectrogram]]) -> None:
    arrays: dict[str, np.ndarray] = {}
    for dev, spec_list in specs.items():
        arrays[f"power_{dev}"] = np.stack([s.power_db for s in spec_list])
        arrays[f"time_{dev}"] = spec_list[0].time_axis
        arrays[f"freq_{dev}"] = spec_list[0].freq_axis
    meta = json.dumps({"method": method, "devices": sorted(specs)})
    arrays["__meta__"] = np.frombuffer(meta.encode(), dtype=np.uint8)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def _load_spectrogram_cache(path) -> dict[int, list[Spectrogram]]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        specs: dict[int, list[Spectrogram]] = {}
        for dev in meta["devices"]:
            power = data[f"power_{dev}"]
            time_axis = data[f"time_{dev}"]
            freq_axis = data[f"freq_{dev}"]
            specs[dev] = [
                Spectrogram(
                    method=meta["method"],
                    power_db=power[i],
                    time_axis=time_axis,
                    freq_axis=freq_axis,
                    source=(dev, i),
                )
                for i in range(power.shape[0])
            ]
    return specs


def image_matrix(norm: np.ndarray, method: str) -> np.ndarray:
    """Orient a normalized spectrogram as an image: rows are frequency with
    the highest frequency on top, columns are time. STFT matrices arrive as
    frames x bins and get transposed; CWT rows already follow frequency."""
    m = norm.T if method == "STFT" else norm
    return m[::-1]


def render_spectrogram(
    spec: Spectrogram,
    bounds: PercentileBounds,
    image_size: int,
    colormap: str,
) -> SpectroImage:
    norm = normalize_spectrogram(spec, bounds)
    return render_image(
        image_matrix(norm, spec.method),
        image_size=image_size,
        colormap=colormap,
        source=spec.source,
    )


def fit_bounds(
    specs: Mapping[int, Sequence[Spectrogram]],
    splits: Mapping[int, SplitIndices],
    mode: str,
) -> dict[int, PercentileBounds]:
    """Percentile bounds from training-split spectrograms only."""
    if mode == "per-device":
        return {
            dev: fit_percentile_bounds([specs[dev][i] for i in splits[dev].train])
            for dev in sorted(specs)
        }
    pooled = [specs[dev][i] for dev in sorted(specs) for i in splits[dev].train]
    return {GLOBAL_BOUNDS_ID: fit_global_bounds(pooled)}


def _bounds_for(bounds: Mapping[int, PercentileBounds], mode: str, device_id: int):
    if mode == "global":
        return bounds[GLOBAL_BOUNDS_ID]
    if device_id not in bounds:
        raise ValidationError(f"no fitted bounds for device {device_id}")
    return bounds[device_id]


@dataclass(eq=False)
class DatasetBundle:
    """Everything assemble_dataset fits and renders, pre-split."""

    data: ClassificationData
    test_pixels: np.ndarray
    test_labels: np.ndarray
    splits: dict[int, SplitIndices]
    bounds: dict[int, PercentileBounds]
    stats: ChannelStats


def assemble_dataset(
    specs: Mapping[int, Sequence[Spectrogram]],
    cfg: RunConfig,
    augment_cfg: AugmentConfig | None = None,
) -> DatasetBundle:
    """Split per device, fit bounds and channel stats on train only, render
    every split with the train-fit statistics."""
    counts = {dev: len(spec_list) for dev, spec_list in specs.items()}
    split_spec = SplitSpec(
        train_frac=cfg.train_frac,
        val_frac=cfg.val_frac,
        test_frac=cfg.test_frac,
        seed=derive_seed(cfg.seed, "split"),
    )
    splits = split_dataset(counts, split_spec)
    bounds = fit_bounds(specs, splits, cfg.bounds_mode)

    def render_split(pick) -> tuple[list[SpectroImage], np.ndarray]:
        images = []
        labels = []
        for dev in sorted(specs):
            dev_bounds = _bounds_for(bounds, cfg.bounds_mode, dev)
            for i in pick(splits[dev]):
                images.append(render_spectrogram(
                    specs[dev][i], dev_bounds, cfg.image_size, cfg.colormap))
                labels.append(dev)
        return images, np.asarray(labels, dtype=int)

    train_images, train_labels = render_split(lambda s: s.train)
    val_images, val_labels = render_split(lambda s: s.val)
    test_images, test_labels = render_split(lambda s: s.test)
    stats = fit_channel_stats(train_images)

    data = ClassificationData(
        train_pixels=np.stack([img.pixels for img in train_images]),
        train_labels=train_labels,
        val_pixels=np.stack([img.pixels for img in val_images]),
        val_labels=val_labels,
        stats=stats,
        augment_cfg=augment_cfg,
    )
    return DatasetBundle(
        data=data,
        test_pixels=np.stack([img.pixels for img in test_images]),
        test_labels=test_labels,
        splits=splits,
        bounds=bounds,
        stats=stats,
    )


@dataclass(eq=False)
class TrainedPipeline:
    """A trained model plus the fitted statistics needed to take raw traces
    to predictions. Segmentation may differ from training (OOD cells); the
    spectral transform, bounds, stats and colormap never do."""

    model: VitModel
    method: str
    spectral: StftParams | CwtParams
    seg_params: SegmentationParams
    bounds: dict[int, PercentileBounds]
    bounds_mode: str
    stats: ChannelStats
    image_size: int
    colormap: str
    main_region_end: dict[int, int]
    device_names: dict[int, str]

    def render_trace(
        self, trace: PacketTrace, seg_params: SegmentationParams | None = None
    ) -> np.ndarray:
        """Rendered [0,1] pixels for every segment of a trace."""
        params = self.seg_params if seg_params is None else seg_params
        dev_bounds = _bounds_for(self.bounds, self.bounds_mode, trace.device_id)
        images = [
            render_spectrogram(spec, dev_bounds, self.image_size, self.colormap)
            for spec in trace_spectrograms(trace, params, self.spectral)
        ]
        if not images:
            raise ValidationError(
                f"device {trace.device_id}: no segments to classify"
            )
        return np.stack([img.pixels for img in images])

    def classify_pixels(self, pixels: np.ndarray) -> np.ndarray:
        batch = standardize_pixels(pixels, self.stats)
        preds = []
        for start in range(0, batch.shape[0], _EVAL_BATCH):
            logits = forward_batch(batch[start : start + _EVAL_BATCH], self.model)
            preds.append(np.argmax(logits, axis=1))
        return np.concatenate(preds)

    def classify_trace(
        self, trace: PacketTrace, seg_params: SegmentationParams | None = None
    ) -> np.ndarray:
        return self.classify_pixels(self.render_trace(trace, seg_params))


@dataclass(eq=False)
class ExperimentResult:
    config: RunConfig
    pipeline: TrainedPipeline
    history: TrainHistory
    report: EvalReport
    splits: dict[int, SplitIndices]


def _check_corpus(traces: Sequence[PacketTrace]) -> list[PacketTrace]:
    ordered = sorted(traces, key=lambda t: t.device_id)
    ids = [t.device_id for t in ordered]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate device ids in corpus")
    if ids != list(range(len(ids))):
        raise ValidationError(f"device ids {ids} are not 0..{len(ids) - 1}")
    return ordered


def run_experiment(
    traces: Sequence[PacketTrace],
    cfg: RunConfig,
    cache_dir=None,
) -> ExperimentResult:
    """Full experiment: spectrograms, split/fit/render, train, test report."""
    ordered = _check_corpus(traces)
    specs = build_spectrograms(ordered, cfg, cache_dir)
    augment_cfg = AugmentConfig() if cfg.augment else None
    bundle = assemble_dataset(specs, cfg, augment_cfg)

    vit_cfg = VitConfig(
        embed_dim=cfg.embed_dim,
        num_layers=cfg.num_layers,
        num_heads=cfg.num_heads,
        num_classes=len(ordered),
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        mlp_dim=cfg.mlp_dim,
    )
    model = init_model(vit_cfg, seed=derive_seed(cfg.seed, "init"))
    train_cfg = TrainConfig(
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
        patience=cfg.patience,
        peak_lr=cfg.peak_lr,
        weight_decay=cfg.weight_decay,
        clip_norm=cfg.clip_norm,
        label_smoothing=cfg.label_smoothing,
        seed=derive_seed(cfg.seed, "train"),
    )
    model, history = train(model, bundle.data, train_cfg)

    pipeline = TrainedPipeline(
        model=model,
        method=cfg.method,
        spectral=spectral_params_for(cfg),
        seg_params=seg_params_for(cfg),
        bounds=bundle.bounds,
        bounds_mode=cfg.bounds_mode,
        stats=bundle.stats,
        image_size=cfg.image_size,
        colormap=cfg.colormap,
        main_region_end={
            t.device_id: min(t.count, cfg.packets_per_device or t.count)
            for t in ordered
        },
        device_names={t.device_id: t.device_name for t in ordered},
    )
    preds = pipeline.classify_pixels(bundle.test_pixels)
    report = evaluate(
        preds,
        bundle.test_labels,
        num_classes=len(ordered),
        resamples=cfg.resamples,
        level=cfg.ci_level,
        seed=derive_seed(cfg.seed, "bootstrap"),
    )
    return ExperimentResult(
        config=cfg,
        pipeline=pipeline,
        history=history,
        report=report,
        splits=bundle.splits,
    )


def write_split_csv(splits: Mapping[int, SplitIndices], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(("device_id", "image_index", "split"))
    for dev in sorted(splits):
        parts = splits[dev]
        for name in ("train", "val", "test"):
            for i in getattr(parts, name):
                writer.writerow((dev, i, name))


def save_run_dir(run_dir, result: ExperimentResult) -> None:
    """Self-describing run directory: resolved config, history, checkpoint,
    split manifest and the fitted normalization statistics."""
    os.makedirs(run_dir, exist_ok=True)
    cfg = result.config
    with open(os.path.join(run_dir, CONFIG_NAME), "w") as fh:
        write_sections(run_config_to_sections(cfg), fh)
    with open(os.path.join(run_dir, HISTORY_NAME), "w") as fh:
        write_history_csv(result.history, fh)
    save_checkpoint(result.pipeline.model, os.path.join(run_dir, CHECKPOINT_NAME))
    with open(os.path.join(run_dir, SPLIT_NAME), "w") as fh:
        write_split_csv(result.splits, fh)
    save_stats_sidecar(
        os.path.join(run_dir, STATS_NAME), result.pipeline.bounds, result.pipeline.stats
    )


def load_run_dir(run_dir) -> tuple[RunConfig, list[PacketTrace], TrainedPipeline]:
    """Rebuild a TrainedPipeline from a run directory. The checkpoint and
    the stats sidecar are reloaded bit-identically; nothing is refit."""
    config_path = os.path.join(run_dir, CONFIG_NAME)
    if not os.path.exists(config_path):
        raise ValidationError(f"{run_dir} is not a run directory (no {CONFIG_NAME})")
    cfg = run_config_from_sections(load_sections(config_path))
    if not cfg.traces_path:
        raise ParseError(f"{config_path} does not record a traces path")
    traces = _check_corpus(load_traces(cfg.traces_path))
    model = load_checkpoint(os.path.join(run_dir, CHECKPOINT_NAME))
    bounds, stats = load_stats_sidecar(os.path.join(run_dir, STATS_NAME))
    if stats is None:
        raise ParseError(f"{run_dir}/{STATS_NAME} has no channel stats")
    mode = "global" if set(bounds) == {GLOBAL_BOUNDS_ID} else "per-device"
    if mode != cfg.bounds_mode:
        raise ValidationError(
            f"stats sidecar bounds are {mode} but config says {cfg.bounds_mode}"
        )
    pipeline = TrainedPipeline(
        model=model,
        method=cfg.method,
        spectral=spectral_params_for(cfg),
        seg_params=seg_params_for(cfg),
        bounds=bounds,
        bounds_mode=cfg.bounds_mode,
        stats=stats,
        image_size=cfg.image_size,
        colormap=cfg.colormap,
        main_region_end={
            t.device_id: min(t.count, cfg.packets_per_device or t.count)
            for t in traces
        },
        device_names={t.device_id: t.device_name for t in traces},
    )
    return cfg, traces, pipeline


def rebuild_test_set(
    cfg: RunConfig,
    traces: Sequence[PacketTrace],
    pipeline: TrainedPipeline,
    cache_dir=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct the test split deterministically from the recorded config,
    rendering with the pipeline's loaded (not refit) statistics."""
    ordered = _check_corpus(traces)
    specs = build_spectrograms(ordered, cfg, cache_dir)
    counts = {dev: len(spec_list) for dev, spec_list in specs.items()}
    split_spec = SplitSpec(
        train_frac=cfg.train_frac,
        val_frac=cfg.val_frac,
        test_frac=cfg.test_frac,
        seed=derive_seed(cfg.seed, "split"),
    )
    splits = split_dataset(counts, split_spec)
    pixels = []
    labels = []
    for dev in sorted(specs):
        dev_bounds = _bounds_for(pipeline.bounds, pipeline.bounds_mode, dev)
        for i in splits[dev].test:
            img = render_spectrogram(
                specs[dev][i], dev_bounds, cfg.image_size, cfg.colormap)
            pixels.append(img.pixels)
            labels.append(dev)
    return np.stack(pixels), np.asarray(labels, dtype=int)
