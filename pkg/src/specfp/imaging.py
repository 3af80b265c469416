"""Spectrogram-to-image stage.

Per-device percentile normalization (bounds fitted on the training split
only), bilinear resize to a square 3-channel image, per-channel train-set
standardization, and seeded training-time augmentation. Leakage rule: every
fitting function in this module must only ever see training-split data; the
pipeline enforces it and a dedicated test mutates val/test data to prove the
fitted statistics cannot depend on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .colormap import COLORMAPS, apply_colormap
from .errors import ParseError, ValidationError
from .spectral import Spectrogram

PCT_LOW = 5.0
PCT_HIGH = 95.0
DEGENERATE_SPAN = 1e-12
# device_id used by bounds fitted over the whole corpus (honest-inference
# mode); matches any spectrogram in normalize_spectrogram.
GLOBAL_BOUNDS_ID = -1


@dataclass(frozen=True)
class PercentileBounds:
    device_id: int
    v_min: float
    v_max: float
    fitted_on: int

    def __post_init__(self):
        if self.v_min > self.v_max:
            raise ValidationError(f"v_min {self.v_min} > v_max {self.v_max}")


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    fitted_on: int

    def __post_init__(self):
        # a std at rounding-noise level (constant channel) would explode the
        # standardized values, so treat it the same as exactly zero
        if min(self.std) < DEGENERATE_SPAN:
            raise ValidationError(f"degenerate channel std {self.std}")


@dataclass(frozen=True, eq=False)
class SpectroImage:
    pixels: np.ndarray  # H x W x 3, values in [0, 1]
    source: tuple[int, int] | None = None  # (device_id, segment_index)

    @property
    def device_id(self) -> int | None:
        return None if self.source is None else self.source[0]


def fit_percentile_bounds(train_specs: Sequence[Spectrogram]) -> PercentileBounds:
    """5th/95th percentiles (linear interpolation) of one device's pooled
    training spectrogram entries."""
    if len(train_specs) == 0:
        raise ValidationError("no training spectrograms to fit bounds on")
    devices = {s.device_id for s in train_specs}
    if len(devices) != 1:
        raise ValidationError(f"mixed devices in bounds fit: {sorted(devices)}")
    pooled = np.concatenate([s.power_db.ravel() for s in train_specs])
    v_min, v_max = np.percentile(pooled, [PCT_LOW, PCT_HIGH], method="linear")
    return PercentileBounds(
        device_id=devices.pop(),
        v_min=float(v_min),
        v_max=float(v_max),
        fitted_on=len(train_specs),
    )


def fit_global_bounds(train_specs: Sequence[Spectrogram]) -> PercentileBounds:
    """Corpus-wide bounds, for inference that must not presume the label."""
    if len(train_specs) == 0:
        raise ValidationError("no training spectrograms to fit bounds on")
    pooled = np.concatenate([s.power_db.ravel() for s in train_specs])
    v_min, v_max = np.percentile(pooled, [PCT_LOW, PCT_HIGH], method="linear")
    return PercentileBounds(
        device_id=GLOBAL_BOUNDS_ID,
        v_min=float(v_min),
        v_max=float(v_max),
        fitted_on=len(train_specs),
    )


def normalize_spectrogram(spec: Spectrogram, bounds: PercentileBounds) -> np.ndarray:
    """(S - v_min)/(v_max - v_min) clipped to [0,1]; constant 0.5 when the
    fitted range is degenerate."""
    if bounds.device_id != GLOBAL_BOUNDS_ID and bounds.device_id != spec.device_id:
        raise ValidationError(
            f"bounds fitted for device {bounds.device_id}, "
            f"spectrogram is device {spec.device_id}"
        )
    span = bounds.v_max - bounds.v_min
    if span < DEGENERATE_SPAN:
        return np.full_like(spec.power_db, 0.5)
    return np.clip((spec.power_db - bounds.v_min) / span, 0.0, 1.0)


def bilinear_resize(matrix: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D matrix.

    Output pixel (i, j) samples the input at (i*(h-1)/(out_h-1),
    j*(w-1)/(out_w-1)), so corners map to corners exactly.
    """
    in_h, in_w = matrix.shape
    rows = _corner_grid(in_h, out_h)
    cols = _corner_grid(in_w, out_w)
    r0 = np.minimum(np.floor(rows).astype(int), in_h - 1)
    c0 = np.minimum(np.floor(cols).astype(int), in_w - 1)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = matrix[np.ix_(r0, c0)] * (1 - fc) + matrix[np.ix_(r0, c1)] * fc
    bot = matrix[np.ix_(r1, c0)] * (1 - fc) + matrix[np.ix_(r1, c1)] * fc
    return top * (1 - fr[:, 0])[:, None] + bot * fr[:, 0][:, None]


def _corner_grid(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.zeros(1)
    if n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def render_image(
    norm: np.ndarray,
    image_size: int = 224,
    colormap: str = "grayscale3",
    source: tuple[int, int] | None = None,
) -> SpectroImage:
    """Resize a normalized matrix to image_size^2 and map to 3 channels."""
    if colormap not in COLORMAPS:
        raise ValidationError(f"unknown colormap {colormap!r}")
    if image_size < 1:
        raise ValidationError(f"image_size {image_size} < 1")
    norm = np.asarray(norm, dtype=np.float64)
    if norm.ndim != 2:
        raise ValidationError(f"expected 2-D matrix, got shape {norm.shape}")
    if norm.min() < 0.0 or norm.max() > 1.0:
        raise ValidationError("normalized entries outside [0, 1]")
    resized = bilinear_resize(norm, image_size, image_size)
    # resize is a convex combination so [0,1] is preserved up to rounding
    resized = np.clip(resized, 0.0, 1.0)
    return SpectroImage(pixels=apply_colormap(resized, colormap), source=source)


def fit_channel_stats(train_images: Sequence[SpectroImage]) -> ChannelStats:
    """Per-channel mean/std pooled over every pixel of the training images."""
    if len(train_images) == 0:
        raise ValidationError("no training images to fit channel stats on")
    stacked = np.stack([img.pixels for img in train_images])
    mean = stacked.mean(axis=(0, 1, 2))
    std = stacked.std(axis=(0, 1, 2))
    if np.min(std) < DEGENERATE_SPAN:
        raise ValidationError(f"degenerate channel: std {tuple(std)}")
    return ChannelStats(
        mean=tuple(float(v) for v in mean),
        std=tuple(float(v) for v in std),
        fitted_on=len(train_images),
    )


def standardize_image(img: SpectroImage, stats: ChannelStats) -> np.ndarray:
    return standardize_pixels(img.pixels, stats)


def standardize_pixels(pixels: np.ndarray, stats: ChannelStats) -> np.ndarray:
    mean = np.asarray(stats.mean)
    std = np.asarray(stats.std)
    return (pixels - mean) / std


@dataclass(frozen=True)
class AugmentConfig:
    """Training-time augmentation knobs.

    Defaults: horizontal flip p=0.5, vertical flip p=0.3, rotation within
    +-5 degrees, translation within +-10% of the side, scale 0.9-1.1,
    brightness/contrast factors within +-0.2, and a 3x3 Gaussian blur with
    sigma uniform in [0.1, 0.5]. blur_prob is a testability knob (1.0 keeps
    the blur unconditional); set probabilities to 0, jitter to 0 and the
    affine ranges to identity for a no-op config.
    """

    hflip_prob: float = 0.5
    vflip_prob: float = 0.3
    rotate_deg: float = 5.0
    translate_frac: float = 0.1
    scale_min: float = 0.9
    scale_max: float = 1.1
    jitter: float = 0.2
    blur_prob: float = 1.0
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 0.5


def augment(img: SpectroImage, cfg: AugmentConfig, seed: int) -> SpectroImage:
    """Seeded augmentation; identical (img, cfg, seed) gives identical output.

    Draw order is fixed (flips, affine, jitter, blur) and every value is
    drawn whether or not its stage applies, so toggling one stage never
    shifts the random stream of the others. Output clipped to [0, 1].
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    u_hflip = rng.random()
    u_vflip = rng.random()
    theta = math.radians(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
    tx = rng.uniform(-cfg.translate_frac, cfg.translate_frac)
    ty = rng.uniform(-cfg.translate_frac, cfg.translate_frac)
    scale = rng.uniform(cfg.scale_min, cfg.scale_max)
    brightness = 1.0 + cfg.jitter * rng.uniform(-1.0, 1.0)
    contrast = 1.0 + cfg.jitter * rng.uniform(-1.0, 1.0)
    u_blur = rng.random()
    sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max)

    x = img.pixels
    if u_hflip < cfg.hflip_prob:
        x = x[:, ::-1, :]
    if u_vflip < cfg.vflip_prob:
        x = x[::-1, :, :]
    x = _affine(x, theta, tx, ty, scale)
    x = x * brightness
    grand_mean = x.mean()
    x = (x - grand_mean) * contrast + grand_mean
    if u_blur < cfg.blur_prob:
        x = _gaussian_blur3(x, sigma)
    return SpectroImage(pixels=np.clip(x, 0.0, 1.0), source=img.source)


def _affine(x: np.ndarray, theta: float, tx: float, ty: float, scale: float) -> np.ndarray:
    """Rotate, translate, then scale, all about the image center.

    Inverse-mapped bilinear sampling with zero fill outside the frame. The
    identity transform (theta=0, tx=ty=0, scale=1) reproduces the input
    exactly because the center offsets cancel without rounding.
    """
    if theta == 0.0 and tx == 0.0 and ty == 0.0 and scale == 1.0:
        return x
    h, w, _ = x.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    out_r, out_c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse map: undo scale, undo translation, undo rotation
    px = (out_c - cx) / scale - tx * w
    py = (out_r - cy) / scale - ty * h
    cos_t = math.cos(-theta)
    sin_t = math.sin(-theta)
    src_x = cos_t * px - sin_t * py + cx
    src_y = sin_t * px + cos_t * py + cy
    return _sample_bilinear(x, src_y, src_x)


def _sample_bilinear(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    out = np.zeros(rows.shape + (c,))
    for dr, dc, weight in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        vals = np.zeros(rows.shape + (c,))
        vals[valid] = x[rr[valid], cc[valid]]
        out += weight * vals
    return out


def _gaussian_blur3(x: np.ndarray, sigma: float) -> np.ndarray:
    side = math.exp(-0.5 / (sigma * sigma))
    kernel = np.array([side, 1.0, side])
    kernel /= kernel.sum()
    padded = np.pad(x, ((1, 1), (0, 0), (0, 0)), mode="edge")
    x = padded[:-2] * kernel[0] + padded[1:-1] * kernel[1] + padded[2:] * kernel[2]
    padded = np.pad(x, ((0, 0), (1, 1), (0, 0)), mode="edge")
    return padded[:, :-2] * kernel[0] + padded[:, 1:-1] * kernel[1] + padded[:, 2:] * kernel[2]


def save_png(img: SpectroImage, path) -> None:
    """8-bit RGB PNG, value = round(255 * pixel), half up."""
    data = np.floor(img.pixels * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_png(path) -> SpectroImage:
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64)
    return SpectroImage(pixels=data / 255.0)


def write_stats_sidecar(
    stream: IO[str],
    bounds: Mapping[int, PercentileBounds],
    stats: ChannelStats | None,
) -> None:
    """key=value sidecar; floats via repr so reload is bit-identical."""
    for dev in sorted(bounds):
        b = bounds[dev]
        stream.write(f"bounds.{dev}.v_min={b.v_min!r}\n")
        stream.write(f"bounds.{dev}.v_max={b.v_max!r}\n")
        stream.write(f"bounds.{dev}.fitted_on={b.fitted_on}\n")
    if stats is not None:
        stream.write("channel.mean=" + ",".join(repr(v) for v in stats.mean) + "\n")
        stream.write("channel.std=" + ",".join(repr(v) for v in stats.std) + "\n")
        stream.write(f"channel.fitted_on={stats.fitted_on}\n")


def read_stats_sidecar(
    stream: Iterable[str],
) -> tuple[dict[int, PercentileBounds], ChannelStats | None]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", line=lineno)
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()

    fields: dict[int, dict[str, str]] = {}
    for key, value in raw.items():
        if key.startswith("bounds."):
            _, dev_s, name = key.split(".", 2)
            fields.setdefault(int(dev_s), {})[name] = value
    bounds = {}
    for dev, vals in fields.items():
        bounds[dev] = PercentileBounds(
            device_id=dev,
            v_min=float(vals["v_min"]),
            v_max=float(vals["v_max"]),
            fitted_on=int(vals["fitted_on"]),
        )
    stats = None
    if "channel.mean" in raw:
        mean = tuple(float(v) for v in raw["channel.mean"].split(","))
        std = tuple(float(v) for v in raw["channel.std"].split(","))
        stats = ChannelStats(mean=mean, std=std, fitted_on=int(raw["channel.fitted_on"]))
    return bounds, stats


def save_stats_sidecar(path, bounds, stats) -> None:
    with open(path, "w") as fh:
        write_stats_sidecar(fh, bounds, stats)


def load_stats_sidecar(path):
    with open(path) as fh:
        return read_stats_sidecar(fh)
