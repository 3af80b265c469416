"""STFT and Morlet-CWT spectrograms of centered packet-length segments.

Sequences are index-sampled: the sample rate is 1.0 cycle/packet, so all
frequencies live in (0, 0.5]. Both transforms emit dB power matrices floored
by a 1e-12 epsilon inside the log.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from .errors import ValidationError
from .segmentation import Segment

SAMPLE_RATE = 1.0  # cycles per packet
DB_EPSILON = 1e-12  # floor inside the log; 10*log10(eps) = -120 dB
MORLET_CENTER_FREQ = 0.8125
# Morlet envelope exp(-t^2/2) is < 1.3e-14 beyond |t| = 8: below double
# precision relevance at spectrogram magnitudes.
MORLET_SUPPORT = 8.0


@dataclass(frozen=True)
class StftParams:
    """Window length R is also the FFT size; hop = floor(R * frame_stride_frac)."""

    resolution: int
    frame_stride_frac: float = 0.5
    epsilon: float = DB_EPSILON

    def __post_init__(self):
        if self.resolution < 2 or self.resolution % 2 != 0:
            raise ValidationError(
                f"resolution {self.resolution} must be an even integer >= 2"
            )
        if not 0.0 < self.frame_stride_frac <= 1.0:
            raise ValidationError(
                f"frame_stride_frac {self.frame_stride_frac} outside (0, 1]"
            )
        if self.hop < 1:
            raise ValidationError(
                f"hop floor({self.resolution}*{self.frame_stride_frac}) < 1"
            )
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be > 0")

    @property
    def hop(self) -> int:
        return int(math.floor(self.resolution * self.frame_stride_frac))

    @property
    def num_bins(self) -> int:
        return self.resolution // 2 + 1

    @property
    def freq_axis(self) -> np.ndarray:
        return np.arange(self.num_bins) / self.resolution


def hann_window(resolution: int) -> np.ndarray:
    """w[n] = 0.5 * (1 - cos(2*pi*n / (R-1))), n = 0..R-1."""
    if resolution < 2:
        raise ValidationError(f"window length {resolution} < 2")
    n = np.arange(resolution)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (resolution - 1)))


def _require_centered(segment: Segment) -> np.ndarray:
    if not segment.centered:
        raise ValidationError(
            f"segment {segment.device_id}/{segment.segment_index} not centered"
        )
    return np.asarray(segment.values, dtype=np.float64)


def stft(segment: Segment, params: StftParams) -> np.ndarray:
    """Windowed DFT, frames of length R every hop samples, bins 0..R/2.

    Entry [m, k] = sum_n p[m*hop + n] * w[n] * exp(-2j*pi*k*n/R). The rfft
    fast path computes exactly this sum; a naive DFT oracle pins correctness
    in the tests.
    """
    data = _require_centered(segment)
    resolution = params.resolution
    if data.size < resolution:
        raise ValidationError(
            f"segment shorter than window: {data.size} < {resolution}"
        )
    hop = params.hop
    n_frames = (data.size - resolution) // hop + 1
    starts = np.arange(n_frames) * hop
    frames = data[starts[:, None] + np.arange(resolution)]
    return np.fft.rfft(frames * hann_window(resolution), n=resolution, axis=1)


def morlet(t, center_freq: float = MORLET_CENTER_FREQ) -> np.ndarray:
    """Complex Morlet: pi^(-1/4) * exp(2j*pi*f_c*t) * exp(-t^2/2)."""
    t = np.asarray(t, dtype=np.float64)
    return (
        np.pi ** -0.25
        * np.exp(2j * np.pi * center_freq * t)
        * np.exp(-0.5 * t * t)
    )


def _exact_scale(freq: float, center_freq: float) -> tuple[float, float]:
    """Return (freq', scale) with fl(scale * freq') == center_freq exactly.

    The constant-area invariant scale*freq = f_c must hold in floating point,
    not just approximately. A correctly rounded divide does not guarantee the
    round-trip product, so nudge freq by ulps until it does. Usually one or
    two suffice, but when ulp(f_c/freq) shrinks the quotient by almost
    exactly ulp(freq)/freq the search drifts slowly and can need a few
    thousand steps; even then the shift stays below 1e-11 relative, eight
    orders under the frequency grid spacing.
    """
    cand = freq
    lo = freq
    hi = freq
    for _ in range(65536):
        scale = center_freq / cand
        if scale * cand == center_freq:
            return cand, scale
        hi = np.nextafter(hi, math.inf)
        lo = np.nextafter(lo, -math.inf)
        for cand2 in (hi, lo):
            scale = center_freq / cand2
            if scale * cand2 == center_freq:
                return float(cand2), float(scale)
        cand = freq
    raise ValidationError(f"no exact scale found near frequency {freq}")


@dataclass(frozen=True)
class CwtParams:
    """R log-spaced analysis frequencies from 1/(2R) to Nyquist 0.5.

    scales[i] = f_c / freqs[i]: ascending freqs, descending scales, with
    scales[i] * freqs[i] == f_c exact for every i.
    """

    resolution: int
    center_freq: float = MORLET_CENTER_FREQ
    epsilon: float = DB_EPSILON
    freqs: np.ndarray = field(init=False, repr=False)
    scales: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.resolution < 2:
            raise ValidationError(f"resolution {self.resolution} < 2")
        if not 0.0 < self.center_freq:
            raise ValidationError("center_freq must be > 0")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be > 0")
        r = self.resolution
        f_min = 1.0 / (2.0 * r)
        f_max = 0.5
        freqs = f_min * (f_max / f_min) ** (np.arange(r) / (r - 1))
        freqs[0] = f_min
        freqs[-1] = f_max
        scales = np.empty(r)
        for i in range(r):
            f_adj, s = _exact_scale(float(freqs[i]), self.center_freq)
            freqs[i] = f_adj
            scales[i] = s
        if not (np.all(np.diff(freqs) > 0) and np.all(np.diff(scales) < 0)):
            raise ValidationError("frequency grid not strictly monotonic")
        freqs.flags.writeable = False
        scales.flags.writeable = False
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "scales", scales)

    @property
    def f_min(self) -> float:
        return 1.0 / (2.0 * self.resolution)

    @property
    def f_max(self) -> float:
        return 0.5


def cwt(segment: Segment, params: CwtParams) -> np.ndarray:
    """W[j, n] = (1/sqrt(s_j)) * sum_n' p[n'] * conj(psi((n' - n)/s_j)).

    The sum runs over the segment only (zero padding outside); the wavelet is
    truncated to |t| <= 8 where its envelope is below 1.3e-14.
    """
    data = _require_centered(segment)
    length = data.size
    out = np.empty((params.resolution, length), dtype=np.complex128)
    for j, scale in enumerate(params.scales):
        half = int(math.floor(MORLET_SUPPORT * scale))
        offsets = np.arange(-half, half + 1)
        kernel = np.conj(morlet(offsets / scale, params.center_freq))
        kernel /= math.sqrt(scale)
        # W[n] = sum_m p[n+m] * kernel[m+half] = convolve(p, reversed
        # kernel)[half+n]: slice the full convolution at lag half.
        conv = np.convolve(data, kernel[::-1], mode="full")
        out[j] = conv[half : half + length]
    return out


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """dB power matrix with axis metadata.

    STFT: frames x bins, time_axis = frame start packet index, freq_axis =
    k/R. CWT: scales x samples, time_axis = packet index, freq_axis = the
    ascending analysis frequencies.
    """

    method: str  # "STFT" or "CWT"
    power_db: np.ndarray
    time_axis: np.ndarray
    freq_axis: np.ndarray
    source: tuple[int, int]  # (device_id, segment_index)

    @property
    def device_id(self) -> int:
        return self.source[0]


def power_db(
    coeffs: np.ndarray,
    epsilon: float = DB_EPSILON,
    *,
    method: str,
    time_axis: np.ndarray,
    freq_axis: np.ndarray,
    source: tuple[int, int],
) -> Spectrogram:
    """Elementwise 10*log10(|c|^2 + epsilon) with axis metadata attached."""
    if epsilon <= 0:
        raise ValidationError("epsilon must be > 0")
    mag2 = np.abs(coeffs) ** 2
    return Spectrogram(
        method=method,
        power_db=10.0 * np.log10(mag2 + epsilon),
        time_axis=np.asarray(time_axis, dtype=np.float64),
        freq_axis=np.asarray(freq_axis, dtype=np.float64),
        source=source,
    )


def stft_spectrogram(segment: Segment, params: StftParams) -> Spectrogram:
    coeffs = stft(segment, params)
    starts = np.arange(coeffs.shape[0]) * params.hop
    return power_db(
        coeffs,
        params.epsilon,
        method="STFT",
        time_axis=starts.astype(np.float64),
        freq_axis=params.freq_axis,
        source=(segment.device_id, segment.segment_index),
    )


def cwt_spectrogram(segment: Segment, params: CwtParams) -> Spectrogram:
    coeffs = cwt(segment, params)
    return power_db(
        coeffs,
        params.epsilon,
        method="CWT",
        time_axis=np.arange(coeffs.shape[1], dtype=np.float64),
        freq_axis=params.freqs,
        source=(segment.device_id, segment.segment_index),
    )


def write_spectrogram_csv(spec: Spectrogram, stream: IO[str]) -> None:
    """One-line axis header, then the matrix one row per line."""
    freqs = ";".join(repr(v) for v in spec.freq_axis)
    times = ";".join(repr(v) for v in spec.time_axis)
    stream.write(f"# method={spec.method} device={spec.source[0]} "
                 f"segment={spec.source[1]} freqs={freqs} times={times}\n")
    writer = csv.writer(stream, lineterminator="\n")
    for row in spec.power_db:
        writer.writerow([repr(v) for v in row])
