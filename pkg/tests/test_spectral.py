import math

import numpy as np
import pytest

from specfp.errors import ValidationError
from specfp.segmentation import Segment, SegmentationParams, mean_center, segment_trace
from specfp.spectral import (
    DB_EPSILON,
    MORLET_CENTER_FREQ,
    MORLET_SUPPORT,
    CwtParams,
    StftParams,
    cwt,
    cwt_spectrogram,
    hann_window,
    morlet,
    stft,
    stft_spectrogram,
)
from specfp.traces import PacketTrace


def naive_stft(data: np.ndarray, resolution: int, hop: int) -> np.ndarray:
    """Oracle: the windowed DFT written as its defining triple sum."""
    window = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(resolution) / (resolution - 1)))
    n_frames = (data.size - resolution) // hop + 1
    out = np.empty((n_frames, resolution // 2 + 1), dtype=np.complex128)
    n = np.arange(resolution)
    for m in range(n_frames):
        frame = data[m * hop : m * hop + resolution] * window
        for k in range(resolution // 2 + 1):
            out[m, k] = np.sum(frame * np.exp(-2j * np.pi * k * n / resolution))
    return out


def dense_cwt(data: np.ndarray, freqs: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Oracle: untruncated direct convolution via a dense (n, n') kernel
    matrix. The analytic wavelet is evaluated at every lag, so agreement
    also bounds the truncation error of the fast path."""
    n = np.arange(data.size)
    lags = np.subtract.outer(n, n)  # lags[n, n'] = n - n'
    out = np.empty((scales.size, data.size), dtype=np.complex128)
    for j, scale in enumerate(scales):
        t = -lags / scale  # t[n, n'] = (n' - n) / s
        psi = np.pi ** -0.25 * np.exp(2j * np.pi * MORLET_CENTER_FREQ * t) * np.exp(-0.5 * t * t)
        out[j] = (np.conj(psi) @ data) / math.sqrt(scale)
    return out


def _centered(values, device_id=0, index=0):
    seg = Segment(device_id=device_id, segment_index=index, start=0,
                  values=np.asarray(values, dtype=np.float64))
    return mean_center(seg)


def _random_centered(rng, n):
    return _centered(rng.normal(0.0, 50.0, n) + rng.integers(40, 1500))


def test_hann_window_hand_values():
    # R=4: w[n] = 0.5*(1 - cos(2*pi*n/3)) -> [0, 0.75, 0.75, 0]
    w = hann_window(4)
    assert w == pytest.approx([0.0, 0.75, 0.75, 0.0], abs=1e-15)
    # symmetric with zero endpoints for any R
    w16 = hann_window(16)
    assert w16[0] == 0.0 and w16[-1] == pytest.approx(0.0, abs=1e-15)
    assert w16 == pytest.approx(w16[::-1], abs=1e-15)


def test_stft_params_derived_quantities():
    params = StftParams(resolution=16)
    assert params.hop == 8
    assert params.num_bins == 9
    assert np.array_equal(params.freq_axis, np.arange(9) / 16.0)
    assert StftParams(resolution=16, frame_stride_frac=0.25).hop == 4


def test_stft_params_validation():
    with pytest.raises(ValidationError, match="even"):
        StftParams(resolution=15)
    with pytest.raises(ValidationError, match="frame_stride_frac"):
        StftParams(resolution=16, frame_stride_frac=0.0)
    with pytest.raises(ValidationError, match="hop"):
        StftParams(resolution=16, frame_stride_frac=0.05)


def test_stft_requires_centered_segment():
    seg = Segment(device_id=0, segment_index=0, start=0,
                  values=np.arange(32, dtype=np.float64))
    with pytest.raises(ValidationError, match="not centered"):
        stft(seg, StftParams(resolution=16))


def test_stft_rejects_short_segment():
    with pytest.raises(ValidationError, match="shorter than window"):
        stft(_centered(np.ones(8)), StftParams(resolution=16))


def test_stft_matches_naive_dft_oracle():
    rng = np.random.default_rng(11)
    for resolution in (16, 32, 64):
        params = StftParams(resolution=resolution)
        for _ in range(20):
            seg = _random_centered(rng, 100)
            fast = stft(seg, params)
            oracle = naive_stft(seg.values, resolution, params.hop)
            assert fast.shape == oracle.shape
            scale = np.abs(oracle).max()
            assert np.abs(fast - oracle).max() <= 1e-9 * scale


def test_stft_frame_count_and_shape():
    params = StftParams(resolution=16)
    coeffs = stft(_centered(np.random.default_rng(0).normal(size=100)), params)
    assert coeffs.shape == ((100 - 16) // 8 + 1, 9)  # 11 frames, 9 bins


def test_stft_pure_tone_peaks_at_its_bin():
    n = np.arange(100)
    seg = _centered(np.sin(2 * np.pi * 0.25 * n))
    params = StftParams(resolution=16)
    mag = np.abs(stft(seg, params))
    assert np.all(np.argmax(mag, axis=1) == 4)  # 0.25 * 16


def test_morlet_hand_values():
    # psi(0) = pi^(-1/4); |psi(t)| = pi^(-1/4) * exp(-t^2/2)
    assert morlet(0.0) == pytest.approx(np.pi ** -0.25, abs=1e-15)
    assert abs(morlet(1.0)) == pytest.approx(np.pi ** -0.25 * math.exp(-0.5), abs=1e-15)
    # oscillation at the center frequency: arg(psi(t)) = 2*pi*f_c*t
    t = 0.3
    expected = np.pi ** -0.25 * math.exp(-0.5 * t * t) * np.exp(2j * np.pi * MORLET_CENTER_FREQ * t)
    assert morlet(t) == pytest.approx(expected, abs=1e-15)
    # envelope is negligible beyond the truncation support
    assert abs(morlet(MORLET_SUPPORT)) < 1.3e-14


def test_cwt_params_grid():
    params = CwtParams(resolution=16)
    assert params.freqs.shape == (16,)
    assert params.freqs[0] == pytest.approx(1.0 / 32.0, rel=1e-12)
    assert params.freqs[-1] == pytest.approx(0.5, rel=1e-12)
    assert np.all(np.diff(params.freqs) > 0)
    assert np.all(np.diff(params.scales) < 0)
    # log spacing: ratios between consecutive freqs are constant
    ratios = params.freqs[1:] / params.freqs[:-1]
    assert ratios == pytest.approx([ratios[0]] * 15, rel=1e-9)


def test_cwt_scale_law_exact_for_all_resolutions():
    # the fingerprint invariant: scale * freq must equal 0.8125 in floats
    for resolution in (2, 7, 16, 32, 33, 64, 100, 128):
        params = CwtParams(resolution=resolution)
        products = params.scales * params.freqs
        assert np.all(products == MORLET_CENTER_FREQ)
        assert params.scales[-1] == 0.8125 / 0.5  # Nyquist scale 1.625


def test_cwt_grid_is_frozen():
    params = CwtParams(resolution=8)
    with pytest.raises(ValueError):
        params.freqs[0] = 0.1


def test_cwt_matches_dense_convolution_oracle():
    rng = np.random.default_rng(12)
    params = CwtParams(resolution=16)
    for n in (64, 100, 150):
        seg = _random_centered(rng, n)
        fast = cwt(seg, params)
        oracle = dense_cwt(seg.values, params.freqs, params.scales)
        scale = np.abs(oracle).max()
        assert np.abs(fast - oracle).max() <= 1e-9 * scale


def test_cwt_translation_covariance():
    # shifting the input shifts the response (away from the edges)
    rng = np.random.default_rng(13)
    base = rng.normal(0.0, 30.0, 96)
    shifted = np.roll(base, 7)
    params = CwtParams(resolution=8)
    a = cwt(_centered(base), params)
    b = cwt(_centered(shifted), params)
    # compare interior columns clear of both edges by the widest kernel
    margin = int(MORLET_SUPPORT * params.scales[0]) + 7
    inner = slice(margin, 96 - margin)
    assert np.allclose(a[:, inner], b[:, 7:][:, inner], rtol=1e-9, atol=1e-12)


def test_cwt_tone_peaks_at_nearest_scale():
    n = np.arange(200)
    tone_freq = 0.125
    seg = _centered(100 * np.sin(2 * np.pi * tone_freq * n))
    params = CwtParams(resolution=16)
    power = np.abs(cwt(seg, params)) ** 2
    # energy in the middle of the segment peaks at the scale matching the tone
    mid = power[:, 80:120].sum(axis=1)
    expected_row = int(np.argmin(np.abs(params.freqs - tone_freq)))
    assert abs(int(np.argmax(mid)) - expected_row) <= 1


def test_power_db_floor_and_values():
    seg = _centered([1.0, 2.0, 4.0, 3.0] * 8)
    spec = stft_spectrogram(seg, StftParams(resolution=16))
    assert np.all(spec.power_db >= 10.0 * math.log10(DB_EPSILON) - 1e-9)
    coeffs = stft(seg, StftParams(resolution=16))
    expected = 10.0 * np.log10(np.abs(coeffs) ** 2 + DB_EPSILON)
    assert np.allclose(spec.power_db, expected, rtol=0, atol=1e-12)


def test_spectrogram_axes_and_source():
    trace = PacketTrace(device_id=3, device_name="d",
                        lengths=tuple(np.random.default_rng(1).integers(40, 200, 120)))
    seg = mean_center(segment_trace(trace, SegmentationParams(100, 0.5))[0])
    spec = stft_spectrogram(seg, StftParams(resolution=16))
    assert spec.method == "STFT"
    assert spec.source == (3, 0)
    assert spec.device_id == 3
    assert spec.power_db.shape == (11, 9)
    assert np.array_equal(spec.time_axis, np.arange(11) * 8.0)
    assert np.array_equal(spec.freq_axis, np.arange(9) / 16.0)

    cw = cwt_spectrogram(seg, CwtParams(resolution=8))
    assert cw.method == "CWT"
    assert cw.power_db.shape == (8, 100)
    assert np.array_equal(cw.time_axis, np.arange(100, dtype=float))
    assert np.array_equal(cw.freq_axis, CwtParams(resolution=8).freqs)
