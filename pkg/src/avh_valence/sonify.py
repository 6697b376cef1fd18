"""Series sonification and the log-mel spectrogram front end.

A 24-point hourly series is normalized, expanded into one second of noisy
audio per point at 44.1 kHz, resampled to 16 kHz, and converted to a log-mel
spectrogram that is cut into 96-frame patches for the audio embedder.
"""

from __future__ import annotations

import numpy as np
from scipy import fft as _fft

SOURCE_RATE_HZ = 44_100
TARGET_RATE_HZ = 16_000
SAMPLES_PER_POINT = SOURCE_RATE_HZ  # one second of audio per series point

NOISE_EPSILON = 0.1
SIGMA2_FLOOR = 1e-6

WINDOW_S = 0.025
HOP_S = 0.010
FFT_LENGTH = 512
N_MEL_BANDS = 64
MEL_LOWER_HZ = 125.0
MEL_UPPER_HZ = 7_500.0
LOG_OFFSET = 0.01

PATCH_FRAMES = 96

_MEL_BREAK_HZ = 700.0
_MEL_HIGH_Q = 1127.0


def normalize_series(series) -> np.ndarray:
    """Zero-mean the series, then min-max scale into [-1, 1].

    A constant series (zero range after centering) maps to all zeros.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D series, got shape {x.shape}")
    x = x - x.mean()
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return -1.0 + 2.0 * (x - lo) / (hi - lo)


def synthesize_waveform(series, rng: np.random.Generator,
                        sample_rate_hz: int = SOURCE_RATE_HZ,
                        epsilon: float = NOISE_EPSILON,
                        sigma2_floor: float = SIGMA2_FLOOR) -> np.ndarray:
    """Normalized series -> concatenated per-point noise segments (float32).

    Point x_i becomes one second (`sample_rate_hz` draws) of
    N(mean=x_i, var=max(epsilon * |x_i|, sigma2_floor)); the variance floor
    keeps the draw well-defined at x_i = 0 (the raw variance formula would
    also go negative for the scaled negative points).
    """
    if epsilon <= 0 or sample_rate_hz <= 0 or sigma2_floor <= 0:
        raise ValueError("epsilon, sample_rate_hz, and sigma2_floor must be positive")
    x = normalize_series(series)
    sigma = np.sqrt(np.maximum(epsilon * np.abs(x), sigma2_floor))
    n = x.shape[0]
    noise = rng.standard_normal(n * sample_rate_hz, dtype=np.float32)
    wave = noise.reshape(n, sample_rate_hz)
    wave *= sigma[:, None].astype(np.float32)
    wave += x[:, None].astype(np.float32)
    return wave.reshape(-1)


def resample_to_16k(waveform, source_rate: int = SOURCE_RATE_HZ) -> np.ndarray:
    """Linear interpolation at 16 kHz target instants.

    Output length is floor(n_src * 16000 / source_rate).
    """
    x = np.asarray(waveform, dtype=np.float64)
    if source_rate < TARGET_RATE_HZ:
        raise ValueError(f"source rate {source_rate} below target {TARGET_RATE_HZ}")
    if source_rate == TARGET_RATE_HZ:
        return x.astype(np.float32)
    n_out = (x.shape[0] * TARGET_RATE_HZ) // source_rate
    # target instant i sits at source index i*source_rate/16000; split it into
    # an integer base and fraction exactly (integer arithmetic, no drift)
    num = np.arange(n_out, dtype=np.int64) * source_rate
    idx = num // TARGET_RATE_HZ
    frac = (num - idx * TARGET_RATE_HZ) / TARGET_RATE_HZ
    left = x[idx]
    out = left + (x[idx + 1] - left) * frac
    return out.astype(np.float32)


def _frame(data: np.ndarray, window_length: int, hop_length: int) -> np.ndarray:
    num_samples = data.shape[0]
    num_frames = 1 + (num_samples - window_length) // hop_length
    shape = (num_frames, window_length)
    strides = (data.strides[0] * hop_length, data.strides[0])
    return np.lib.stride_tricks.as_strided(data, shape=shape, strides=strides)


def periodic_hann(window_length: int) -> np.ndarray:
    """Periodic (DFT-even) Hann window: 0.5 - 0.5 cos(2 pi n / N)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi / window_length * np.arange(window_length))


def stft_magnitude(signal: np.ndarray, fft_length: int, hop_length: int,
                   window_length: int) -> np.ndarray:
    """Magnitudes of the short-time Fourier transform with a periodic Hann window."""
    signal = np.asarray(signal, dtype=np.float32)
    frames = _frame(signal, window_length, hop_length)
    windowed = frames * periodic_hann(window_length).astype(np.float32)
    return np.abs(_fft.rfft(windowed, int(fft_length), axis=-1))


def hertz_to_mel(frequencies_hertz):
    return _MEL_HIGH_Q * np.log1p(np.asarray(frequencies_hertz, dtype=float) / _MEL_BREAK_HZ)


def spectrogram_to_mel_matrix(num_mel_bins: int = N_MEL_BANDS,
                              num_spectrogram_bins: int = FFT_LENGTH // 2 + 1,
                              audio_sample_rate: float = TARGET_RATE_HZ,
                              lower_edge_hertz: float = MEL_LOWER_HZ,
                              upper_edge_hertz: float = MEL_UPPER_HZ) -> np.ndarray:
    """Triangular mel weight matrix, (num_spectrogram_bins, num_mel_bins).

    Each column is a triangle that is 1.0 at its band center (in mel) and
    falls to 0 at the adjacent band centers. The DC bin's row is zeroed so
    signal mean never leaks into the features.
    """
    if lower_edge_hertz >= upper_edge_hertz:
        raise ValueError(f"lower edge {lower_edge_hertz} >= upper edge {upper_edge_hertz}")
    nyquist_hertz = audio_sample_rate / 2.0
    spectrogram_bins_mel = hertz_to_mel(np.linspace(0.0, nyquist_hertz, num_spectrogram_bins))
    band_edges_mel = np.linspace(hertz_to_mel(lower_edge_hertz), hertz_to_mel(upper_edge_hertz),
                                 num_mel_bins + 2)
    mel_weights_matrix = np.empty((num_spectrogram_bins, num_mel_bins))
    for i in range(num_mel_bins):
        lower_edge_mel, center_mel, upper_edge_mel = band_edges_mel[i:i + 3]
        lower_slope = (spectrogram_bins_mel - lower_edge_mel) / (center_mel - lower_edge_mel)
        upper_slope = (upper_edge_mel - spectrogram_bins_mel) / (upper_edge_mel - center_mel)
        mel_weights_matrix[:, i] = np.maximum(0.0, np.minimum(lower_slope, upper_slope))
    mel_weights_matrix[0, :] = 0.0
    return mel_weights_matrix


_MEL_MATRIX_CACHE: dict[tuple, np.ndarray] = {}


def _mel_matrix_cached(num_spectrogram_bins: int) -> np.ndarray:
    key = (N_MEL_BANDS, num_spectrogram_bins, TARGET_RATE_HZ, MEL_LOWER_HZ, MEL_UPPER_HZ)
    if key not in _MEL_MATRIX_CACHE:
        _MEL_MATRIX_CACHE[key] = spectrogram_to_mel_matrix(*key)
    return _MEL_MATRIX_CACHE[key]


def log_mel_spectrogram(waveform_16k, sample_rate: int = TARGET_RATE_HZ) -> np.ndarray:
    """16 kHz waveform -> (num_frames, 64) log-mel spectrogram.

    25 ms periodic-Hann windows, 10 ms hop, 512-point FFT, 64 mel bands over
    125-7500 Hz, log(mel + 0.01).
    """
    window_length = int(round(sample_rate * WINDOW_S))
    hop_length = int(round(sample_rate * HOP_S))
    magnitudes = stft_magnitude(waveform_16k, FFT_LENGTH, hop_length, window_length)
    mel = np.dot(magnitudes.astype(np.float64), _mel_matrix_cached(magnitudes.shape[1]))
    return np.log(mel + LOG_OFFSET)


def patchify(spectrogram: np.ndarray, patch_frames: int = PATCH_FRAMES) -> np.ndarray:
    """Cut (num_frames, bands) into non-overlapping (patch_frames, bands) patches.

    Trailing frames that do not fill a whole patch are dropped.
    """
    num_frames, bands = spectrogram.shape
    n_patches = num_frames // patch_frames
    return spectrogram[: n_patches * patch_frames].reshape(n_patches, patch_frames, bands)


def series_to_patches(series, rng: np.random.Generator,
                      sample_rate_hz: int = SOURCE_RATE_HZ,
                      epsilon: float = NOISE_EPSILON) -> np.ndarray:
    """Full front end: hourly series -> (n_patches, 96, 64) float32 patches."""
    wave = synthesize_waveform(series, rng, sample_rate_hz=sample_rate_hz, epsilon=epsilon)
    wave16 = resample_to_16k(wave, source_rate=sample_rate_hz)
    spec = log_mel_spectrogram(wave16)
    return patchify(spec).astype(np.float32)
