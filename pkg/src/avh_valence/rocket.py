"""Random convolutional kernel features for short behavioral series.

A fixed bank of random dilated kernels is sampled once (seeded) and applied
to every hourly stream; each kernel contributes its maximum response and the
fraction of strictly positive responses, so a 64-kernel bank turns one
24-point stream into 128 features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_KERNELS = 64
CANDIDATE_LENGTHS = (7, 9, 11)
FEATURES_PER_KERNEL = 2  # [max, ppv]


@dataclass(frozen=True)
class RandomKernel:
    weights: np.ndarray  # mean-centered, shape (length,)
    bias: float
    dilation: int
    padding: bool  # zero-pad ((length - 1) * dilation) / 2 per side when on

    @property
    def length(self) -> int:
        return self.weights.shape[0]

    @property
    def pad_amount(self) -> int:
        return ((self.length - 1) * self.dilation) // 2 if self.padding else 0


def sample_kernels(seed_or_rng, n_kernels: int = N_KERNELS,
                   series_len: int = 24) -> list[RandomKernel]:
    """Sample the kernel bank for streams of a fixed length.

    Per kernel, in draw order: length uniform from {7, 9, 11}; weights
    N(0, 1) then mean-centered; bias U[-1, 1]; dilation floor(2**a) with
    a ~ U[0, log2((series_len - 1) / (length - 1))]; padding on a fair coin.
    """
    if series_len < max(CANDIDATE_LENGTHS):
        raise ValueError(
            f"series_len {series_len} shorter than the longest kernel {max(CANDIDATE_LENGTHS)}"
        )
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    kernels = []
    for _ in range(n_kernels):
        length = int(rng.choice(CANDIDATE_LENGTHS))
        weights = rng.standard_normal(length)
        weights -= weights.mean()
        bias = float(rng.uniform(-1.0, 1.0))
        a_hi = np.log2((series_len - 1) / (length - 1))
        dilation = int(np.floor(2.0 ** rng.uniform(0.0, a_hi)))
        padding = bool(rng.integers(0, 2))
        kernels.append(RandomKernel(weights, bias, dilation, padding))
    return kernels


def apply_kernel(series, kernel: RandomKernel) -> np.ndarray:
    """Dilated sliding dot product plus bias over the (optionally padded) series.

    output[j] = bias + sum_i weights[i] * padded[j + i * dilation].
    """
    x = np.asarray(series, dtype=float)
    if kernel.padding:
        x = np.pad(x, (kernel.pad_amount, kernel.pad_amount))
    span = (kernel.length - 1) * kernel.dilation
    n_out = x.shape[0] - span
    if n_out <= 0:
        raise ValueError(f"series of {x.shape[0]} samples too short for kernel span {span + 1}")
    s = x.strides[0]
    view = np.lib.stride_tricks.as_strided(x, (n_out, kernel.length), (s, s * kernel.dilation))
    return view @ kernel.weights + kernel.bias


def kernel_features(series, kernel: RandomKernel) -> tuple[float, float]:
    """(max response, proportion of strictly positive responses)."""
    out = apply_kernel(series, kernel)
    return float(out.max()), float(np.count_nonzero(out > 0.0) / out.shape[0])


def transform(series, kernels: list[RandomKernel]) -> np.ndarray:
    """One stream -> (2 * n_kernels,) features, kernel-major [max, ppv] pairs."""
    out = np.empty(FEATURES_PER_KERNEL * len(kernels))
    for i, k in enumerate(kernels):
        out[2 * i], out[2 * i + 1] = kernel_features(series, k)
    return out


def transform_streams(streams: np.ndarray, kernels: list[RandomKernel]) -> np.ndarray:
    """(n_streams, L) -> concatenated per-stream features, stream-major."""
    return np.concatenate([transform(streams[r], kernels) for r in range(streams.shape[0])])
