import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avh_valence.rocket import (
    CANDIDATE_LENGTHS,
    RandomKernel,
    apply_kernel,
    kernel_features,
    sample_kernels,
    transform,
    transform_streams,
)
from avh_valence.seeding import derive_rng


def brute_force_apply(series, kernel):
    """Dilated 1-D convolution written as explicit loops (independent oracle)."""
    x = list(series)
    if kernel.padding:
        pad = kernel.pad_amount
        x = [0.0] * pad + x + [0.0] * pad
    span = (kernel.length - 1) * kernel.dilation
    out = []
    for start in range(len(x) - span):
        acc = kernel.bias
        for j in range(kernel.length):
            acc += kernel.weights[j] * x[start + j * kernel.dilation]
        out.append(acc)
    return np.array(out)


def test_apply_matches_brute_force_on_many_random_cases():
    rng = derive_rng(0, "rocket-test")
    for _ in range(100):
        n = int(rng.integers(11, 60))
        series = rng.standard_normal(n)
        kernel = sample_kernels(rng, n_kernels=1, series_len=n)[0]
        fast = apply_kernel(series, kernel)
        slow = brute_force_apply(series, kernel)
        assert fast.shape == slow.shape
        assert np.max(np.abs(fast - slow)) <= 1e-12


def test_kernel_constraints():
    rng = derive_rng(1, "rocket-test")
    kernels = sample_kernels(rng, n_kernels=200, series_len=24)
    for k in kernels:
        assert k.length in CANDIDATE_LENGTHS
        assert abs(k.weights.mean()) <= 1e-15  # centered after sampling
        assert -1.0 <= k.bias <= 1.0
        assert k.dilation >= 1
        # at least one valid position must exist without padding
        assert (k.length - 1) * k.dilation <= 23
        expected_pad = ((k.length - 1) * k.dilation) // 2 if k.padding else 0
        assert k.pad_amount == expected_pad


def test_padding_flag_distribution_and_effect():
    kernels = sample_kernels(derive_rng(2, "r"), n_kernels=100, series_len=24)
    padded = [k for k in kernels if k.padding]
    assert 0 < len(padded) < 100
    series = derive_rng(3, "s").standard_normal(24)
    k = padded[0]
    assert len(apply_kernel(series, k)) > len(
        apply_kernel(series, RandomKernel(k.weights, k.bias, k.dilation, False))
    )


def test_output_never_empty():
    rng = derive_rng(4, "rocket-test")
    for _ in range(50):
        k = sample_kernels(rng, n_kernels=1, series_len=11)[0]
        assert len(apply_kernel(np.zeros(11), k)) >= 1


def test_series_shorter_than_longest_kernel_rejected():
    rng = derive_rng(5, "r")
    with pytest.raises(ValueError):
        sample_kernels(rng, n_kernels=1, series_len=10)


def test_ppv_counts_strictly_positive():
    k = RandomKernel(np.array([1.0, 0.0, -1.0]), 0.0, 1, False)
    # conv outputs: [3, 0, 0] -> ppv = 1/3 (zeros are not positive)
    series = np.array([4.0, 1.0, 1.0, 1.0, 1.0])
    _, ppv = kernel_features(series, k)
    assert ppv == pytest.approx(1 / 3)


def test_feature_layout_interleaved_kernel_major():
    rng = derive_rng(6, "r")
    series = rng.standard_normal(24)
    kernels = sample_kernels(rng, n_kernels=3, series_len=24)
    feats = transform(series, kernels)
    assert feats.shape == (6,)
    for i, k in enumerate(kernels):
        mx, ppv = kernel_features(series, k)
        assert feats[2 * i] == pytest.approx(mx)
        assert feats[2 * i + 1] == pytest.approx(ppv)


def test_transform_width_is_twice_kernel_count():
    series = derive_rng(7, "r").standard_normal(24)
    kernels = sample_kernels(derive_rng(8, "r"), n_kernels=64, series_len=24)
    assert transform(series, kernels).shape == (128,)


def test_transform_streams_stream_major():
    streams = derive_rng(9, "r").standard_normal((7, 24))
    kernels = sample_kernels(derive_rng(10, "r"), n_kernels=64, series_len=24)
    feats = transform_streams(streams, kernels)
    assert feats.shape == (896,)
    assert np.allclose(feats[:128], transform(streams[0], kernels))
    assert np.allclose(feats[-128:], transform(streams[6], kernels))


def test_sampling_accepts_seed_or_generator():
    a = sample_kernels(derive_rng(11, "r"), n_kernels=4)
    b = sample_kernels(derive_rng(11, "r"), n_kernels=4)
    for ka, kb in zip(a, b):
        assert np.array_equal(ka.weights, kb.weights)
        assert (ka.bias, ka.dilation, ka.padding) == (kb.bias, kb.dilation, kb.padding)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_ppv_always_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    series = rng.standard_normal(24)
    k = sample_kernels(rng, n_kernels=1, series_len=24)[0]
    mx, ppv = kernel_features(series, k)
    assert 0.0 <= ppv <= 1.0
    assert np.isfinite(mx)
