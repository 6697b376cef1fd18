import numpy as np
import pytest

from avh_valence.embedder import (
    CONV_CHANNELS,
    CONVS_PER_BLOCK,
    FC_WIDTHS,
    EmbedderConfig,
    EmbedderWeights,
    conv2d_same,
    embed_average,
    embed_patches,
    load_weights,
    maxpool_2x2,
    random_weights,
    write_weights,
)
from avh_valence.seeding import derive_rng


def conv2d_oracle(x, weight, bias):
    """Sliding-window reference: explicit loops over every output element."""
    n, h, w, cin = x.shape
    kh, kw, _, cout = weight.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.astype(np.float64), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((n, h, w, cout))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                window = xp[b, i : i + kh, j : j + kw, :]
                for o in range(cout):
                    out[b, i, j, o] = (window * weight[:, :, :, o]).sum() + bias[o]
    return out


def maxpool_oracle(x):
    n, h, w, c = x.shape
    out = np.empty((n, h // 2, w // 2, c), x.dtype)
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, i, j, :] = x[:, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2, :].max(axis=(1, 2))
    return out


def test_config_default_widths():
    cfg = EmbedderConfig()
    assert cfg.scaled_conv_channels == CONV_CHANNELS == (64, 128, 256, 256, 512, 512)
    assert cfg.scaled_fc_sizes == FC_WIDTHS == (4096, 4096, 128)
    assert cfg.embedding_width == 128


def test_config_width_divisor_scaling():
    cfg = EmbedderConfig(width_divisor=8)
    assert cfg.scaled_conv_channels == (8, 16, 32, 32, 64, 64)
    assert cfg.scaled_fc_sizes == (512, 512, 16)
    assert cfg.embedding_width == 16
    # divisor larger than a width floors at 1
    tiny = EmbedderConfig(width_divisor=10_000)
    assert tiny.scaled_conv_channels == (1, 1, 1, 1, 1, 1)
    assert tiny.embedding_width == 1


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        EmbedderConfig(width_divisor=0)
    with pytest.raises(ValueError):
        EmbedderConfig(conv_channels=(64, 128))
    with pytest.raises(ValueError):
        EmbedderConfig(fc_sizes=())


def test_expected_shapes_chain():
    shapes = EmbedderConfig(width_divisor=8).expected_shapes()
    assert shapes["conv1.weight"] == (3, 3, 1, 8)
    assert shapes["conv2.weight"] == (3, 3, 8, 16)
    assert shapes["conv6.weight"] == (3, 3, 64, 64)
    # four pool halvings: 96x64 -> 6x4, flattened with the last conv width
    assert shapes["fc1.weight"] == (6 * 4 * 64, 512)
    assert shapes["fc3.weight"] == (512, 16)
    assert shapes["fc3.bias"] == (16,)


def test_random_weights_he_scale_and_zero_bias():
    cfg = EmbedderConfig(width_divisor=2)
    weights = random_weights(cfg, derive_rng(0, "he"))
    for name, shape in cfg.expected_shapes().items():
        t = weights[name]
        assert t.shape == shape and t.dtype == np.float32
        if name.endswith(".bias"):
            assert np.array_equal(t, np.zeros(shape, dtype=np.float32))
        else:
            fan_in = int(np.prod(shape[:-1]))
            if t.size >= 4096:
                assert t.std() == pytest.approx(np.sqrt(2.0 / fan_in), rel=0.15)


def test_conv2d_matches_sliding_window_oracle_multichannel():
    rng = derive_rng(1, "conv")
    x = rng.standard_normal((2, 5, 6, 3))
    weight = rng.standard_normal((3, 3, 3, 4))
    bias = rng.standard_normal(4)
    got = conv2d_same(x, weight, bias)
    assert np.max(np.abs(got - conv2d_oracle(x, weight, bias))) <= 1e-9


def test_conv2d_matches_sliding_window_oracle_single_channel():
    rng = derive_rng(2, "conv")
    x = rng.standard_normal((3, 7, 4, 1))
    weight = rng.standard_normal((3, 3, 1, 5))
    bias = rng.standard_normal(5)
    got = conv2d_same(x, weight, bias)
    assert np.max(np.abs(got - conv2d_oracle(x, weight, bias))) <= 1e-9


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        conv2d_same(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 4)), np.zeros(4))


def test_maxpool_matches_oracle_and_drops_odd_edges():
    rng = derive_rng(3, "pool")
    x = rng.standard_normal((2, 7, 5, 3))
    got = maxpool_2x2(x)
    assert got.shape == (2, 3, 2, 3)
    assert np.array_equal(got, maxpool_oracle(x))


def test_embed_patches_shape_and_dtype():
    cfg = EmbedderConfig(width_divisor=32)
    weights = random_weights(cfg, derive_rng(4, "w"))
    patches = derive_rng(4, "p").standard_normal((5, 96, 64))
    out = embed_patches(patches, weights)
    assert out.shape == (5, cfg.embedding_width)
    assert out.dtype == np.float32
    # a single 2-D patch embeds as a batch of one (matrix-product rounding
    # differs across batch shapes, so equality is approximate)
    one = embed_patches(patches[0], weights)
    assert one.shape == (1, cfg.embedding_width)
    assert np.allclose(one[0], out[0], atol=1e-5)
    # identical calls are bit-identical
    assert np.array_equal(embed_patches(patches, weights), out)


def test_embed_patches_rejects_wrong_patch_shape():
    weights = random_weights(EmbedderConfig(width_divisor=32), derive_rng(5, "w"))
    with pytest.raises(ValueError):
        embed_patches(np.zeros((2, 96, 63)), weights)


def test_chunked_batches_match_unchunked(monkeypatch):
    import avh_valence.embedder as emb

    cfg = EmbedderConfig(width_divisor=32)
    weights = random_weights(cfg, derive_rng(6, "w"))
    patches = derive_rng(6, "p").standard_normal((6, 96, 64)).astype(np.float32)
    whole = embed_patches(patches, weights)
    # shrink the buffer cap so the same batch is forced through tiny chunks;
    # chunk shape changes matrix-product rounding, so compare approximately
    monkeypatch.setattr(emb, "_IM2COL_CAP", 96 * 64 * 9 * 4 * 2)
    chunked = embed_patches(patches, weights)
    assert np.allclose(whole, chunked, atol=1e-5)


def test_embed_average_is_mean_and_permutation_invariant():
    cfg = EmbedderConfig(width_divisor=32)
    weights = random_weights(cfg, derive_rng(7, "w"))
    patches = derive_rng(7, "p").standard_normal((4, 96, 64)).astype(np.float32)
    avg = embed_average(patches, weights)
    assert avg.shape == (cfg.embedding_width,)
    assert np.allclose(avg, embed_patches(patches, weights).mean(axis=0))
    perm = patches[[2, 0, 3, 1]]
    assert np.allclose(embed_average(perm, weights), avg, atol=1e-6)


def test_weights_archive_round_trip(tmp_path):
    cfg = EmbedderConfig(width_divisor=16)
    weights = random_weights(cfg, derive_rng(8, "w"))
    path = tmp_path / "weights.tensors"
    write_weights(path, weights)
    loaded = load_weights(path)
    assert loaded.config == cfg
    for name in cfg.expected_shapes():
        assert np.array_equal(loaded[name], weights[name])


def test_load_weights_rejects_wrong_config(tmp_path):
    weights = random_weights(EmbedderConfig(width_divisor=16), derive_rng(9, "w"))
    path = tmp_path / "weights.tensors"
    write_weights(path, weights)
    with pytest.raises(ValueError):
        load_weights(path, EmbedderConfig(width_divisor=8))


def test_forward_matches_hand_computed_tiny_net():
    # center-tap conv kernels act as the identity, so the whole net reduces
    # to four 2x2 max-pools followed by a summing fc layer
    cfg = EmbedderConfig(conv_channels=(1, 1, 1, 1, 1, 1), fc_sizes=(1,))
    tensors = {}
    for name, shape in cfg.expected_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, np.float32)
        elif name.startswith("conv"):
            t = np.zeros(shape, np.float32)
            t[1, 1, 0, 0] = 1.0
            tensors[name] = t
        else:
            tensors[name] = np.ones(shape, np.float32)
    weights = EmbedderWeights(cfg, tensors)
    patch = np.abs(derive_rng(10, "tiny").standard_normal((96, 64))).astype(np.float32)
    out = embed_patches(patch, weights)
    pooled = patch.reshape(6, 16, 4, 16).max(axis=(1, 3))
    assert out[0, 0] == pytest.approx(pooled.sum(), rel=1e-5)
