"""Audio patch embedder: a small VGG-style conv net over log-mel patches.

Each (96, 64) spectrogram patch runs through four conv blocks (3x3 same-pad
convolutions + ReLU, 2x2/2 max-pool after each block) and three fully
connected layers; the final layer is linear and its width is the embedding
dimension. An instance embedding is the mean over its patch embeddings.

All widths shrink together via `width_divisor` (each count becomes
max(1, n // divisor)) so smaller, faster embedders keep the same shape
grammar. Weights live in a tensor archive under the names
``conv1.weight .. conv6.weight`` (3, 3, in, out), ``fc1.weight .. fc3.weight``
(in, out), and matching ``.bias`` vectors; absent an archive, seeded He
(fan-in) random weights are used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .archive import check_shapes, read_archive, write_archive

CONV_CHANNELS = (64, 128, 256, 256, 512, 512)
CONVS_PER_BLOCK = (1, 1, 2, 2)
FC_WIDTHS = (4096, 4096, 128)
INPUT_FRAMES = 96
INPUT_BANDS = 64
KERNEL = 3

# batch chunking cap on the materialized im2col buffer (bytes)
_IM2COL_CAP = 96 * 2**20


def _scale(n: int, divisor: int) -> int:
    return max(1, n // divisor)


@dataclass(frozen=True)
class EmbedderConfig:
    conv_channels: tuple[int, ...] = CONV_CHANNELS
    fc_sizes: tuple[int, ...] = FC_WIDTHS
    width_divisor: int = 1

    def __post_init__(self):
        if self.width_divisor < 1:
            raise ValueError(f"width_divisor must be >= 1, got {self.width_divisor}")
        if len(self.conv_channels) != sum(CONVS_PER_BLOCK):
            raise ValueError(f"expected {sum(CONVS_PER_BLOCK)} conv channel counts")
        if len(self.fc_sizes) < 1:
            raise ValueError("need at least one fully connected size")

    @property
    def scaled_conv_channels(self) -> tuple[int, ...]:
        return tuple(_scale(c, self.width_divisor) for c in self.conv_channels)

    @property
    def scaled_fc_sizes(self) -> tuple[int, ...]:
        return tuple(_scale(w, self.width_divisor) for w in self.fc_sizes)

    @property
    def embedding_width(self) -> int:
        return self.scaled_fc_sizes[-1]

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        cin = 1
        for i, cout in enumerate(self.scaled_conv_channels, start=1):
            shapes[f"conv{i}.weight"] = (KERNEL, KERNEL, cin, cout)
            shapes[f"conv{i}.bias"] = (cout,)
            cin = cout
        h, w = INPUT_FRAMES, INPUT_BANDS
        for _ in CONVS_PER_BLOCK:
            h, w = h // 2, w // 2
        fan_in = h * w * self.scaled_conv_channels[-1]
        for i, width in enumerate(self.scaled_fc_sizes, start=1):
            shapes[f"fc{i}.weight"] = (fan_in, width)
            shapes[f"fc{i}.bias"] = (width,)
            fan_in = width
        return shapes


@dataclass
class EmbedderWeights:
    config: EmbedderConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def random_weights(config: EmbedderConfig, rng: np.random.Generator) -> EmbedderWeights:
    """He (fan-in) normal weights, zero biases, float32."""
    tensors = {}
    for name, shape in config.expected_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[:-1]))
            std = np.sqrt(2.0 / fan_in)
            tensors[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return EmbedderWeights(config, tensors)


def write_weights(path, weights: EmbedderWeights) -> None:
    cfg = weights.config
    meta = {
        "kind": "audio_embedder_weights",
        "conv_channels": list(cfg.conv_channels),
        "fc_sizes": list(cfg.fc_sizes),
        "width_divisor": cfg.width_divisor,
    }
    write_archive(path, sorted(weights.tensors.items()), meta)


def load_weights(path, config: EmbedderConfig | None = None) -> EmbedderWeights:
    """Read a weight archive, inferring config from its metadata if not given.

    Every expected tensor must be present with the exact expected shape.
    """
    arc = read_archive(path)
    if config is None:
        config = EmbedderConfig(
            conv_channels=tuple(arc.meta.get("conv_channels", CONV_CHANNELS)),
            fc_sizes=tuple(arc.meta.get("fc_sizes", FC_WIDTHS)),
            width_divisor=int(arc.meta.get("width_divisor", 1)),
        )
    check_shapes(arc, config.expected_shapes())
    return EmbedderWeights(config, {n: arc[n] for n in config.expected_shapes()})


def conv2d_same(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 (or any odd-kernel) stride-1 same-pad cross-correlation.

    x is channels-last (N, H, W, Cin); weight is (KH, KW, Cin, Cout). Computed
    as an im2col matrix product in the input dtype.
    """
    n, h, w, cin = x.shape
    kh, kw, cin_w, cout = weight.shape
    if cin_w != cin:
        raise ValueError(f"weight expects {cin_w} input channels, got {cin}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    nhw = n * h * w
    w2d = weight.reshape(kh * kw * cin, cout).astype(x.dtype)
    if cin == 1:
        # tap-major layout lets BLAS consume the transpose without a copy
        cols = np.empty((kh * kw, nhw), x.dtype)
        cols_v = cols.reshape(kh * kw, n, h, w)
        for t in range(kh * kw):
            cols_v[t] = xp[:, t // kw : t // kw + h, t % kw : t % kw + w, 0]
        out = cols.T @ w2d
    else:
        cols = np.empty((nhw, kh * kw, cin), x.dtype)
        cols_v = cols.reshape(n, h, w, kh * kw, cin)
        for t in range(kh * kw):
            cols_v[:, :, :, t, :] = xp[:, t // kw : t // kw + h, t % kw : t % kw + w, :]
        out = cols.reshape(nhw, kh * kw * cin) @ w2d
    out += bias.astype(x.dtype)
    return out.reshape(n, h, w, cout)


def maxpool_2x2(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped."""
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    x = x[:, : h2 * 2, : w2 * 2, :]
    out = np.maximum(x[:, 0::2, 0::2, :], x[:, 0::2, 1::2, :])
    np.maximum(out, x[:, 1::2, 0::2, :], out=out)
    np.maximum(out, x[:, 1::2, 1::2, :], out=out)
    return out


def _forward_convs(x: np.ndarray, weights: EmbedderWeights) -> np.ndarray:
    idx = 1
    for block_size in CONVS_PER_BLOCK:
        for _ in range(block_size):
            x = conv2d_same(x, weights[f"conv{idx}.weight"], weights[f"conv{idx}.bias"])
            np.maximum(x, 0.0, out=x)
            idx += 1
        x = maxpool_2x2(x)
    return x


def embed_patches(patches: np.ndarray, weights: EmbedderWeights) -> np.ndarray:
    """(N, 96, 64) patches -> (N, embedding_width) float32 embeddings.

    Large batches are processed in chunks sized so the materialized im2col
    buffer stays bounded regardless of width_divisor.
    """
    patches = np.asarray(patches, dtype=np.float32)
    if patches.ndim == 2:
        patches = patches[None]
    if patches.shape[1:] != (INPUT_FRAMES, INPUT_BANDS):
        raise ValueError(f"expected (N, {INPUT_FRAMES}, {INPUT_BANDS}) patches, got {patches.shape}")

    cfg = weights.config
    # worst per-patch im2col bytes across conv layers (channels-last, float32)
    h, w, cin = INPUT_FRAMES, INPUT_BANDS, 1
    per_patch = 0
    layer = 0
    for block_size in CONVS_PER_BLOCK:
        for _ in range(block_size):
            per_patch = max(per_patch, h * w * KERNEL * KERNEL * cin * 4)
            cin = cfg.scaled_conv_channels[layer]
            layer += 1
        h, w = h // 2, w // 2
    chunk = max(1, _IM2COL_CAP // per_patch)

    n_fc = len(cfg.scaled_fc_sizes)
    outs = []
    for lo in range(0, patches.shape[0], chunk):
        x = patches[lo : lo + chunk, :, :, None]
        x = _forward_convs(x, weights)
        x = x.reshape(x.shape[0], -1)
        for i in range(1, n_fc + 1):
            x = x @ weights[f"fc{i}.weight"].astype(np.float32)
            x += weights[f"fc{i}.bias"].astype(np.float32)
            if i < n_fc:
                np.maximum(x, 0.0, out=x)
        outs.append(x)
    return np.concatenate(outs, axis=0)


def embed_average(patches: np.ndarray, weights: EmbedderWeights) -> np.ndarray:
    """Mean over patch embeddings: (N, 96, 64) -> (embedding_width,)."""
    return embed_patches(patches, weights).mean(axis=0)
