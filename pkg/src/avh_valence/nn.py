"""From-scratch dense network engine in float64 numpy.

Rows follow the architecture tables' grammar: an optional input row
(batch norm and/or dropout, no affine) followed by affine rows, each
affine -> batch norm (optional) -> activation -> dropout (optional).
Softmax-head models train with softmax cross-entropy; sigmoid-head models
with per-class sigmoid cross-entropy against one-hot targets, argmax at
inference either way.

Everything is seeded and single-threaded: training is bit-reproducible for a
fixed seed on the same build.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_rng

ACTIVATIONS = ("relu", "tanh", "sigmoid", "softmax", "none")
LOSSES = ("softmax_cross_entropy", "per_class_sigmoid_cross_entropy")

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # new_running = momentum * old + (1 - momentum) * batch
_PROB_CLIP = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: str = "none"
    dropout_rate: float = 0.0
    batch_norm: bool = False

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"layer width must be >= 1, got {self.width}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, 1)")


@dataclass(frozen=True)
class ModelSpec:
    input_width: int
    layers: tuple[LayerSpec, ...]
    loss: str
    seed: int = 0
    input_dropout: float = 0.0
    input_batch_norm: bool = False

    def __post_init__(self):
        if self.input_width < 1:
            raise ValueError("input_width must be >= 1")
        if not self.layers:
            raise ValueError("need at least one layer")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.input_dropout < 1.0:
            raise ValueError(f"input_dropout {self.input_dropout} outside [0, 1)")
        for i, layer in enumerate(self.layers):
            if layer.activation == "softmax" and i != len(self.layers) - 1:
                raise ValueError("softmax allowed only on the output layer")
        if self.layers[-1].dropout_rate != 0.0:
            raise ValueError("output layer must not have dropout")
        head = self.layers[-1].activation
        if self.loss == "softmax_cross_entropy" and head != "softmax":
            raise ValueError("softmax_cross_entropy requires a softmax output layer")
        if self.loss == "per_class_sigmoid_cross_entropy" and head != "sigmoid":
            raise ValueError("per_class_sigmoid_cross_entropy requires a sigmoid output layer")

    @property
    def output_width(self) -> int:
        return self.layers[-1].width

    def widths(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per affine row."""
        chain = [self.input_width] + [l.width for l in self.layers]
        return list(zip(chain[:-1], chain[1:]))

    def has_batch_norm(self) -> bool:
        return self.input_batch_norm or any(l.batch_norm for l in self.layers)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    epochs: int
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


class Model:
    """Parameters + batch-norm running statistics for one ModelSpec."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray],
                 running: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self.running = running

    def clone(self) -> "Model":
        return Model(self.spec, copy.deepcopy(self.params), copy.deepcopy(self.running))


@dataclass
class Checkpoint:
    model: Model
    moments: dict[str, np.ndarray]  # adam.m.<param> / adam.v.<param>
    step: int  # adam t at snapshot
    best_epoch: int  # 1-based epoch of the snapshot
    history: list[tuple[float, float]] = field(default_factory=list)  # (train loss, val top-1 micro F1)


def build_model(spec: ModelSpec) -> Model:
    """Seeded fan-in-scaled normal affine weights, zero biases; BN scale 1, shift 0."""
    rng = derive_rng(spec.seed, "nn-init")
    params: dict[str, np.ndarray] = {}
    running: dict[str, np.ndarray] = {}
    if spec.input_batch_norm:
        params["input.bn.gamma"] = np.ones(spec.input_width)
        params["input.bn.beta"] = np.zeros(spec.input_width)
        running["input.bn.mean"] = np.zeros(spec.input_width)
        running["input.bn.var"] = np.ones(spec.input_width)
    for i, ((fan_in, fan_out), layer) in enumerate(zip(spec.widths(), spec.layers), start=1):
        params[f"layer{i}.weight"] = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        params[f"layer{i}.bias"] = np.zeros(fan_out)
        if layer.batch_norm:
            params[f"layer{i}.bn.gamma"] = np.ones(fan_out)
            params[f"layer{i}.bn.beta"] = np.zeros(fan_out)
            running[f"layer{i}.bn.mean"] = np.zeros(fan_out)
            running[f"layer{i}.bn.var"] = np.ones(fan_out)
    return Model(spec, params, running)


def n_parameters(model: Model) -> int:
    return sum(p.size for p in model.params.values())


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        # stable logistic: exp of a non-positive argument only
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if name == "softmax":
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    return z


def _activation_grad(name: str, act_out: np.ndarray) -> np.ndarray:
    """d act / d pre-activation expressed via the activation's output."""
    if name == "relu":
        return (act_out > 0.0).astype(float)
    if name == "tanh":
        return 1.0 - act_out**2
    if name == "sigmoid":
        return act_out * (1.0 - act_out)
    if name == "none":
        return np.ones_like(act_out)
    raise ValueError(f"no elementwise gradient for {name!r}")


def _bn_forward_train(x, gamma, beta):
    mean = x.mean(axis=0)
    var = x.var(axis=0)  # biased
    std = np.sqrt(var + BN_EPS)
    xhat = (x - mean) / std
    return gamma * xhat + beta, (xhat, std, mean, var)


def _bn_forward_eval(x, gamma, beta, run_mean, run_var):
    return gamma * (x - run_mean) / np.sqrt(run_var + BN_EPS) + beta


def _bn_backward(dy, gamma, cache):
    xhat, std, _, _ = cache
    n = dy.shape[0]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = (dxhat * n - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)) / (n * std)
    return dx, dgamma, dbeta


def _dropout_mask(shape, rate, rng):
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(float) / keep


def forward(model: Model, x: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None,
            update_running: bool = False, dropout_on: bool = True):
    """Run the network; returns (per-affine-row post-activation outputs, caches).

    The last output entry is the output probabilities. Caches are None in
    eval mode. Train mode uses batch statistics for batch norm (and needs
    n >= 2 when any batch-norm row exists) and applies inverted dropout when
    `dropout_on` (requires `rng`).
    """
    spec = model.spec
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.input_width:
        raise ValueError(f"expected batch of width {spec.input_width}, got shape {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    train = mode == "train"
    if train and x.shape[0] < 2 and spec.has_batch_norm():
        raise ValueError("train-mode batch of 1 is ill-defined with batch norm")
    if train and dropout_on and rng is None and (
        spec.input_dropout > 0 or any(l.dropout_rate > 0 for l in spec.layers)
    ):
        raise ValueError("train-mode dropout needs an rng")

    p, run = model.params, model.running
    caches: list[dict] = []
    h = x

    cache: dict = {}
    if spec.input_batch_norm:
        if train:
            h, bn_cache = _bn_forward_train(h, p["input.bn.gamma"], p["input.bn.beta"])
            cache["bn"] = bn_cache
            if update_running:
                _update_running(run, "input", bn_cache)
        else:
            h = _bn_forward_eval(h, p["input.bn.gamma"], p["input.bn.beta"],
                                 run["input.bn.mean"], run["input.bn.var"])
    if train and dropout_on and spec.input_dropout > 0:
        mask = _dropout_mask(h.shape, spec.input_dropout, rng)
        cache["mask"] = mask
        h = h * mask
    cache["out"] = h
    caches.append(cache)

    outputs = []
    for i, layer in enumerate(spec.layers, start=1):
        cache = {"x": h}
        z = h @ p[f"layer{i}.weight"] + p[f"layer{i}.bias"]
        if layer.batch_norm:
            if train:
                z, bn_cache = _bn_forward_train(z, p[f"layer{i}.bn.gamma"], p[f"layer{i}.bn.beta"])
                cache["bn"] = bn_cache
                if update_running:
                    _update_running(run, f"layer{i}", bn_cache)
            else:
                z = _bn_forward_eval(z, p[f"layer{i}.bn.gamma"], p[f"layer{i}.bn.beta"],
                                     run[f"layer{i}.bn.mean"], run[f"layer{i}.bn.var"])
        a = _activate(layer.activation, z)
        cache["act"] = a
        if train and dropout_on and layer.dropout_rate > 0:
            mask = _dropout_mask(a.shape, layer.dropout_rate, rng)
            cache["mask"] = mask
            a = a * mask
        cache["out"] = a
        outputs.append(a)
        caches.append(cache)
        h = a

    return outputs, (caches if train else None)


def _update_running(run, prefix, bn_cache):
    _, _, mean, var = bn_cache
    run[f"{prefix}.bn.mean"] = BN_MOMENTUM * run[f"{prefix}.bn.mean"] + (1 - BN_MOMENTUM) * mean
    run[f"{prefix}.bn.var"] = BN_MOMENTUM * run[f"{prefix}.bn.var"] + (1 - BN_MOMENTUM) * var


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Eval-mode output probabilities."""
    outputs, _ = forward(model, x, mode="eval")
    return outputs[-1]


def extract_activations(model: Model, x: np.ndarray, layer_index: int) -> np.ndarray:
    """Eval-mode post-activation output of affine row `layer_index` (0-based)."""
    if not 0 <= layer_index < len(model.spec.layers):
        raise IndexError(f"layer_index {layer_index} outside 0..{len(model.spec.layers) - 1}")
    outputs, _ = forward(model, x, mode="eval")
    return outputs[layer_index]


def _check_one_hot(targets: np.ndarray, width: int):
    t = np.asarray(targets, dtype=float)
    if t.ndim != 2 or t.shape[1] != width:
        raise ValueError(f"targets must be (n, {width}), got {t.shape}")
    if not (np.all((t == 0.0) | (t == 1.0)) and np.all(t.sum(axis=1) == 1.0)):
        raise ValueError("targets must be one-hot rows")
    return t


def loss_value(probs: np.ndarray, targets: np.ndarray, kind: str) -> float:
    """Mean cross-entropy from output probabilities against one-hot targets."""
    t = _check_one_hot(targets, probs.shape[1])
    p = np.clip(probs, _PROB_CLIP, 1.0 - _PROB_CLIP)
    if kind == "softmax_cross_entropy":
        return float(-np.log((p * t).sum(axis=1)).mean())
    if kind == "per_class_sigmoid_cross_entropy":
        return float(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean())
    raise ValueError(f"unknown loss {kind!r}")


def _loss_grad_at_head(probs: np.ndarray, targets: np.ndarray, kind: str) -> np.ndarray:
    """Gradient of the loss at the output row's pre-activation (fused head)."""
    n, k = probs.shape
    if kind == "softmax_cross_entropy":
        return (probs - targets) / n
    return (probs - targets) / (n * k)


def backward(model: Model, caches, targets: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every trainable parameter from train-mode forward caches."""
    spec = model.spec
    p = model.params
    grads: dict[str, np.ndarray] = {}
    probs = caches[-1]["act"]
    targets = _check_one_hot(targets, spec.output_width)
    d = _loss_grad_at_head(probs, targets, spec.loss)  # at output pre-activation

    for i in range(len(spec.layers), 0, -1):
        layer = spec.layers[i - 1]
        cache = caches[i]
        if i < len(spec.layers):
            # d arrives as gradient at this row's post-dropout output
            if "mask" in cache:
                d = d * cache["mask"]
            d = d * _activation_grad(layer.activation, cache["act"])
        if layer.batch_norm:
            d, dgamma, dbeta = _bn_backward(d, p[f"layer{i}.bn.gamma"], cache["bn"])
            grads[f"layer{i}.bn.gamma"] = dgamma
            grads[f"layer{i}.bn.beta"] = dbeta
        grads[f"layer{i}.weight"] = cache["x"].T @ d
        grads[f"layer{i}.bias"] = d.sum(axis=0)
        d = d @ p[f"layer{i}.weight"].T

    cache = caches[0]
    if "mask" in cache:
        d = d * cache["mask"]
    if spec.input_batch_norm:
        d, dgamma, dbeta = _bn_backward(d, p["input.bn.gamma"], cache["bn"])
        grads["input.bn.gamma"] = dgamma
        grads["input.bn.beta"] = dbeta
    return grads


def init_moments(model: Model) -> dict[str, np.ndarray]:
    out = {}
    for name, param in model.params.items():
        out[f"adam.m.{name}"] = np.zeros_like(param)
        out[f"adam.v.{name}"] = np.zeros_like(param)
    return out


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              moments: dict[str, np.ndarray], t: int, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place. `t` is 1-based."""
    if t < 1:
        raise ValueError("adam step index t must be >= 1")
    b1c = 1.0 - cfg.beta1**t
    b2c = 1.0 - cfg.beta2**t
    for name, g in grads.items():
        m = moments[f"adam.m.{name}"]
        v = moments[f"adam.v.{name}"]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        params[name] -= cfg.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + cfg.eps)


def _top1_micro_f1(probs: np.ndarray, targets_one_hot: np.ndarray) -> float:
    # micro F1 equals accuracy for single-label multiclass
    return float((probs.argmax(axis=1) == targets_one_hot.argmax(axis=1)).mean())


def _batch_slices(n: int, batch_size: int, fold_trailing_one: bool) -> list[slice]:
    slices = [slice(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]
    if fold_trailing_one and len(slices) > 1 and slices[-1].stop - slices[-1].start == 1:
        # a trailing batch of one is ill-defined under batch norm; merge it
        merged = slice(slices[-2].start, slices[-1].stop)
        slices = slices[:-2] + [merged]
    return slices


def train(model: Model, features: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
          val_features: np.ndarray | None = None,
          val_targets: np.ndarray | None = None) -> Checkpoint:
    """Seeded mini-batch Adam training with validation-based selection.

    Per epoch: shuffle, run every mini-batch (an incomplete final batch is
    kept; a trailing batch of exactly one sample is folded into the previous
    batch when the model has batch norm), record (mean per-sample train loss,
    validation top-1 micro F1). The returned checkpoint is the model at the
    epoch with the best validation score (earliest on ties); without a
    validation set, the final epoch.
    """
    x = np.asarray(features, dtype=float)
    y = _check_one_hot(targets, model.spec.output_width)
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} feature rows vs {y.shape[0]} target rows")
    if x.shape[0] == 1 and model.spec.has_batch_norm():
        raise ValueError("cannot train a batch-norm model on a single sample")
    have_val = val_features is not None and val_targets is not None and len(val_features) > 0
    if have_val:
        val_x = np.asarray(val_features, dtype=float)
        val_y = _check_one_hot(val_targets, model.spec.output_width)

    rng = derive_rng(cfg.seed, "nn-train")
    moments = init_moments(model)
    fold = model.spec.has_batch_norm()
    n = x.shape[0]
    t = 0
    history: list[tuple[float, float]] = []
    best = (-np.inf, 0)  # (val score, epoch)
    snapshot: tuple | None = None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for sl in _batch_slices(n, cfg.batch_size, fold):
            idx = order[sl]
            _, caches = forward(model, x[idx], mode="train", rng=rng, update_running=True)
            probs = caches[-1]["out"]
            loss_sum += loss_value(probs, y[idx], model.spec.loss) * idx.shape[0]
            grads = backward(model, caches, y[idx])
            t += 1
            adam_step(model.params, grads, moments, t, cfg)
        val_score = _top1_micro_f1(predict(model, val_x), val_y) if have_val else float("nan")
        history.append((loss_sum / n, val_score))
        take = (have_val and val_score > best[0]) or (not have_val and epoch == cfg.epochs)
        if take:
            best = (val_score, epoch)
            snapshot = (copy.deepcopy(model.params), copy.deepcopy(model.running),
                        copy.deepcopy(moments), t, epoch)

    params, running, moments, step, best_epoch = snapshot
    return Checkpoint(Model(model.spec, params, running), moments, step, best_epoch, history)


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "input_width": spec.input_width,
        "layers": [
            {"width": l.width, "activation": l.activation,
             "dropout_rate": l.dropout_rate, "batch_norm": l.batch_norm}
            for l in spec.layers
        ],
        "loss": spec.loss,
        "seed": spec.seed,
        "input_dropout": spec.input_dropout,
        "input_batch_norm": spec.input_batch_norm,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        input_width=int(d["input_width"]),
        layers=tuple(
            LayerSpec(int(l["width"]), l["activation"], float(l["dropout_rate"]),
                      bool(l["batch_norm"]))
            for l in d["layers"]
        ),
        loss=d["loss"],
        seed=int(d["seed"]),
        input_dropout=float(d["input_dropout"]),
        input_batch_norm=bool(d["input_batch_norm"]),
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Persist as a tensor archive (float32 payloads) with a spec manifest."""
    tensors = []
    for name, arr in ckpt.model.params.items():
        tensors.append((f"param.{name}", arr))
    for name, arr in ckpt.model.running.items():
        tensors.append((f"running.{name}", arr))
    for name, arr in ckpt.moments.items():
        tensors.append((name, arr))
    meta = {
        "kind": "dense_nn_checkpoint",
        "spec": spec_to_dict(ckpt.model.spec),
        "step": ckpt.step,
        "best_epoch": ckpt.best_epoch,
        "history": [[float(a), float(b)] for a, b in ckpt.history],
    }
    from .archive import write_archive

    write_archive(path, sorted(tensors), meta)


def load_checkpoint(path) -> Checkpoint:
    from .archive import read_archive

    arc = read_archive(path)
    spec = spec_from_dict(arc.meta["spec"])
    params, running, moments = {}, {}, {}
    for name in arc.names():
        arr = arc[name].astype(float)
        if name.startswith("param."):
            params[name[len("param."):]] = arr
        elif name.startswith("running."):
            running[name[len("running."):]] = arr
        elif name.startswith("adam."):
            moments[name] = arr
    history = [(float(a), float(b)) for a, b in arc.meta.get("history", [])]
    return Checkpoint(Model(spec, params, running), moments, int(arc.meta["step"]),
                      int(arc.meta["best_epoch"]), history)


def gradient_check(model: Model, features: np.ndarray, targets: np.ndarray,
                   h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Dropout is disabled and batch norm runs in train mode on the fixed batch,
    so the loss is a deterministic function of the parameters. The relative
    error denominator is floored at 1e-6: parameters with (near-)zero true
    gradient — e.g. an affine bias cancelled by the batch norm right after
    it — otherwise amplify double-rounding noise of the loss (~1e-11 per
    central difference) into spurious large ratios.
    """
    x = np.asarray(features, dtype=float)
    y = _check_one_hot(targets, model.spec.output_width)

    def loss_at_params() -> float:
        _, caches = forward(model, x, mode="train", dropout_on=False)
        return loss_value(caches[-1]["out"], y, model.spec.loss)

    _, caches = forward(model, x, mode="train", dropout_on=False)
    analytic = backward(model, caches, y)

    worst = 0.0
    for name, grad in analytic.items():
        param = model.params[name]
        flat_p = param.reshape(-1)
        flat_g = grad.reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + h
            up = loss_at_params()
            flat_p[j] = orig - h
            down = loss_at_params()
            flat_p[j] = orig
            numeric = (up - down) / (2.0 * h)
            a = flat_g[j]
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6)
            worst = max(worst, rel)
    return worst
