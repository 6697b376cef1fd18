"""Experiment harness: split, per-question model runs, fusion, and reports.

Trains the four model kinds for each valence question on a featurized
cohort: `audio_text` (diary audio embedding ‖ transcript vector), `sensing`
(either embedded sonified streams or random-kernel features), `hybrid` (the
two parents' 32-wide hidden activations concatenated), and `overall` (all
blocks concatenated). One temporal split, computed from the EMA timestamps,
is reused for every question and model kind.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .cohort import Cohort, QUESTIONS
from .features import FeatureStore
from .metrics import N_CLASSES, chance_baseline, confusion_matrix, f1_scores, normalize_rows, top1_predictions
from .nn import Checkpoint, LayerSpec, Model, ModelSpec, TrainConfig, build_model, extract_activations, predict, train
from .seeding import derive_int_seed

MODEL_KINDS = ("audio_text", "sensing", "hybrid", "overall")
SENSING_VARIANTS = ("vggish", "rocket")
SPLIT_PARTS = ("train", "validation", "test")
MIN_SPLIT_INSTANCES = 5  # fewer instances than this -> all train
HYBRID_PARENT_LAYER = 2  # 0-based index of the 32-wide row in both parents


@dataclass(frozen=True)
class LabeledInstance:
    participant_id: str
    ema_timestamp: int
    question: str
    ordinal: int

    def __post_init__(self):
        if self.question not in QUESTIONS:
            raise ValueError(f"unknown question {self.question!r}")
        if self.ordinal not in range(N_CLASSES):
            raise ValueError(f"ordinal {self.ordinal} outside 0..{N_CLASSES - 1}")

    @property
    def key(self) -> tuple[str, int]:
        return (self.participant_id, self.ema_timestamp)

    def one_hot(self) -> np.ndarray:
        return one_hot(self.ordinal)


def one_hot(ordinal: int) -> np.ndarray:
    if ordinal not in range(N_CLASSES):
        raise ValueError(f"ordinal {ordinal} outside 0..{N_CLASSES - 1}")
    v = np.zeros(N_CLASSES)
    v[ordinal] = 1.0
    return v


def one_hot_matrix(ordinals) -> np.ndarray:
    return np.stack([one_hot(int(o)) for o in ordinals])


def labeled_instances(cohort: Cohort, question: str) -> list[LabeledInstance]:
    """Hearing-positive reports as labeled instances, sorted by (participant, time)."""
    out = [
        LabeledInstance(e.participant_id, e.timestamp, question, e.ordinal(question))
        for e in cohort.emas
        if e.hearing
    ]
    out.sort(key=lambda i: i.key)
    return out


@dataclass(frozen=True)
class SplitAssignment:
    """Per-participant ordered timestamps for train/validation/test."""

    train: dict[str, tuple[int, ...]]
    validation: dict[str, tuple[int, ...]]
    test: dict[str, tuple[int, ...]]

    def part(self, name: str) -> dict[str, tuple[int, ...]]:
        if name not in SPLIT_PARTS:
            raise ValueError(f"unknown split part {name!r}")
        return getattr(self, "validation" if name == "validation" else name)

    def keys(self, name: str) -> list[tuple[str, int]]:
        """Flattened (participant, timestamp) keys, participant-major."""
        per_pid = self.part(name)
        return [(pid, ts) for pid in sorted(per_pid) for ts in per_pid[pid]]

    def counts(self) -> dict[str, int]:
        return {name: len(self.keys(name)) for name in SPLIT_PARTS}

    def membership_hash(self) -> str:
        lines = []
        for name in SPLIT_PARTS:
            lines.extend(f"{pid},{ts},{name}" for pid, ts in self.keys(name))
        lines.sort()
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def temporal_split(keys) -> SplitAssignment:
    """Per participant, ascending by time: first 60% train, next 20% validation, rest test.

    Proportions use floor(0.6 n) / floor(0.2 n); participants with fewer than
    MIN_SPLIT_INSTANCES instances contribute everything to train (so a single
    instance lands in train). Input order is irrelevant.
    """
    by_pid: dict[str, list[int]] = {}
    for pid, ts in keys:
        by_pid.setdefault(pid, []).append(ts)
    train, validation, test = {}, {}, {}
    for pid, stamps in by_pid.items():
        stamps = sorted(stamps)
        n = len(stamps)
        if n < MIN_SPLIT_INSTANCES:
            n_train, n_val = n, 0
        else:
            n_train, n_val = int(n * 0.6), int(n * 0.2)
        train[pid] = tuple(stamps[:n_train])
        validation[pid] = tuple(stamps[n_train : n_train + n_val])
        test[pid] = tuple(stamps[n_train + n_val :])
    return SplitAssignment(train, validation, test)


def split_cohort(cohort: Cohort) -> SplitAssignment:
    """The shared split over all hearing-positive EMA timestamps."""
    return temporal_split((e.participant_id, e.timestamp) for e in cohort.emas if e.hearing)


# (batch_size, epochs) per model kind
TRAIN_SETTINGS = {
    "audio_text": (64, 80),
    "sensing": (42, 120),
    "hybrid": (32, 50),
    "overall": (64, 150),
}


def model_spec(kind: str, input_width: int, seed: int = 0) -> ModelSpec:
    """The four dense architectures; hidden widths fixed, input width adapts."""
    if kind == "audio_text":
        return ModelSpec(
            input_width,
            (
                LayerSpec(512, "relu", 0.4, True),
                LayerSpec(128, "relu", 0.2, True),
                LayerSpec(32, "relu", 0.0, True),
                LayerSpec(16, "relu", 0.0, True),
                LayerSpec(8, "relu", 0.0, True),
                LayerSpec(4, "sigmoid", 0.0, False),
            ),
            "per_class_sigmoid_cross_entropy",
            seed=seed,
            input_dropout=0.6,
            input_batch_norm=True,
        )
    if kind == "sensing":
        return ModelSpec(
            input_width,
            (
                LayerSpec(512, "tanh", 0.2, True),
                LayerSpec(128, "tanh", 0.2, True),
                LayerSpec(32, "tanh", 0.0, True),
                LayerSpec(16, "tanh", 0.0, True),
                LayerSpec(4, "sigmoid", 0.0, False),
            ),
            "per_class_sigmoid_cross_entropy",
            seed=seed,
            input_dropout=0.5,
            input_batch_norm=True,
        )
    if kind == "hybrid":
        return ModelSpec(
            input_width,
            (
                LayerSpec(32, "tanh", 0.3, True),
                LayerSpec(16, "relu", 0.2, True),
                LayerSpec(4, "softmax", 0.0, False),
            ),
            "softmax_cross_entropy",
            seed=seed,
            input_dropout=0.5,
            input_batch_norm=True,
        )
    if kind == "overall":
        return ModelSpec(
            input_width,
            (
                LayerSpec(896, "relu", 0.5, True),
                LayerSpec(596, "relu", 0.2, True),
                LayerSpec(128, "relu", 0.3, True),
                LayerSpec(32, "relu", 0.1, True),
                LayerSpec(16, "relu", 0.0, True),
                LayerSpec(8, "relu", 0.0, True),
                LayerSpec(4, "sigmoid", 0.0, False),
            ),
            "per_class_sigmoid_cross_entropy",
            seed=seed,
            input_dropout=0.6,
            input_batch_norm=True,
        )
    raise ValueError(f"unknown model kind {kind!r}")


def train_config(kind: str, seed: int = 0) -> TrainConfig:
    batch, epochs = TRAIN_SETTINGS[kind]
    return TrainConfig(batch_size=batch, epochs=epochs, seed=seed)


def sensing_block_name(variant: str) -> str:
    if variant not in SENSING_VARIANTS:
        raise ValueError(f"unknown sensing variant {variant!r}")
    return f"sensing_{variant}"


def assemble_features(store: FeatureStore, keys: list[tuple[str, int]], mode: str,
                      sensing_variant: str = "vggish") -> np.ndarray:
    """Feature matrix for `keys` under `mode`; raises naming any missing instance."""
    sensing = sensing_block_name(sensing_variant)
    if mode == "audio_text":
        parts = ("audio", "text")
    elif mode == "sensing":
        parts = (sensing,)
    elif mode == "overall":
        parts = ("audio", "text", sensing)
    else:
        raise ValueError(f"unknown feature mode {mode!r}")
    return np.concatenate([store.rows(p, keys) for p in parts], axis=1).astype(np.float64)


def hybrid_inputs(parents: dict[str, Model], parent_features: dict[str, np.ndarray]) -> np.ndarray:
    """Concatenated eval-mode 32-wide activations of the two trained parents."""
    blocks = [
        extract_activations(parents[kind], parent_features[kind], HYBRID_PARENT_LAYER)
        for kind in ("audio_text", "sensing")
    ]
    return np.concatenate(blocks, axis=1)


def model_seed(master_seed: int, question: str, kind: str, role: str) -> int:
    return derive_int_seed(master_seed, "model", question, kind, role)


@dataclass
class QuestionRun:
    question: str
    checkpoints: dict[str, Checkpoint]
    entries: dict[str, dict]
    chance: dict
    split_hashes: dict[str, str]


def evaluate_probs(model: Model, x: np.ndarray) -> np.ndarray:
    """Eval-mode class probabilities, row-normalized for the sigmoid heads."""
    probs = predict(model, x)
    if model.spec.layers[-1].activation == "sigmoid":
        probs = normalize_rows(probs)
    return probs


def run_question(cohort: Cohort, store: FeatureStore, split: SplitAssignment,
                 question: str, master_seed: int,
                 sensing_variant: str = "vggish") -> QuestionRun:
    """Train and evaluate all four model kinds for one question."""
    labels = {
        (e.participant_id, e.timestamp): e.ordinal(question) for e in cohort.emas if e.hearing
    }
    keys = {part: split.keys(part) for part in SPLIT_PARTS}
    y = {part: np.array([labels[k] for k in keys[part]], dtype=int) for part in SPLIT_PARTS}
    targets = {part: one_hot_matrix(y[part]) for part in SPLIT_PARTS}

    checkpoints: dict[str, Checkpoint] = {}
    entries: dict[str, dict] = {}
    split_hashes: dict[str, str] = {}
    features: dict[str, dict[str, np.ndarray]] = {}

    for kind in ("audio_text", "sensing", "overall", "hybrid"):
        if kind == "hybrid":
            parents = {k: checkpoints[k].model for k in ("audio_text", "sensing")}
            x = {
                part: hybrid_inputs(parents, {k: features[k][part] for k in parents})
                for part in SPLIT_PARTS
            }
        else:
            x = {
                part: assemble_features(store, keys[part], kind, sensing_variant)
                for part in SPLIT_PARTS
            }
        features[kind] = x

        spec = model_spec(kind, x["train"].shape[1], seed=model_seed(master_seed, question, kind, "init"))
        cfg = train_config(kind, seed=model_seed(master_seed, question, kind, "train"))
        ckpt = train(
            build_model(spec), x["train"], targets["train"], cfg,
            val_features=x["validation"] if len(y["validation"]) else None,
            val_targets=targets["validation"] if len(y["validation"]) else None,
        )
        checkpoints[kind] = ckpt

        probs = evaluate_probs(ckpt.model, x["test"])
        scores = f1_scores(probs, y["test"])
        entries[kind] = {
            "f1": scores,
            "confusion_top1": confusion_matrix(y["test"], top1_predictions(probs)).tolist(),
            "best_epoch": ckpt.best_epoch,
            "n_parameters": sum(int(np.prod(p.shape)) for p in ckpt.model.params.values()),
        }
        split_hashes[kind] = split.membership_hash()

    return QuestionRun(
        question=question,
        checkpoints=checkpoints,
        entries=entries,
        chance=chance_baseline(y["test"]),
        split_hashes=split_hashes,
    )


def run_experiment(cohort: Cohort, store: FeatureStore, master_seed: int,
                   sensing_variant: str = "vggish",
                   questions: tuple[str, ...] = QUESTIONS) -> dict:
    """Full report: every question x model kind on the shared temporal split."""
    split = split_cohort(cohort)
    report = {
        "seed": master_seed,
        "sensing_variant": sensing_variant,
        "featurize_config": dataclasses.asdict(store.config),
        "cohort_digest": store.cohort_digest,
        "split": {"hash": split.membership_hash(), "counts": split.counts()},
        "questions": {},
    }
    for question in questions:
        run = run_question(cohort, store, split, question, master_seed, sensing_variant)
        report["questions"][question] = {
            "chance": run.chance,
            "models": run.entries,
            "split_hashes": run.split_hashes,
        }
    return report


def emit_report(report: dict, path) -> None:
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
