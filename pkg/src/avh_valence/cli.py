"""Command-line surface: synth, featurize, train, evaluate, report.

Each command is deterministic given its seed and inputs; outputs are guarded
against accidental overwrite (pass --force to replace). Exit codes: 0 on
success, 1 on runtime/I-O failure, 2 on usage errors. A JSON config file
(--config) supplies defaults that explicit flags override. Heavy imports
happen after --threads is applied so the cap reaches the numeric libraries.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

COHORT_FILES = ("sensing.csv", "ema.csv", "diaries.tensors")
FEATURE_MODES = ("audio-text", "sensing-vggish", "sensing-rocket", "all")
MODEL_CHOICES = ("audio_text", "sensing", "hybrid", "overall", "all")
QUESTION_CHOICES = ("negativeness", "loudness", "control", "power", "all")
MANIFEST_FILE = "train-manifest.json"

# feature mode -> (archive stem, blocks it carries)
MODE_BLOCKS = {
    "audio-text": ("audio_text", ("audio", "text")),
    "sensing-vggish": ("sensing_vggish", ("sensing_vggish",)),
    "sensing-rocket": ("sensing_rocket", ("sensing_rocket",)),
}


def _apply_thread_cap(threads: int | None) -> None:
    if threads is None:
        return
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avh-valence",
        description="Seeded pipeline for valence prediction from mobile data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of default values for this command's flags")
        p.add_argument("--threads", type=int, help="cap numeric-library threads")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out", required=True, help="output directory for cohort files")
    p.add_argument("--participants", type=int, default=40)
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--compliance", type=float, default=0.55,
                   help="probability an EMA prompt is answered")
    p.add_argument("--gps-interval", type=int, default=600, help="seconds between GPS fixes")
    p.add_argument("--amp-interval", type=int, default=60,
                   help="seconds between audio-amplitude samples")
    common(p)

    p = sub.add_parser("featurize", help="compute feature archives from a cohort")
    p.add_argument("--cohort", required=True, help="directory with cohort files")
    p.add_argument("--out", required=True, help="directory for feature archives")
    p.add_argument("--mode", choices=FEATURE_MODES, default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width-divisor", type=int, default=1,
                   help="divide every embedder layer width by this")
    p.add_argument("--kernels", type=int, default=64, help="random kernels per stream")
    p.add_argument("--epsilon", type=float, default=0.1, help="sonification noise scale")
    p.add_argument("--sample-rate", type=int, default=44100, help="sonification sample rate")
    p.add_argument("--dbscan-eps", type=float, default=100.0, help="DBSCAN radius in meters")
    p.add_argument("--dbscan-min-samples", type=int, default=5)
    p.add_argument("--places-per-window", action="store_true",
                   help="replicate the window-level place count across hours")
    p.add_argument("--weights", help="embedder weights archive")
    p.add_argument("--random-init", action="store_true",
                   help="use seeded random embedder weights instead of --weights")
    common(p)

    p = sub.add_parser("train", help="train models per question")
    p.add_argument("--cohort", required=True)
    p.add_argument("--features", required=True, help="directory with feature archives")
    p.add_argument("--out", required=True, help="directory for checkpoints")
    p.add_argument("--model", choices=MODEL_CHOICES, default="all")
    p.add_argument("--question", choices=QUESTION_CHOICES, default="all")
    p.add_argument("--sensing-variant", choices=("vggish", "rocket"), default="vggish")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, help="override the per-model epoch count")
    p.add_argument("--batch-size", type=int, help="override the per-model batch size")
    p.add_argument("--learning-rate", type=float, help="override the Adam learning rate")
    common(p)

    p = sub.add_parser("evaluate", help="score trained checkpoints")
    p.add_argument("--cohort", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--models", required=True, help="directory with checkpoints")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    common(p)

    p = sub.add_parser("report", help="emit the consolidated report")
    p.add_argument("--models", required=True, help="directory with evaluation results")
    p.add_argument("--out", required=True, help="report file path")
    common(p)

    return parser


def _merge_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse twice: config values become defaults, explicit flags win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        with open(known.config, encoding="utf-8") as fh:
            defaults = json.load(fh)
        if not isinstance(defaults, dict):
            raise ValueError(f"{known.config}: config must be a JSON object")
        parser.set_defaults(**defaults)
        for action in parser._subparsers._group_actions:
            for sp in action.choices.values():
                dests = {a.dest for a in sp._actions}
                sp.set_defaults(**{k: v for k, v in defaults.items() if k in dests})
    return parser.parse_args(argv)


def _guard_paths(paths, force: bool) -> None:
    existing = [p for p in paths if Path(p).exists()]
    if existing and not force:
        raise FileExistsError(f"{existing[0]} exists; pass --force to overwrite")


def _load_cohort(path: str):
    from .cohort import load_cohort

    cohort_dir = Path(path)
    for name in COHORT_FILES:
        if not (cohort_dir / name).exists():
            raise FileNotFoundError(f"cohort file {cohort_dir / name} not found")
    return load_cohort(cohort_dir)


def cmd_synth(args) -> int:
    from .cohort import write_cohort
    from .synthetic import SynthConfig, generate_cohort

    out = Path(args.out)
    _guard_paths([out / f for f in COHORT_FILES], args.force)
    cfg = SynthConfig(
        n_participants=args.participants,
        n_days=args.days,
        seed=args.seed,
        compliance=args.compliance,
        gps_interval_s=args.gps_interval,
        amp_interval_s=args.amp_interval,
    )
    cohort = generate_cohort(cfg)
    paths = write_cohort(cohort, out, force=True)
    n_hear = sum(1 for e in cohort.emas if e.hearing)
    print(f"wrote {', '.join(str(p) for p in paths)}")
    print(f"{args.participants} participants, {len(cohort.emas)} EMA responses "
          f"({n_hear} hearing-positive)")
    return 0


def _feature_path(out_dir, mode: str) -> Path:
    return Path(out_dir) / f"features-{MODE_BLOCKS[mode][0]}.tensors"


def cmd_featurize(args) -> int:
    from .embedder import load_weights
    from .features import (FeaturizeConfig, cohort_content_digest, featurize_cohort,
                           read_feature_store, write_feature_store)

    modes = [m for m in MODE_BLOCKS] if args.mode == "all" else [args.mode]
    needs_embedder = any(m in ("audio-text", "sensing-vggish") for m in modes)
    if needs_embedder and not args.random_init and not args.weights:
        raise UsageError("embedder weights required: pass --weights FILE or --random-init")

    config = FeaturizeConfig(
        seed=args.seed,
        width_divisor=args.width_divisor,
        n_kernels=args.kernels,
        epsilon=args.epsilon,
        sample_rate_hz=args.sample_rate,
        dbscan_eps_m=args.dbscan_eps,
        dbscan_min_samples=args.dbscan_min_samples,
        places_per_window=args.places_per_window,
    )
    weights = None
    if needs_embedder and args.weights:
        weights = load_weights(args.weights, config.embedder_config())

    cohort = _load_cohort(args.cohort)
    digest = cohort_content_digest(cohort)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stale, fresh = [], []
    for mode in modes:
        path = _feature_path(out, mode)
        if path.exists():
            try:
                cached = read_feature_store(path)
            except Exception:
                cached = None
            if (cached is not None and cached.cohort_digest == digest
                    and cached.config == config):
                fresh.append(mode)
                continue
        stale.append(mode)
    if fresh:
        print(f"up to date: {', '.join(fresh)}")
    if not stale:
        return 0
    _guard_paths([_feature_path(out, m) for m in stale], args.force)

    wanted = tuple({b for m in stale for b in MODE_BLOCKS[m][1]})
    store = featurize_cohort(cohort, config, weights=weights, blocks=wanted)
    for mode in stale:
        path = _feature_path(out, mode)
        sub = store.subset(MODE_BLOCKS[mode][1])
        write_feature_store(path, sub)
        widths = ", ".join(f"{n}={a.shape[1]}" for n, a in sorted(sub.blocks.items()))
        print(f"wrote {path} ({len(sub)} instances; {widths})")
    return 0


def _checkpoint_path(models_dir, kind: str, question: str) -> Path:
    return Path(models_dir) / f"checkpoint-{kind}-{question}.tensors"


def _read_manifest(models_dir) -> dict:
    path = Path(models_dir) / MANIFEST_FILE
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    return {"runs": {}}


def _write_manifest(models_dir, manifest: dict) -> None:
    with open(Path(models_dir) / MANIFEST_FILE, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_features(features_dir, modes) -> dict:
    from .features import read_feature_store

    stores = {}
    for mode in modes:
        path = _feature_path(features_dir, mode)
        if not path.exists():
            raise FileNotFoundError(
                f"feature archive {path} not found; run `featurize --mode {mode}` first"
            )
        stores[mode] = read_feature_store(path)
    return stores


def _merge_stores(stores: dict):
    """Single FeatureStore holding every block of the per-mode archives."""
    from .features import FeatureStore

    items = list(stores.values())
    base = items[0]
    blocks = {}
    for st in items:
        if st.keys != base.keys:
            raise ValueError("feature archives disagree on instances; refeaturize together")
        if st.cohort_digest != base.cohort_digest or st.config != base.config:
            raise ValueError("feature archives come from different cohorts or configs")
        blocks.update(st.blocks)
    return FeatureStore(base.keys, blocks, base.config, base.cohort_digest)


def _modes_for(model: str, variant: str) -> list[str]:
    modes = set()
    for kind in (("audio_text", "sensing", "hybrid", "overall") if model == "all" else [model]):
        if kind in ("audio_text", "hybrid", "overall"):
            modes.add("audio-text")
        if kind in ("sensing", "hybrid", "overall"):
            modes.add(f"sensing-{variant}")
    return sorted(modes)


def cmd_train(args) -> int:
    from . import harness
    from .features import cohort_content_digest
    from .nn import build_model, load_checkpoint, save_checkpoint, train

    kinds = ["audio_text", "sensing", "hybrid", "overall"] if args.model == "all" else [args.model]
    questions = list(QUESTION_CHOICES[:-1]) if args.question == "all" else [args.question]

    cohort = _load_cohort(args.cohort)
    store = _merge_stores(_load_features(args.features, _modes_for(args.model, args.sensing_variant)))
    if store.cohort_digest != cohort_content_digest(cohort):
        raise ValueError("feature archives were built from a different cohort; rerun featurize")

    split = harness.split_cohort(cohort)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _guard_paths([_checkpoint_path(out, k, q) for k in kinds for q in questions], args.force)

    manifest = _read_manifest(out)
    labels = {q: {(e.participant_id, e.timestamp): e.ordinal(q) for e in cohort.emas if e.hearing}
              for q in questions}
    keys = {part: split.keys(part) for part in harness.SPLIT_PARTS}

    for question in questions:
        y = {p: [labels[question][k] for k in keys[p]] for p in harness.SPLIT_PARTS}
        targets = {p: harness.one_hot_matrix(y[p]) if y[p] else None for p in harness.SPLIT_PARTS}
        trained: dict[str, object] = {}
        for kind in kinds:
            if kind == "hybrid":
                parents = {}
                for parent in ("audio_text", "sensing"):
                    if parent in trained:
                        parents[parent] = trained[parent]
                        continue
                    path = _checkpoint_path(out, parent, question)
                    if not path.exists():
                        raise FileNotFoundError(
                            f"hybrid needs a trained {parent} checkpoint for {question}; "
                            f"run `train --model {parent} --question {question}` first "
                            f"(missing {path})"
                        )
                    parents[parent] = load_checkpoint(path).model
                x = {
                    part: harness.hybrid_inputs(parents, {
                        k: harness.assemble_features(store, keys[part], k, args.sensing_variant)
                        for k in parents
                    })
                    for part in harness.SPLIT_PARTS
                }
            else:
                x = {
                    part: harness.assemble_features(store, keys[part], kind, args.sensing_variant)
                    for part in harness.SPLIT_PARTS
                }
            spec = harness.model_spec(
                kind, x["train"].shape[1],
                seed=harness.model_seed(args.seed, question, kind, "init"),
            )
            cfg = harness.train_config(kind, seed=harness.model_seed(args.seed, question, kind, "train"))
            if args.epochs or args.batch_size or args.learning_rate:
                import dataclasses
                cfg = dataclasses.replace(
                    cfg,
                    epochs=args.epochs or cfg.epochs,
                    batch_size=args.batch_size or cfg.batch_size,
                    learning_rate=args.learning_rate or cfg.learning_rate,
                )
            ckpt = train(
                build_model(spec), x["train"], targets["train"], cfg,
                val_features=x["validation"] if y["validation"] else None,
                val_targets=targets["validation"] if y["validation"] else None,
            )
            if kind in ("audio_text", "sensing"):
                trained[kind] = ckpt.model
            path = _checkpoint_path(out, kind, question)
            save_checkpoint(path, ckpt)
            manifest["runs"][f"{kind}/{question}"] = {
                "kind": kind,
                "question": question,
                "seed": args.seed,
                "sensing_variant": args.sensing_variant,
                "split_hash": split.membership_hash(),
                "cohort_digest": store.cohort_digest,
                "best_epoch": ckpt.best_epoch,
                "final_train_loss": ckpt.history[-1][0] if ckpt.history else None,
            }
            print(f"trained {kind}/{question}: best epoch {ckpt.best_epoch}, "
                  f"checkpoint {path}")
    _write_manifest(out, manifest)
    return 0


def cmd_evaluate(args) -> int:
    from . import harness
    from .features import cohort_content_digest
    from .metrics import chance_baseline
    from .nn import load_checkpoint

    manifest = _read_manifest(args.models)
    if not manifest["runs"]:
        raise FileNotFoundError(
            f"no {MANIFEST_FILE} entries under {args.models}; run `train` first"
        )
    cohort = _load_cohort(args.cohort)
    variants = {run["sensing_variant"] for run in manifest["runs"].values()}
    modes = sorted({m for v in variants for m in _modes_for("all", v)})
    store = _merge_stores(_load_features(args.features, modes))
    if store.cohort_digest != cohort_content_digest(cohort):
        raise ValueError("feature archives were built from a different cohort; rerun featurize")

    split = harness.split_cohort(cohort)
    keys = split.keys(args.split)
    if not keys:
        raise ValueError(f"{args.split} split is empty for this cohort")

    results = {"split": args.split, "split_hash": split.membership_hash(), "questions": {}}
    by_question: dict[str, dict] = {}
    for name, run in sorted(manifest["runs"].items()):
        by_question.setdefault(run["question"], {})[run["kind"]] = run

    for question, runs in sorted(by_question.items()):
        labels = {(e.participant_id, e.timestamp): e.ordinal(question)
                  for e in cohort.emas if e.hearing}
        y = [labels[k] for k in keys]
        entry = {"chance": chance_baseline(y), "models": {}}
        for kind, run in sorted(runs.items()):
            variant = run["sensing_variant"]
            ckpt = load_checkpoint(_checkpoint_path(args.models, kind, question))
            if kind == "hybrid":
                parents = {
                    p: load_checkpoint(_checkpoint_path(args.models, p, question)).model
                    for p in ("audio_text", "sensing")
                }
                x = harness.hybrid_inputs(parents, {
                    p: harness.assemble_features(store, keys, p, variant) for p in parents
                })
            else:
                x = harness.assemble_features(store, keys, kind, variant)
            probs = harness.evaluate_probs(ckpt.model, x)
            from .metrics import f1_scores

            entry["models"][kind] = {
                "f1": f1_scores(probs, y),
                "sensing_variant": variant,
                "best_epoch": ckpt.best_epoch,
            }
        results["questions"][question] = entry

    _print_score_tables(results)
    out_path = Path(args.models) / f"eval-{args.split}.json"
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(results, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"\nwrote {out_path}")
    return 0


def _print_score_tables(results: dict) -> None:
    for question, entry in sorted(results["questions"].items()):
        print(f"\n{question} ({results['split']} split)")
        print(f"  {'model':12s} {'top1-micro':>10s} {'top1-macro':>10s} "
              f"{'top2-micro':>10s} {'top2-macro':>10s}")
        chance = entry["chance"]
        print(f"  {'chance':12s} {chance['top1']['micro']:10.3f} {chance['top1']['macro']:10.3f} "
              f"{chance['top2']['micro']:10.3f} {chance['top2']['macro']:10.3f}")
        for kind, res in sorted(entry["models"].items()):
            f1 = res["f1"]
            print(f"  {kind:12s} {f1['top1']['micro']:10.3f} {f1['top1']['macro']:10.3f} "
                  f"{f1['top2']['micro']:10.3f} {f1['top2']['macro']:10.3f}")


def cmd_report(args) -> int:
    from .harness import emit_report

    models_dir = Path(args.models)
    eval_path = models_dir / "eval-test.json"
    if not eval_path.exists():
        raise FileNotFoundError(
            f"{eval_path} not found; run `evaluate --split test` first"
        )
    with open(eval_path, encoding="utf-8") as fh:
        results = json.load(fh)
    manifest = _read_manifest(models_dir)
    report = {
        "split": {"name": results["split"], "hash": results["split_hash"]},
        "questions": results["questions"],
        "runs": manifest["runs"],
    }
    _guard_paths([args.out], args.force)
    emit_report(report, args.out)
    print(f"wrote {args.out}")
    return 0


class UsageError(Exception):
    pass


COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = _merge_config(parser, sys.argv[1:] if argv is None else list(argv))
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        _apply_thread_cap(args.threads)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
