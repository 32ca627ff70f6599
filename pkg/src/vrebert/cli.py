"""Command-line entry point.

Subcommands cover the whole loop: generate a synthetic corpus, train
one stage (s2 learns label statistics only, s3 adds image features),
evaluate recall (plain, zero-shot, or the whole ablation grid), and
print ranked triples for single images.

A dataset directory always holds train.jsonl, test.jsonl, vocab.json,
and, once features exist, train.vrf and test.vrf.  Every subcommand
that writes artifacts also writes a manifest next to them recording
the resolved configuration, seed, inputs, and timing.  Exit codes: 0
on success, 2 for configuration problems (bad flags, malformed
setups), 1 for any other failure this package can diagnose.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from typing import Sequence

import numpy as np

from . import __version__
from .data import (
    DatasetVocab,
    SyntheticConfig,
    attach_features,
    generate_synthetic,
    load_annotations,
    load_features,
    make_zero_shot_split,
    save_annotations,
    save_features,
    synthetic_vocab,
)
from .embedding import Vocabulary
from .encoder import (
    EncoderWeights,
    desk_config,
    fingerprint,
    load_model,
    paper_config,
    save_model,
)
from .errors import ConfigurationError, NotFoundError, VrebertError
from .evaluation import (
    eval_predicate_prediction,
    eval_zero_shot,
    pair_top1_accuracy,
    run_ablation_suite,
)
from .relationship import RelationshipModel, rank_relationships, write_predictions
from .seeding import substream
from .training import TrainConfig, train_language_stage, train_multimodal_stage

PRESETS = ("desk", "paper")
STAGES = ("s2", "s3")
EVAL_TASKS = ("predicate", "zeroshot", "ablation")


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_json(path: str, payload: dict) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, str(path))


def _write_manifest(path, subcommand: str, started: str, config: dict,
                    inputs: dict, outputs: dict, seed: int | None) -> None:
    _write_json(
        str(path),
        {
            "subcommand": subcommand,
            "version": __version__,
            "seed": seed,
            "config": config,
            "inputs": inputs,
            "outputs": outputs,
            "started": started,
            "finished": _utc_now(),
        },
    )


def _dataset_paths(data_dir: str) -> dict[str, str]:
    return {
        "train_ann": os.path.join(data_dir, "train.jsonl"),
        "test_ann": os.path.join(data_dir, "test.jsonl"),
        "train_feat": os.path.join(data_dir, "train.vrf"),
        "test_feat": os.path.join(data_dir, "test.vrf"),
        "vocab": os.path.join(data_dir, "vocab.json"),
        "manifest": os.path.join(data_dir, "manifest.json"),
    }


def _peek_feature_dim(path: str) -> int:
    import struct

    with open(path, "rb") as fh:
        head = fh.read(8)
    if len(head) < 8:
        raise ConfigurationError(f"{path}: not a feature file")
    return struct.unpack("<I", head[4:8])[0]


def _load_dataset(data_dir: str, features_dir: str | None, need_features: bool):
    paths = _dataset_paths(data_dir)
    for key in ("train_ann", "test_ann", "vocab"):
        if not os.path.exists(paths[key]):
            raise ConfigurationError(f"dataset file missing: {paths[key]}")
    vocab = DatasetVocab.load(paths["vocab"])
    train = load_annotations(paths["train_ann"], vocab)
    test = load_annotations(paths["test_ann"], vocab)
    feature_dim = None
    if need_features:
        feat_dir = features_dir or data_dir
        train_feat = os.path.join(feat_dir, "train.vrf")
        test_feat = os.path.join(feat_dir, "test.vrf")
        for p in (train_feat, test_feat):
            if not os.path.exists(p):
                raise ConfigurationError(
                    f"feature file missing: {p} (multimodal runs need .vrf features)"
                )
        feature_dim = _peek_feature_dim(train_feat)
        attach_features(train, load_features(train_feat, feature_dim), feature_dim)
        attach_features(test, load_features(test_feat, feature_dim), feature_dim)
    return vocab, train, test, feature_dim


def _token_vocab(vocab: DatasetVocab) -> Vocabulary:
    return Vocabulary.build(vocab.object_names, vocab.predicate_names)


def _check_vocab_fit(weights: EncoderWeights, tvocab: Vocabulary) -> None:
    if weights.config.vocab_size != len(tvocab):
        raise ConfigurationError(
            f"snapshot vocab size {weights.config.vocab_size} "
            f"does not match dataset vocab size {len(tvocab)}"
        )


def _build_config(args, vocab: DatasetVocab, feature_dim: int, tvocab: Vocabulary):
    maker = desk_config if args.preset == "desk" else paper_config
    if args.preset == "paper":
        print(
            "warning: the paper preset (768 wide, 12 layers) is far too slow "
            "for CPU-scale experiments; expect hours per epoch",
            file=sys.stderr,
        )
    overrides = {}
    if args.position_mode is not None:
        overrides["position_mode"] = args.position_mode
    if args.no_image_pos:
        overrides["use_image_pos"] = False
    if args.freeze_projection:
        overrides["train_feature_projection"] = False
    return maker(
        num_predicates=vocab.num_predicates,
        feature_dim=feature_dim,
        vocab_size=len(tvocab),
        **overrides,
    )


def _config_dict(config) -> dict:
    return {
        "hidden_dim": config.hidden_dim,
        "num_heads": config.num_heads,
        "num_layers": config.num_layers,
        "ff_dim": config.ff_dim,
        "dropout": config.dropout,
        "num_predicates": config.num_predicates,
        "feature_dim": config.feature_dim,
        "vocab_size": config.vocab_size,
        "rel_clip": config.rel_clip,
        "position_mode": config.position_mode,
        "rel_table_mode": config.rel_table_mode,
        "use_image_pos": config.use_image_pos,
        "train_feature_projection": config.train_feature_projection,
    }


# ---------------------------------------------------------------------------
# subcommands


def _cmd_generate(args) -> int:
    started = _utc_now()
    config = SyntheticConfig(
        num_images=args.images,
        num_categories=args.categories,
        seed=args.seed,
        feature_dim=args.feature_dim,
        pairs_per_image=args.pairs_per_image,
    )
    split = generate_synthetic(config)
    vocab = synthetic_vocab(args.categories)
    os.makedirs(args.out, exist_ok=True)
    paths = _dataset_paths(args.out)
    save_annotations(paths["train_ann"], split.train)
    save_annotations(paths["test_ann"], split.test)
    for key, records in (("train_feat", split.train), ("test_feat", split.test)):
        blocks = {
            r.image_id: np.stack([d.feature for d in r.detections]) for r in records
        }
        save_features(paths[key], blocks, config.feature_dim)
    vocab.save(paths["vocab"])
    _write_manifest(
        paths["manifest"],
        "generate",
        started,
        config={
            "images": args.images,
            "categories": args.categories,
            "feature_dim": args.feature_dim,
            "pairs_per_image": args.pairs_per_image,
        },
        inputs={},
        outputs={
            "directory": args.out,
            "train_images": len(split.train),
            "test_images": len(split.test),
            "zero_shot_instances": len(split.zero_shot_test),
        },
        seed=args.seed,
    )
    print(
        f"wrote {len(split.train)} train / {len(split.test)} test images to {args.out} "
        f"({len(split.zero_shot_test)} zero-shot test relationships)"
    )
    return 0


def _cmd_train(args) -> int:
    started = _utc_now()
    need_features = args.stage == "s3"
    vocab, train, test, feature_dim = _load_dataset(args.data, args.features, need_features)
    tvocab = _token_vocab(vocab)

    if args.init is not None:
        if args.stage == "s2":
            raise ConfigurationError("--init only applies to s3; s2 always starts fresh")
        weights = load_model(args.init)
        _check_vocab_fit(weights, tvocab)
    else:
        if feature_dim is None:
            train_feat = os.path.join(args.data, "train.vrf")
            if os.path.exists(train_feat):
                feature_dim = _peek_feature_dim(train_feat)
            elif args.feature_dim is not None:
                feature_dim = args.feature_dim
            else:
                raise ConfigurationError(
                    "cannot size the feature projection: no .vrf files and no --feature-dim"
                )
        config = _build_config(args, vocab, feature_dim, tvocab)
        weights = None

    tc = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        seed=args.seed,
    )
    log_path = args.out + ".log.jsonl"
    if os.path.exists(log_path):
        os.remove(log_path)
    if args.stage == "s2":
        weights, history = train_language_stage(
            train, tvocab, vocab.object_names, config, tc, log_path=log_path
        )
    else:
        if weights is None:
            weights = EncoderWeights.initialize(config, substream(args.seed, "init"))
        history = train_multimodal_stage(
            train, tvocab, vocab.object_names, weights, tc, log_path=log_path
        )

    save_model(args.out, weights)
    _write_manifest(
        args.out + ".manifest.json",
        "train",
        started,
        config={
            "stage": args.stage,
            "preset": args.preset,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr": args.lr,
            "weight_decay": args.weight_decay,
            "model": _config_dict(weights.config),
        },
        inputs={"data": args.data, "features": args.features, "init": args.init},
        outputs={
            "snapshot": args.out,
            "log": log_path,
            "final_loss": history[-1]["mean_loss"],
            "model_fingerprint": fingerprint(weights),
        },
        seed=args.seed,
    )
    print(
        f"config {weights.config.hidden_dim}/{weights.config.num_heads}/{weights.config.num_layers} "
        f"pos={weights.config.position_mode}"
    )
    for entry in history:
        print(f"[{entry['stage']}] epoch {entry['epoch']} loss {entry['mean_loss']:.4f}")
    print(f"saved {args.out} (fingerprint {fingerprint(weights)})")
    return 0


def _parse_cutoffs(raw: str) -> tuple[int, ...]:
    try:
        values = tuple(int(part) for part in raw.split(","))
    except ValueError:
        raise ConfigurationError(
            f"--n must be comma-separated integers, got {raw!r}"
        ) from None
    if not values or any(v < 1 for v in values):
        raise ConfigurationError(f"--n cutoffs must be positive, got {raw!r}")
    return values


def _report_dict(report) -> dict:
    return {
        "name": report.name,
        "mode": report.mode,
        "recalls": {str(n): v for n, v in report.recalls.items()},
        "pair_top1": report.pair_top1,
        "num_images": report.num_images,
        "num_instances": report.num_instances,
        "model_fingerprint": report.model_fingerprint,
        "extras": report.extras,
    }


def _cmd_eval(args) -> int:
    started = _utc_now()
    n_values = _parse_cutoffs(args.n)
    need_features = args.task == "ablation" or not args.language_only
    vocab, train, test, feature_dim = _load_dataset(args.data, args.features, need_features)
    tvocab = _token_vocab(vocab)

    if args.task == "ablation":
        base = desk_config(
            num_predicates=vocab.num_predicates,
            feature_dim=feature_dim,
            vocab_size=len(tvocab),
        )
        split = make_zero_shot_split(train, test)
        tc = TrainConfig(epochs=args.epochs, seed=args.seed)
        reports = run_ablation_suite(split, tvocab, vocab, base, tc, tc, n_values=n_values)
        for report in reports.values():
            print(report.summary())
        payload = {name: _report_dict(r) for name, r in reports.items()}
    else:
        if args.snapshot is None:
            raise ConfigurationError(f"--task {args.task} needs --snapshot")
        weights = load_model(args.snapshot)
        _check_vocab_fit(weights, tvocab)
        model = RelationshipModel(
            weights=weights,
            vocab=tvocab,
            object_names=vocab.object_names,
            language_only=args.language_only,
        )
        if args.task == "zeroshot":
            split = make_zero_shot_split(train, test)
            report = eval_zero_shot(split, model, n_values=n_values)
        else:
            report = eval_predicate_prediction(test, model, n_values=n_values, mode=args.mode)
            report.pair_top1 = pair_top1_accuracy(test, model)
        print(report.summary())
        payload = _report_dict(report)

    if args.out:
        _write_json(args.out, payload)
        _write_manifest(
            args.out + ".manifest.json",
            "eval",
            started,
            config={
                "task": args.task,
                "n": list(n_values),
                "mode": args.mode,
                "language_only": args.language_only,
                "epochs": args.epochs,
            },
            inputs={"data": args.data, "features": args.features, "snapshot": args.snapshot},
            outputs={"report": args.out},
            seed=args.seed,
        )
    return 0


def _cmd_predict(args) -> int:
    vocab, train, test, _ = _load_dataset(args.data, args.features, not args.language_only)
    tvocab = _token_vocab(vocab)
    records = {r.image_id: r for r in (test if args.split == "test" else train)}
    record = records.get(args.image_id)
    if record is None:
        raise NotFoundError(f"image {args.image_id!r} not in the {args.split} split")
    weights = load_model(args.snapshot)
    _check_vocab_fit(weights, tvocab)
    model = RelationshipModel(
        weights=weights,
        vocab=tvocab,
        object_names=vocab.object_names,
        language_only=args.language_only,
    )
    ranked = rank_relationships(model, record, mode=args.mode)[: args.top]
    if args.out:
        write_predictions(args.out, [record], model, mode=args.mode, top_k=args.top)
    for t in ranked:
        sub = record.detections[t.subject_index]
        obj = record.detections[t.object_index]
        print(
            f"{vocab.object_names[sub.category_id]}  "
            f"{vocab.predicate_names[t.predicate_id]}  "
            f"{vocab.object_names[obj.category_id]}  "
            f"{t.likelihood:.6f}"
        )
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vrebert",
        description="Visual relationship prediction with a masked-predicate transformer.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset directory")
    gen.add_argument("--out", required=True, help="dataset directory to create")
    gen.add_argument("--images", type=int, default=200)
    gen.add_argument("--categories", type=int, default=12)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--feature-dim", type=int, default=32)
    gen.add_argument("--pairs-per-image", type=int, default=20)
    gen.set_defaults(handler=_cmd_generate)

    tr = sub.add_parser("train", help="train one stage")
    tr.add_argument("--stage", choices=STAGES, required=True,
                    help="s2: label statistics only; s3: with image features")
    tr.add_argument("--data", required=True, help="dataset directory")
    tr.add_argument("--features", default=None, help="directory with alternate .vrf files")
    tr.add_argument("--init", default=None, help="snapshot to continue from (s3 only)")
    tr.add_argument("--out", required=True, help="snapshot path to write (.vrw)")
    tr.add_argument("--preset", choices=PRESETS, default="desk")
    tr.add_argument("--epochs", type=int, default=10)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--batch-size", type=int, default=32)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--weight-decay", type=float, default=0.01)
    tr.add_argument("--position-mode", choices=("relative", "absolute"), default=None)
    tr.add_argument("--no-image-pos", action="store_true")
    tr.add_argument("--freeze-projection", action="store_true")
    tr.add_argument("--feature-dim", type=int, default=None,
                    help="feature width when no .vrf files exist (s2 only)")
    tr.set_defaults(handler=_cmd_train)

    ev = sub.add_parser("eval", help="measure recall on the test split")
    ev.add_argument("--snapshot", default=None, help="model snapshot (.vrw)")
    ev.add_argument("--data", required=True, help="dataset directory")
    ev.add_argument("--features", default=None, help="directory with alternate .vrf files")
    ev.add_argument("--task", choices=EVAL_TASKS, default="predicate")
    ev.add_argument("--n", default="1,50", help="comma-separated recall cutoffs")
    ev.add_argument("--mode", choices=("gt-pairs", "all-pairs"), default="gt-pairs")
    ev.add_argument("--language-only", action="store_true")
    ev.add_argument("--epochs", type=int, default=10,
                    help="training budget per ablation row")
    ev.add_argument("--seed", type=int, default=0, help="seed for ablation training")
    ev.add_argument("--out", default=None, help="write the report as JSON here")
    ev.set_defaults(handler=_cmd_eval)

    pr = sub.add_parser("predict", help="rank triples for one image")
    pr.add_argument("--snapshot", required=True, help="model snapshot (.vrw)")
    pr.add_argument("--data", required=True, help="dataset directory")
    pr.add_argument("--features", default=None, help="directory with alternate .vrf files")
    pr.add_argument("--image-id", required=True, help="image id to score")
    pr.add_argument("--top", type=int, default=10)
    pr.add_argument("--split", choices=("train", "test"), default="test")
    pr.add_argument("--mode", choices=("gt-pairs", "all-pairs"), default="all-pairs")
    pr.add_argument("--language-only", action="store_true")
    pr.add_argument("--out", default=None, help="also dump ranked triples as JSON lines")
    pr.set_defaults(handler=_cmd_predict)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigurationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except VrebertError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
