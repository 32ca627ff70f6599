"""Recall-based evaluation, zero-shot filtering, and the ablation grid.

Recall@N counts a ground-truth triple as recovered when its exact
(subject index, object index, predicate) key appears among the N
best-scored candidates of its image.  Corpus numbers are
micro-averaged: total hits over total ground-truth instances.

Set VREBERT_THREADS to evaluate images on a small thread pool; results
are merged in input order, so the report is identical to a serial run.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import DatasetSplit, DatasetVocab, ImageRecord
from .embedding import Vocabulary
from .encoder import EncoderWeights, ModelConfig, fingerprint
from .errors import ConfigurationError, ContractError
from .relationship import RelationshipModel, ScoredTriplet, rank_relationships
from .training import TrainConfig, train_language_stage, train_multimodal_stage

# Numbers measured by full-scale training runs on the public VRD
# benchmark (100 object categories, 70 predicates, 4000 train images).
# They are context for report output, never asserted by any test: the
# desk-scale harness cannot reproduce them.
FULL_SCALE_REFERENCE = {
    "predicate-prediction": {
        "language-only": {"recall@1": 54.50, "recall@50": 71.29},
        "frozen-features": {"recall@1": 62.35, "recall@50": 79.34},
        "fine-tuned": {"recall@1": 61.40, "recall@50": 85.11},
        "image-pos": {"recall@1": 83.24, "recall@50": 92.77},
        "absolute-full": {"recall@1": 88.48, "recall@50": 94.90},
        "relative-pos": {"recall@1": 88.57, "recall@50": 95.26},
    },
    "zero-shot": {
        "scratch": {"recall@1": 52.06, "recall@50": 81.75},
        "two-stage": {"recall@1": 65.30, "recall@50": 85.41},
    },
}


def _worker_count() -> int:
    raw = os.environ.get("VREBERT_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"VREBERT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"VREBERT_THREADS must be positive, got {n}")
    return n


def _map_records(fn, records: Sequence[ImageRecord]) -> list:
    workers = _worker_count()
    if workers == 1 or len(records) < 2:
        return [fn(r) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, records))


def recall_counts(
    ranked: Sequence[ScoredTriplet],
    truth: Iterable[tuple[int, int, int]],
    n: int,
) -> tuple[int, int]:
    """(recovered, total) ground-truth triples for one image."""
    if n < 1:
        raise ContractError(f"recall cutoff must be positive, got {n}")
    truth_set = set(truth)
    if not truth_set:
        return (0, 0)
    top = {t.key for t in ranked[:n]}
    return (len(truth_set & top), len(truth_set))


def recall_at_n(
    ranked: Sequence[ScoredTriplet],
    truth: Iterable[tuple[int, int, int]],
    n: int,
) -> float:
    hits, total = recall_counts(ranked, truth, n)
    if total == 0:
        raise ContractError("recall needs at least one ground-truth triple")
    return hits / total


def _truth_keys(record: ImageRecord) -> set[tuple[int, int, int]]:
    return {
        (rel.subject_index, rel.object_index, rel.predicate_id)
        for rel in record.relationships
    }


@dataclass
class EvalReport:
    """Corpus metrics for one model under one candidate mode."""

    name: str
    mode: str
    recalls: dict[int, float]
    num_images: int
    num_instances: int
    model_fingerprint: str
    pair_top1: float | None = None
    extras: dict = field(default_factory=dict)

    def summary(self) -> str:
        parts = [f"{self.name} [{self.mode}]"]
        for n in sorted(self.recalls):
            parts.append(f"R@{n}={self.recalls[n]:.4f}")
        if self.pair_top1 is not None:
            parts.append(f"pair-top1={self.pair_top1:.4f}")
        parts.append(f"images={self.num_images}")
        parts.append(f"instances={self.num_instances}")
        return " ".join(parts)


def eval_predicate_prediction(
    records: Sequence[ImageRecord],
    model: RelationshipModel,
    n_values: Sequence[int] = (1, 50),
    mode: str = "gt-pairs",
    name: str = "model",
) -> EvalReport:
    """Recall@N over every annotated image in the collection."""
    if not n_values:
        raise ContractError("need at least one recall cutoff")
    scored = [r for r in records if r.relationships]
    if not scored:
        raise ContractError("no images with ground-truth relationships to evaluate")

    def one(record: ImageRecord):
        ranked = rank_relationships(model, record, mode=mode)
        truth = _truth_keys(record)
        return {n: recall_counts(ranked, truth, n) for n in n_values}

    per_image = _map_records(one, scored)
    recalls = {}
    total_instances = 0
    for n in n_values:
        hits = sum(counts[n][0] for counts in per_image)
        total = sum(counts[n][1] for counts in per_image)
        recalls[int(n)] = hits / total
        total_instances = total
    return EvalReport(
        name=name,
        mode=mode,
        recalls=recalls,
        num_images=len(scored),
        num_instances=total_instances,
        model_fingerprint=fingerprint(model.weights),
    )


def pair_top1_accuracy(records: Sequence[ImageRecord], model: RelationshipModel) -> float:
    """Share of annotated pairs whose best predicate is a true one.

    Each distinct (subject, object) pair counts once; it scores when the
    argmax of its predicate distribution appears among that pair's
    annotated predicates.
    """
    scored = [r for r in records if r.relationships]
    if not scored:
        raise ContractError("no images with ground-truth relationships to evaluate")

    def one(record: ImageRecord):
        truth_by_pair: dict[tuple[int, int], set[int]] = {}
        for rel in record.relationships:
            truth_by_pair.setdefault((rel.subject_index, rel.object_index), set()).add(
                rel.predicate_id
            )
        pairs = list(truth_by_pair)
        dists = model.score_pairs(record, pairs)
        hits = sum(
            1 for pair, dist in zip(pairs, dists) if int(np.argmax(dist)) in truth_by_pair[pair]
        )
        return hits, len(pairs)

    per_image = _map_records(one, scored)
    hits = sum(h for h, _ in per_image)
    total = sum(t for _, t in per_image)
    return hits / total


def eval_zero_shot(
    split: DatasetSplit,
    model: RelationshipModel,
    n_values: Sequence[int] = (1, 50),
    name: str = "zero-shot",
) -> EvalReport:
    """Recall over test triples whose category combination never occurs
    in training.  Candidates still come from all annotated pairs of each
    image; only the unseen triples count as ground truth."""
    if not split.zero_shot_test:
        raise ContractError("the split holds no zero-shot relationships")
    keys_by_image: dict[str, set[tuple[int, int, int]]] = {}
    for image_id, rel in split.zero_shot_test:
        keys_by_image.setdefault(image_id, set()).add(
            (rel.subject_index, rel.object_index, rel.predicate_id)
        )
    scored = [r for r in split.test if r.image_id in keys_by_image]

    def one(record: ImageRecord):
        ranked = rank_relationships(model, record, mode="gt-pairs")
        truth = keys_by_image[record.image_id]
        return {n: recall_counts(ranked, truth, n) for n in n_values}

    per_image = _map_records(one, scored)
    recalls = {}
    total_instances = 0
    for n in n_values:
        hits = sum(counts[n][0] for counts in per_image)
        total = sum(counts[n][1] for counts in per_image)
        recalls[int(n)] = hits / total
        total_instances = total
    return EvalReport(
        name=name,
        mode="gt-pairs",
        recalls=recalls,
        num_images=len(scored),
        num_instances=total_instances,
        model_fingerprint=fingerprint(model.weights),
        extras={"held_out_types": len({t for _, r in split.zero_shot_test for t in [r.triplet_type]})},
    )


# ---------------------------------------------------------------------------
# ablation grid

ABLATION_ROWS = (
    "language-only",
    "frozen-features",
    "fine-tuned",
    "image-pos",
    "relative-pos",
)


def _row_config(row: str, base: ModelConfig) -> ModelConfig:
    if row == "language-only":
        return base.but(position_mode="absolute", use_image_pos=False)
    if row == "frozen-features":
        return base.but(position_mode="absolute", use_image_pos=False, train_feature_projection=False)
    if row == "fine-tuned":
        return base.but(position_mode="absolute", use_image_pos=False, train_feature_projection=True)
    if row == "image-pos":
        return base.but(position_mode="absolute", use_image_pos=True, train_feature_projection=True)
    if row == "relative-pos":
        return base.but(position_mode="relative", use_image_pos=True, train_feature_projection=True)
    raise ContractError(f"unknown ablation row {row!r}")


def run_ablation_row(
    row: str,
    split: DatasetSplit,
    vocab: Vocabulary,
    dataset_vocab: DatasetVocab,
    base_config: ModelConfig,
    language_train: TrainConfig,
    multimodal_train: TrainConfig,
    n_values: Sequence[int] = (1, 50),
) -> tuple[EvalReport, EncoderWeights]:
    """Train one grid row from scratch and evaluate it on the test split.

    Every row starts with its own language-only stage so rows differ
    only in the switches under study, never in training budget.
    """
    config = _row_config(row, base_config)
    names = dataset_vocab.object_names
    weights, _ = train_language_stage(split.train, vocab, names, config, language_train)
    language_only = row == "language-only"
    if not language_only:
        train_multimodal_stage(split.train, vocab, names, weights, multimodal_train)
    model = RelationshipModel(
        weights=weights, vocab=vocab, object_names=names, language_only=language_only
    )
    report = eval_predicate_prediction(split.test, model, n_values=n_values, name=row)
    report.pair_top1 = pair_top1_accuracy(split.test, model)
    return report, weights


def run_ablation_suite(
    split: DatasetSplit,
    vocab: Vocabulary,
    dataset_vocab: DatasetVocab,
    base_config: ModelConfig,
    language_train: TrainConfig,
    multimodal_train: TrainConfig,
    rows: Sequence[str] = ABLATION_ROWS,
    n_values: Sequence[int] = (1, 50),
) -> dict[str, EvalReport]:
    """All requested rows, trained with a shared seed and budget."""
    reports = {}
    for row in rows:
        report, _ = run_ablation_row(
            row, split, vocab, dataset_vocab, base_config,
            language_train, multimodal_train, n_values=n_values,
        )
        reports[row] = report
    return reports
