"""Scoring and ranking of (subject, predicate, object) candidates.

A candidate's likelihood is the product of the predicate probability
from the masked-slot head and the two detector confidences.  Ranking is
by descending likelihood with a fixed index-order tiebreak so results
are reproducible across runs and platforms.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nm
from .data import ImageRecord
from .embedding import PairExample, Vocabulary, build_sequence_batch
from .encoder import EncoderWeights, ModelConfig, predict_batch
from .errors import ContractError

Array = np.ndarray

RANK_MODES = ("gt-pairs", "all-pairs")


def relationship_likelihood(p_pred: float, p_sub: float, p_obj: float) -> float:
    """Joint score of one candidate triple."""
    for name, p in (("p_pred", p_pred), ("p_sub", p_sub), ("p_obj", p_obj)):
        if not 0.0 <= p <= 1.0:
            raise ContractError(f"{name} must be a probability in [0, 1], got {p}")
    return p_pred * p_sub * p_obj


@dataclass(frozen=True)
class ScoredTriplet:
    """One ranked candidate within an image."""

    subject_index: int
    object_index: int
    predicate_id: int
    likelihood: float
    predicate_prob: float

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.subject_index, self.object_index, self.predicate_id)


def _rank_order(t: ScoredTriplet) -> tuple:
    return (-t.likelihood, t.subject_index, t.object_index, t.predicate_id)


@dataclass
class RelationshipModel:
    """Everything needed to score candidates on raw image records."""

    weights: EncoderWeights
    vocab: Vocabulary
    object_names: Sequence[str]
    language_only: bool = False

    @property
    def config(self) -> ModelConfig:
        return self.weights.config

    def score_pairs(self, record: ImageRecord, pairs: Sequence[tuple[int, int]]) -> Array:
        """Predicate distribution for each (subject_index, object_index).

        Returns an array of shape (len(pairs), num_predicates); rows are
        aligned with the input order.
        """
        if not pairs:
            return np.zeros((0, self.config.num_predicates))
        n = len(record.detections)
        examples = []
        for si, oi in pairs:
            if not (0 <= si < n and 0 <= oi < n):
                raise ContractError(f"pair ({si}, {oi}) out of range for {n} detections")
            if si == oi:
                raise ContractError(f"pair ({si}, {oi}) uses one detection twice")
            sub, obj = record.detections[si], record.detections[oi]
            examples.append(
                PairExample(
                    subject=sub,
                    object=obj,
                    width=record.width,
                    height=record.height,
                    sub_label=self.object_names[sub.category_id],
                    obj_label=self.object_names[obj.category_id],
                )
            )
        with nm.no_grad():
            batch = build_sequence_batch(
                examples, self.vocab, self.weights, self.config, language_only=self.language_only
            )
            dist = predict_batch(batch, self.weights, self.config)
        return dist.data


def _gt_pairs(record: ImageRecord) -> list[tuple[int, int]]:
    seen: dict[tuple[int, int], None] = {}
    for rel in record.relationships:
        seen.setdefault((rel.subject_index, rel.object_index), None)
    return list(seen)


def _all_pairs(record: ImageRecord) -> list[tuple[int, int]]:
    n = len(record.detections)
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def rank_relationships(
    model: RelationshipModel,
    record: ImageRecord,
    mode: str = "gt-pairs",
) -> list[ScoredTriplet]:
    """Every candidate triple for one image, best first.

    "gt-pairs" scores only annotated pairs and treats both detections
    as certain; "all-pairs" scores every ordered detection pair and
    folds in detector confidences.  Fewer than two detections means no
    candidates.
    """
    if mode not in RANK_MODES:
        raise ContractError(f"mode must be one of {RANK_MODES}, got {mode!r}")
    if len(record.detections) < 2:
        return []
    pairs = _gt_pairs(record) if mode == "gt-pairs" else _all_pairs(record)
    dists = model.score_pairs(record, pairs)
    out: list[ScoredTriplet] = []
    for (si, oi), dist in zip(pairs, dists):
        if mode == "gt-pairs":
            p_sub = p_obj = 1.0
        else:
            p_sub = record.detections[si].confidence
            p_obj = record.detections[oi].confidence
        for pred_id, p_pred in enumerate(dist):
            out.append(
                ScoredTriplet(
                    subject_index=si,
                    object_index=oi,
                    predicate_id=pred_id,
                    likelihood=relationship_likelihood(float(p_pred), p_sub, p_obj),
                    predicate_prob=float(p_pred),
                )
            )
    out.sort(key=_rank_order)
    return out


def write_predictions(path, records: Iterable[ImageRecord], model: RelationshipModel,
                      mode: str = "gt-pairs", top_k: int | None = None) -> int:
    """Dump ranked candidates as JSON lines; returns images written."""
    if top_k is not None and top_k < 1:
        raise ContractError(f"top_k must be positive, got {top_k}")
    path = str(path)
    tmp = path + ".tmp"
    count = 0
    with open(tmp, "w", encoding="utf-8") as fh:
        for record in records:
            ranked = rank_relationships(model, record, mode=mode)
            if top_k is not None:
                ranked = ranked[:top_k]
            payload = {
                "image_id": record.image_id,
                "triplets": [
                    {
                        "sub_idx": t.subject_index,
                        "obj_idx": t.object_index,
                        "pred_id": t.predicate_id,
                        "likelihood": t.likelihood,
                    }
                    for t in ranked
                ],
            }
            fh.write(json.dumps(payload, sort_keys=True) + "\n")
            count += 1
    os.replace(tmp, path)
    return count
