"""Two-stage training for the masked-predicate objective.

Stage one runs language-only: image slots hold the learned null vector,
so the model can only exploit label statistics.  Stage two continues
from those weights with real features plugged in.  Both stages share
one loop; they differ only in which parameters the optimizer touches.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nm
from .data import ImageRecord
from .embedding import PairExample, Vocabulary, build_sequence_batch
from .encoder import EncoderWeights, ModelConfig, predict_batch
from .errors import ConfigurationError, ContractError
from .numerics import AdamWState, Tensor, adamw_step
from .seeding import substream

Array = np.ndarray

# parameters that only the image pathway uses
_IMAGE_SIDE = ("feature_projection", "feature_bias", "image_pos_projection", "image_pos_bias")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule knobs for one training stage."""

    epochs: int
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.grad_clip <= 0:
            raise ConfigurationError(f"grad_clip must be positive, got {self.grad_clip}")


def loss_masked_predicate(dist: Tensor, targets) -> Tensor:
    """Mean negative log probability of each row's target predicate.

    Probabilities are floored at 1e-12 so a confidently wrong model
    yields a large finite loss instead of an infinity.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if dist.ndim != 2 or targets.shape != (dist.shape[0],):
        raise ContractError(f"distribution {dist.shape} and targets {targets.shape} do not align")
    if targets.min() < 0 or targets.max() >= dist.shape[1]:
        raise ContractError(f"target ids must lie in [0, {dist.shape[1]})")
    picked = nm.select_index(dist, targets)
    return nm.neg(nm.mean_all(nm.log(nm.clamp_min(picked, 1e-12))))


def clip_global_norm(grads: Sequence[Array | None], max_norm: float) -> tuple[list[Array | None], float]:
    """Jointly rescale gradients so their combined norm is at most max_norm."""
    if max_norm <= 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm <= max_norm:
        return list(grads), norm
    factor = max_norm / norm
    return [None if g is None else g * factor for g in grads], norm


def trainable_parameter_names(config: ModelConfig, language_only: bool) -> list[str]:
    """Which parameters the optimizer may move in the given stage."""
    from .encoder import _parameter_shapes

    names = list(_parameter_shapes(config))
    if language_only:
        return [n for n in names if n not in _IMAGE_SIDE]
    skip = {"null_image_token"}
    if not config.train_feature_projection:
        skip.update(("feature_projection", "feature_bias"))
    if not config.use_image_pos:
        skip.update(("image_pos_projection", "image_pos_bias"))
    return [n for n in names if n not in skip]


def relationship_examples(
    records: Sequence[ImageRecord], object_names: Sequence[str]
) -> list[PairExample]:
    """One training example per annotated relationship, in record order."""
    examples = []
    for record in records:
        for rel in record.relationships:
            examples.append(
                PairExample(
                    subject=rel.subject,
                    object=rel.object,
                    width=record.width,
                    height=record.height,
                    sub_label=object_names[rel.subject.category_id],
                    obj_label=object_names[rel.object.category_id],
                    target_predicate=rel.predicate_id,
                )
            )
    return examples


def train_predicate_head(
    records: Sequence[ImageRecord],
    vocab: Vocabulary,
    object_names: Sequence[str],
    weights: EncoderWeights,
    train_config: TrainConfig,
    language_only: bool = False,
    log_path=None,
) -> list[dict]:
    """Run one stage in place on the given weights; returns epoch stats."""
    examples = relationship_examples(records, object_names)
    if not examples:
        raise ContractError("no annotated relationships to train on")
    config = weights.config
    names = trainable_parameter_names(config, language_only)
    params = [weights.params[n] for n in names]
    state = AdamWState.for_params(
        params, lr=train_config.lr, weight_decay=train_config.weight_decay
    )
    shuffle_rng = substream(train_config.seed, "shuffle")
    dropout_rng = substream(train_config.seed, "dropout")
    stage = "language" if language_only else "multimodal"

    history = []
    for epoch in range(train_config.epochs):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(examples))
        total_loss, total_rows = 0.0, 0
        for lo in range(0, len(order), train_config.batch_size):
            chunk = [examples[i] for i in order[lo : lo + train_config.batch_size]]
            batch = build_sequence_batch(chunk, vocab, weights, config, language_only=language_only)
            dist = predict_batch(batch, weights, config, train=True, rng=dropout_rng)
            targets = np.array([ex.target_predicate for ex in chunk], dtype=np.int64)
            loss = loss_masked_predicate(dist, targets)
            for p in params:
                p.zero_grad()
            nm.backward(loss)
            grads, _ = clip_global_norm([p.grad for p in params], train_config.grad_clip)
            adamw_step(params, grads, state)
            total_loss += loss.item() * len(chunk)
            total_rows += len(chunk)
        entry = {
            "stage": stage,
            "epoch": epoch,
            "mean_loss": total_loss / total_rows,
            "examples": total_rows,
            "elapsed_ms": (time.perf_counter() - started) * 1000.0,
        }
        history.append(entry)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return history


def train_language_stage(
    records: Sequence[ImageRecord],
    vocab: Vocabulary,
    object_names: Sequence[str],
    config: ModelConfig,
    train_config: TrainConfig,
    log_path=None,
) -> tuple[EncoderWeights, list[dict]]:
    """Fresh weights, trained on label statistics alone."""
    weights = EncoderWeights.initialize(config, substream(train_config.seed, "init"))
    history = train_predicate_head(
        records, vocab, object_names, weights, train_config,
        language_only=True, log_path=log_path,
    )
    return weights, history


def train_multimodal_stage(
    records: Sequence[ImageRecord],
    vocab: Vocabulary,
    object_names: Sequence[str],
    weights: EncoderWeights,
    train_config: TrainConfig,
    log_path=None,
) -> list[dict]:
    """Continue from existing weights with real image features."""
    return train_predicate_head(
        records, vocab, object_names, weights, train_config,
        language_only=False, log_path=log_path,
    )


def mean_eval_loss(
    records: Sequence[ImageRecord],
    vocab: Vocabulary,
    object_names: Sequence[str],
    weights: EncoderWeights,
    language_only: bool = False,
    batch_size: int = 64,
) -> float:
    """Training objective measured without dropout or updates."""
    examples = relationship_examples(records, object_names)
    if not examples:
        raise ContractError("no annotated relationships to evaluate")
    config = weights.config
    total, rows = 0.0, 0
    with nm.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo : lo + batch_size]
            batch = build_sequence_batch(chunk, vocab, weights, config, language_only=language_only)
            dist = predict_batch(batch, weights, config)
            targets = np.array([ex.target_predicate for ex in chunk], dtype=np.int64)
            total += loss_masked_predicate(dist, targets).item() * len(chunk)
            rows += len(chunk)
    return total / rows
