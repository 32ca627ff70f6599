"""Input-side building blocks: task vocabulary, sub-word tokenization,
box-geometry embeddings, relative-offset tables, and assembly of the
mixed image/word token sequence.

Sequence layout, in order: [CLS], the subject region, the union region,
the object region, [SEP], subject label tokens, [MASK], object label
tokens, [SEP].  Segment id 0 covers everything up to and including the
first [SEP]; the word tail gets segment id 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import numerics as nm
from .data import BoundingBox, Detection
from .errors import ContractError, ValidationError
from .numerics import Tensor

if TYPE_CHECKING:  # pragma: no cover
    from .encoder import EncoderWeights, ModelConfig

Array = np.ndarray

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
CONTINUATION = "##"


class Vocabulary:
    """Token list with dense ids; index order is the file order."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValidationError("vocabulary contains duplicate tokens")
        for special in SPECIAL_TOKENS:
            if special not in self.index:
                raise ValidationError(f"vocabulary is missing special token {special}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise ContractError(f"token {token!r} not in vocabulary") from None

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise ContractError(f"token id {token_id} out of range 0..{len(self.tokens) - 1}")
        return self.tokens[token_id]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @classmethod
    def build(
        cls,
        object_names: Sequence[str],
        predicate_names: Sequence[str] = (),
        extra_pieces: Sequence[str] = (),
    ) -> "Vocabulary":
        """Small task-local vocabulary: specials, then sorted label words."""
        words: set[str] = set()
        for name in list(object_names) + list(predicate_names):
            for word in name.lower().split():
                words.add(word)
        words.update(extra_pieces)
        return cls(list(SPECIAL_TOKENS) + sorted(words))

    def save(self, path) -> None:
        import os

        path = str(path)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match-first sub-word split.

    Later pieces of a word must appear in the vocabulary with a "##"
    prefix.  If at any point no piece matches, the remainder of that
    word becomes a single [UNK].
    """
    text = text.strip().lower()
    if not text:
        raise ContractError("tokenize needs nonempty text")
    ids: list[int] = []
    for word in text.split():
        start = 0
        while start < len(word):
            prefix = CONTINUATION if start > 0 else ""
            end = len(word)
            piece_id = None
            while end > start:
                candidate = prefix + word[start:end]
                if candidate in vocab:
                    piece_id = vocab.id(candidate)
                    break
                end -= 1
            if piece_id is None:
                ids.append(vocab.unk_id)
                break
            ids.append(piece_id)
            start = end
    return ids


# ---------------------------------------------------------------------------
# positional embeddings


def box_geometry(bbox: BoundingBox, width: float, height: float) -> Array:
    """Pre-projection 5-vector; every component lies in [0, 1]."""
    if width <= 0 or height <= 0:
        raise ContractError(f"image extent must be positive, got {width} x {height}")
    if bbox.x_max > width or bbox.y_max > height:
        raise ContractError(f"bbox {bbox.as_list()} exceeds image extent {width} x {height}")
    return bbox.normalized_geometry(width, height)


def image_position_embedding(
    bbox: BoundingBox,
    width: float,
    height: float,
    projection: Tensor,
    bias: Tensor | None = None,
) -> Tensor:
    """Project the normalized geometry 5-vector into model space."""
    geo = Tensor(box_geometry(bbox, width, height).reshape(1, 5))
    out = nm.matmul(geo, projection)
    if bias is not None:
        out = nm.add(out, bias)
    return nm.reshape(out, (projection.shape[1],))


@dataclass
class RelativePositionTable:
    """One trainable vector per clamped pairwise offset j - i."""

    weights: Tensor
    clip: int

    def __post_init__(self):
        span = 2 * self.clip + 1
        if self.weights.shape[-2] != span:
            raise ValidationError(
                f"relative table has {self.weights.shape[-2]} rows, expected {span}"
            )

    def vector(self, i: int, j: int) -> Array:
        offset = int(np.clip(j - i, -self.clip, self.clip)) + self.clip
        return self.weights.data[..., offset, :]


def relative_position_lookup(i: int, j: int, table: RelativePositionTable) -> Array:
    """The offset vector used when position i attends to position j."""
    return table.vector(i, j)


@lru_cache(maxsize=8)
def sinusoidal_positions(length: int, dim: int) -> Array:
    """Classic fixed sin/cos position matrix, used in absolute mode."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    exponents = np.arange(0, dim, 2, dtype=np.float64) / dim
    rates = positions / np.power(10000.0, exponents)[None, :]
    out = np.zeros((length, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(rates)
    out[:, 1::2] = np.cos(rates[:, : dim // 2])
    return out


# ---------------------------------------------------------------------------
# sequence assembly


@dataclass
class PairExample:
    """One (subject, object) pair to encode, optionally with a target."""

    subject: Detection
    object: Detection
    width: float
    height: float
    sub_label: str
    obj_label: str
    union_feature: Array | None = None
    target_predicate: int | None = None


@dataclass
class SequenceInput:
    """A single assembled sequence; embeddings stay on the autodiff tape."""

    embeddings: Tensor  # (length, hidden)
    segment_ids: Array  # (length,)
    mask_position: int | None
    length: int


@dataclass
class SequenceBatch:
    """A padded batch of assembled sequences."""

    embeddings: Tensor  # (batch, max_length, hidden)
    segment_ids: Array  # (batch, max_length)
    mask_positions: Array  # (batch,)
    lengths: Array  # (batch,)


def default_union_feature(sub: Detection, obj: Detection) -> Array:
    """Stand-in feature for the union region: mean of the pair's features."""
    if sub.feature is None or obj.feature is None:
        raise ContractError("both detections need features to derive a union feature")
    return 0.5 * (sub.feature + obj.feature)


def build_sequence_batch(
    examples: Sequence[PairExample],
    vocab: Vocabulary,
    weights: "EncoderWeights",
    config: "ModelConfig",
    language_only: bool = False,
) -> SequenceBatch:
    """Assemble a padded batch of mixed image/word sequences.

    Word tokens are word embedding plus segment embedding.  Image slots
    are either projected features plus (optionally) the geometry
    projection, or the learned null vector when running language-only.
    Segment embeddings apply to every position.
    """
    if not examples:
        raise ContractError("build_sequence_batch needs at least one example")
    batch = len(examples)
    tails: list[list[int]] = []
    mask_positions = np.zeros(batch, dtype=np.int64)
    for i, ex in enumerate(examples):
        sub_ids = tokenize(ex.sub_label, vocab)
        obj_ids = tokenize(ex.obj_label, vocab)
        tails.append([vocab.sep_id] + sub_ids + [vocab.mask_id] + obj_ids + [vocab.sep_id])
        mask_positions[i] = 5 + len(sub_ids)
    lengths = np.array([4 + len(t) for t in tails], dtype=np.int64)
    max_len = int(lengths.max())
    if max_len > config.max_len:
        raise ContractError(f"sequence length {max_len} exceeds configured max {config.max_len}")
    tail_width = max_len - 4
    tail_ids = np.full((batch, tail_width), vocab.pad_id, dtype=np.int64)
    for i, t in enumerate(tails):
        tail_ids[i, : len(t)] = t

    cls_ids = np.full((batch, 1), vocab.cls_id, dtype=np.int64)
    front = nm.gather_rows(weights.word_embedding, cls_ids)
    if language_only:
        zeros = Tensor(np.zeros((batch, 3, config.hidden_dim)))
        image_block = nm.add(zeros, nm.reshape(weights.null_image_token, (1, 1, config.hidden_dim)))
    else:
        feats = np.zeros((batch, 3, config.feature_dim), dtype=np.float64)
        for i, ex in enumerate(examples):
            if ex.subject.feature is None or ex.object.feature is None:
                raise ContractError("multimodal sequences need detection features")
            for vec in (ex.subject.feature, ex.object.feature, ex.union_feature):
                if vec is not None and vec.shape != (config.feature_dim,):
                    raise ContractError(
                        f"feature has shape {vec.shape}, configured dim is {config.feature_dim}"
                    )
            union = ex.union_feature
            if union is None:
                union = default_union_feature(ex.subject, ex.object)
            feats[i, 0] = ex.subject.feature
            feats[i, 1] = union
            feats[i, 2] = ex.object.feature
        image_block = nm.add(
            nm.matmul(Tensor(feats), weights.feature_projection),
            weights.feature_bias,
        )
        if config.use_image_pos:
            geo = np.zeros((batch, 3, 5), dtype=np.float64)
            for i, ex in enumerate(examples):
                union_box = ex.subject.bbox.union(ex.object.bbox)
                geo[i, 0] = box_geometry(ex.subject.bbox, ex.width, ex.height)
                geo[i, 1] = box_geometry(union_box, ex.width, ex.height)
                geo[i, 2] = box_geometry(ex.object.bbox, ex.width, ex.height)
            image_block = nm.add(
                image_block,
                nm.add(nm.matmul(Tensor(geo), weights.image_pos_projection), weights.image_pos_bias),
            )
    tail = nm.gather_rows(weights.word_embedding, tail_ids)
    embeddings = nm.concat([front, image_block, tail], axis=1)

    segment_ids = np.ones((batch, max_len), dtype=np.int64)
    segment_ids[:, :5] = 0
    embeddings = nm.add(embeddings, nm.gather_rows(weights.segment_embedding, segment_ids))
    if config.position_mode == "absolute":
        embeddings = nm.add(embeddings, Tensor(sinusoidal_positions(max_len, config.hidden_dim)))
    return SequenceBatch(
        embeddings=embeddings,
        segment_ids=segment_ids,
        mask_positions=mask_positions,
        lengths=lengths,
    )


def build_sequence(
    sub: Detection,
    obj: Detection,
    union_feature: Array | None,
    width: float,
    height: float,
    vocab: Vocabulary,
    object_names: Sequence[str],
    weights: "EncoderWeights",
    config: "ModelConfig",
    language_only: bool = False,
) -> SequenceInput:
    """Assemble one sequence; a batch-of-one through the batched path."""
    example = PairExample(
        subject=sub,
        object=obj,
        width=width,
        height=height,
        sub_label=object_names[sub.category_id],
        obj_label=object_names[obj.category_id],
        union_feature=union_feature,
    )
    batch = build_sequence_batch([example], vocab, weights, config, language_only=language_only)
    length = int(batch.lengths[0])
    return SequenceInput(
        embeddings=nm.reshape(batch.embeddings, batch.embeddings.shape[1:]),
        segment_ids=batch.segment_ids[0],
        mask_position=int(batch.mask_positions[0]),
        length=length,
    )
