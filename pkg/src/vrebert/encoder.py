"""Transformer encoder over mixed image/word sequences, plus the
masked-slot predicate head and model snapshot IO.

Layers are post-norm: x = LN(x + attention(x)); x = LN(x + feedforward(x)).
Query/key projections carry no bias so the pairwise score decomposes
into exactly the three dot products the relative-offset form needs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nm
from .errors import ConfigurationError, ContractError, FormatError
from .numerics import Tensor

Array = np.ndarray

POSITION_MODES = ("relative", "absolute")
TABLE_MODES = ("shared", "per-layer", "per-head")

_MASK_SCORE = -1e9  # exp() underflows to exactly 0.0 in float64
_INIT_SCALE = 0.02
_SNAPSHOT_VERSION = 1.0


@dataclass(frozen=True)
class ModelConfig:
    """Shape and behavior switches for the encoder stack."""

    hidden_dim: int
    num_heads: int
    num_layers: int
    ff_dim: int
    num_predicates: int
    feature_dim: int
    vocab_size: int
    dropout: float = 0.1
    rel_clip: int = 8
    position_mode: str = "relative"
    rel_table_mode: str = "per-layer"
    use_image_pos: bool = True
    train_feature_projection: bool = True
    max_len: int = 32

    def __post_init__(self):
        for name in ("hidden_dim", "num_heads", "ff_dim", "num_predicates", "feature_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ConfigurationError(f"num_layers must be nonnegative, got {self.num_layers}")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.rel_clip < 1:
            raise ConfigurationError(f"rel_clip must be positive, got {self.rel_clip}")
        if self.position_mode not in POSITION_MODES:
            raise ConfigurationError(f"position_mode must be one of {POSITION_MODES}, got {self.position_mode!r}")
        if self.rel_table_mode not in TABLE_MODES:
            raise ConfigurationError(f"rel_table_mode must be one of {TABLE_MODES}, got {self.rel_table_mode!r}")
        if self.max_len < 9:
            raise ConfigurationError(f"max_len must cover the 9-slot minimum sequence, got {self.max_len}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def but(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def desk_config(num_predicates: int, feature_dim: int, vocab_size: int, **overrides) -> ModelConfig:
    """Small stack that trains in seconds on a laptop CPU."""
    base = dict(
        hidden_dim=64,
        num_heads=4,
        num_layers=2,
        ff_dim=128,
        num_predicates=num_predicates,
        feature_dim=feature_dim,
        vocab_size=vocab_size,
    )
    base.update(overrides)
    return ModelConfig(**base)


def paper_config(num_predicates: int, feature_dim: int, vocab_size: int, **overrides) -> ModelConfig:
    """Full-size stack: 768 wide, 12 heads, 12 layers."""
    base = dict(
        hidden_dim=768,
        num_heads=12,
        num_layers=12,
        ff_dim=3072,
        num_predicates=num_predicates,
        feature_dim=feature_dim,
        vocab_size=vocab_size,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map; insertion order is the save order."""
    d, ff = config.hidden_dim, config.ff_dim
    span = 2 * config.rel_clip + 1
    shapes: dict[str, tuple[int, ...]] = {
        "word_embedding": (config.vocab_size, d),
        "segment_embedding": (2, d),
        "feature_projection": (config.feature_dim, d),
        "feature_bias": (d,),
        "image_pos_projection": (5, d),
        "image_pos_bias": (d,),
        "null_image_token": (d,),
    }
    if config.position_mode == "relative" and config.rel_table_mode == "shared":
        shapes["rel_table"] = (span, config.head_dim)
    for i in range(config.num_layers):
        prefix = f"layer{i}."
        shapes[prefix + "wq"] = (d, d)
        shapes[prefix + "wk"] = (d, d)
        shapes[prefix + "wv"] = (d, d)
        shapes[prefix + "vb"] = (d,)
        shapes[prefix + "wo"] = (d, d)
        shapes[prefix + "ob"] = (d,)
        shapes[prefix + "ln1_gamma"] = (d,)
        shapes[prefix + "ln1_beta"] = (d,)
        shapes[prefix + "ff1"] = (d, ff)
        shapes[prefix + "ff1_bias"] = (ff,)
        shapes[prefix + "ff2"] = (ff, d)
        shapes[prefix + "ff2_bias"] = (d,)
        shapes[prefix + "ln2_gamma"] = (d,)
        shapes[prefix + "ln2_beta"] = (d,)
        if config.position_mode == "relative":
            if config.rel_table_mode == "per-layer":
                shapes[prefix + "rel_table"] = (span, config.head_dim)
            elif config.rel_table_mode == "per-head":
                shapes[prefix + "rel_table"] = (config.num_heads, span, config.head_dim)
    shapes["head_weight"] = (d, config.num_predicates)
    shapes["head_bias"] = (config.num_predicates,)
    return shapes


def _init_array(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> Array:
    if "rel_table" in name:
        # zeros mean the stack starts as plain content attention
        return np.zeros(shape)
    if name.endswith(("_bias", ".vb", ".ob", "ln1_beta", "ln2_beta")):
        return np.zeros(shape)
    if name.endswith(("ln1_gamma", "ln2_gamma")):
        return np.ones(shape)
    return rng.normal(0.0, _INIT_SCALE, size=shape)


class EncoderWeights:
    """All trainable arrays for one model, keyed by canonical name."""

    def __init__(self, params: dict[str, Tensor], config: ModelConfig):
        expected = _parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ContractError(f"parameter names do not match config: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ContractError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        # keep canonical order regardless of the order the caller built
        self.params = {name: params[name] for name in expected}
        self.config = config

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "EncoderWeights":
        params = {
            name: Tensor(_init_array(name, shape, rng), requires_grad=True)
            for name, shape in _parameter_shapes(config).items()
        }
        return cls(params, config)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise ContractError(f"no parameter named {name!r}") from None

    @property
    def word_embedding(self) -> Tensor:
        return self.params["word_embedding"]

    @property
    def segment_embedding(self) -> Tensor:
        return self.params["segment_embedding"]

    @property
    def feature_projection(self) -> Tensor:
        return self.params["feature_projection"]

    @property
    def feature_bias(self) -> Tensor:
        return self.params["feature_bias"]

    @property
    def image_pos_projection(self) -> Tensor:
        return self.params["image_pos_projection"]

    @property
    def image_pos_bias(self) -> Tensor:
        return self.params["image_pos_bias"]

    @property
    def null_image_token(self) -> Tensor:
        return self.params["null_image_token"]

    def rel_table(self, layer_index: int) -> Tensor:
        if self.config.position_mode != "relative":
            raise ContractError("relative tables only exist in relative position mode")
        if self.config.rel_table_mode == "shared":
            return self.params["rel_table"]
        return self.params[f"layer{layer_index}.rel_table"]


def rel_attention_scores(q: Tensor, k: Tensor, table: Tensor, clip: int) -> Tensor:
    """Pairwise scores with trainable offset vectors; see numerics for math."""
    return nm.relative_scores(q, k, table, clip)


def _split_heads(x: Tensor, batch: int, length: int, heads: int, head_dim: int) -> Tensor:
    x = nm.reshape(x, (batch, length, heads, head_dim))
    return nm.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor, batch: int, length: int, hidden: int) -> Tensor:
    x = nm.transpose(x, (0, 2, 1, 3))
    return nm.reshape(x, (batch, length, hidden))


def encoder_forward_batch(
    embeddings: Tensor,
    lengths: Array,
    weights: EncoderWeights,
    config: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the full stack over a padded (batch, length, hidden) block.

    Padding is hidden from attention by a large negative additive score
    on out-of-range key positions; padded query rows produce garbage
    that downstream code never reads.
    """
    if embeddings.ndim != 3:
        raise ContractError(f"expected (batch, length, hidden) embeddings, got shape {embeddings.shape}")
    batch, max_len, hidden = embeddings.shape
    if hidden != config.hidden_dim:
        raise ContractError(f"embedding width {hidden} does not match configured {config.hidden_dim}")
    if train and config.dropout > 0 and rng is None:
        raise ContractError("training forward with dropout needs an rng")
    lengths = np.asarray(lengths, dtype=np.int64)

    key_mask = None
    if lengths.min() < max_len:
        valid = np.arange(max_len)[None, :] < lengths[:, None]
        mask = np.where(valid, 0.0, _MASK_SCORE)
        key_mask = Tensor(mask[:, None, None, :])

    heads, dz = config.num_heads, config.head_dim
    x = embeddings
    for i in range(config.num_layers):
        p = weights.params
        q = _split_heads(nm.matmul(x, p[f"layer{i}.wq"]), batch, max_len, heads, dz)
        k = _split_heads(nm.matmul(x, p[f"layer{i}.wk"]), batch, max_len, heads, dz)
        v = _split_heads(
            nm.add(nm.matmul(x, p[f"layer{i}.wv"]), p[f"layer{i}.vb"]),
            batch, max_len, heads, dz,
        )
        if config.position_mode == "relative":
            scores = nm.relative_scores(q, k, weights.rel_table(i), config.rel_clip)
        else:
            scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dz))
        if key_mask is not None:
            scores = nm.add(scores, key_mask)
        probs = nm.softmax(scores, axis=-1)
        if train and config.dropout > 0:
            probs = nm.dropout(probs, config.dropout, rng)
        ctx = _merge_heads(nm.matmul(probs, v), batch, max_len, hidden)
        attn_out = nm.add(nm.matmul(ctx, p[f"layer{i}.wo"]), p[f"layer{i}.ob"])
        x = nm.layer_norm(nm.add(x, attn_out), p[f"layer{i}.ln1_gamma"], p[f"layer{i}.ln1_beta"])

        inner = nm.gelu(nm.add(nm.matmul(x, p[f"layer{i}.ff1"]), p[f"layer{i}.ff1_bias"]))
        ff_out = nm.add(nm.matmul(inner, p[f"layer{i}.ff2"]), p[f"layer{i}.ff2_bias"])
        if train and config.dropout > 0:
            ff_out = nm.dropout(ff_out, config.dropout, rng)
        x = nm.layer_norm(nm.add(x, ff_out), p[f"layer{i}.ln2_gamma"], p[f"layer{i}.ln2_beta"])
    return x


def masked_predict_batch(hidden: Tensor, mask_positions: Array, weights: EncoderWeights) -> Tensor:
    """Predicate distribution read off each sequence's masked slot."""
    picked = nm.select_index(hidden, np.asarray(mask_positions, dtype=np.int64))
    logits = nm.add(nm.matmul(picked, weights.params["head_weight"]), weights.params["head_bias"])
    return nm.softmax(logits, axis=-1)


def predict_batch(
    batch,
    weights: EncoderWeights,
    config: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """SequenceBatch -> (batch, num_predicates) distribution."""
    hidden = encoder_forward_batch(batch.embeddings, batch.lengths, weights, config, train=train, rng=rng)
    return masked_predict_batch(hidden, batch.mask_positions, weights)


def masked_predict(seq, weights: EncoderWeights, config: ModelConfig) -> Array:
    """Single assembled sequence -> plain probability vector."""
    if seq.mask_position is None:
        raise ContractError("sequence has no masked slot to predict")
    with nm.no_grad():
        emb = nm.reshape(seq.embeddings, (1,) + seq.embeddings.shape)
        hidden = encoder_forward_batch(emb, np.array([seq.length]), weights, config)
        dist = masked_predict_batch(hidden, np.array([seq.mask_position]), weights)
    return dist.data[0]


# ---------------------------------------------------------------------------
# snapshots

_CONFIG_KEY = "__config__"


def _encode_config(config: ModelConfig) -> Array:
    return np.array(
        [
            _SNAPSHOT_VERSION,
            config.hidden_dim,
            config.num_heads,
            config.num_layers,
            config.ff_dim,
            config.dropout,
            config.num_predicates,
            config.rel_clip,
            POSITION_MODES.index(config.position_mode),
            TABLE_MODES.index(config.rel_table_mode),
            float(config.use_image_pos),
            float(config.train_feature_projection),
            config.feature_dim,
            config.vocab_size,
            config.max_len,
        ],
        dtype=np.float64,
    )


def _decode_config(vec: Array, path: str) -> ModelConfig:
    if vec.shape != (15,):
        raise FormatError(f"{path}: config record has shape {vec.shape}, expected (15,)")
    if vec[0] != _SNAPSHOT_VERSION:
        raise FormatError(f"{path}: snapshot version {vec[0]} is not supported")
    return ModelConfig(
        hidden_dim=int(vec[1]),
        num_heads=int(vec[2]),
        num_layers=int(vec[3]),
        ff_dim=int(vec[4]),
        dropout=float(vec[5]),
        num_predicates=int(vec[6]),
        rel_clip=int(vec[7]),
        position_mode=POSITION_MODES[int(vec[8])],
        rel_table_mode=TABLE_MODES[int(vec[9])],
        use_image_pos=bool(vec[10]),
        train_feature_projection=bool(vec[11]),
        feature_dim=int(vec[12]),
        vocab_size=int(vec[13]),
        max_len=int(vec[14]),
    )


def save_model(path, weights: EncoderWeights) -> None:
    """Write every parameter plus a config record, atomically."""
    named: dict[str, Tensor | Array] = {_CONFIG_KEY: _encode_config(weights.config)}
    named.update(weights.params)
    nm.save_parameters(path, named)


def load_model(path) -> EncoderWeights:
    import os

    from .errors import NotFoundError

    if not os.path.exists(str(path)):
        raise NotFoundError(f"no model snapshot at {path}")
    arrays = nm.load_parameters(path)
    if _CONFIG_KEY not in arrays:
        raise FormatError(f"{path}: snapshot lacks a {_CONFIG_KEY} record")
    config = _decode_config(arrays.pop(_CONFIG_KEY), str(path))
    params = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
    return EncoderWeights(params, config)


def fingerprint(weights: EncoderWeights) -> str:
    """Stable hex digest over config and parameter bytes."""
    digest = hashlib.sha256()
    digest.update(_encode_config(weights.config).tobytes())
    for name, tensor in weights.params.items():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    return digest.hexdigest()[:16]
