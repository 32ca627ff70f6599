"""Tokenizer, geometry embedding, and sequence assembly checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vrebert.data import BoundingBox, Detection
from vrebert.embedding import (
    RelativePositionTable,
    SPECIAL_TOKENS,
    Vocabulary,
    box_geometry,
    build_sequence,
    build_sequence_batch,
    default_union_feature,
    image_position_embedding,
    relative_position_lookup,
    sinusoidal_positions,
    tokenize,
    PairExample,
)
from vrebert.encoder import EncoderWeights, desk_config
from vrebert.errors import ContractError, ValidationError
from vrebert.numerics import Tensor
from vrebert.seeding import substream


# ---------------------------------------------------------------------------
# vocabulary


def test_specials_come_first_in_fixed_order():
    vocab = Vocabulary.build(["zebra", "apple"])
    assert vocab.tokens[:5] == list(SPECIAL_TOKENS)
    assert vocab.pad_id == 0
    assert vocab.unk_id == 1
    assert vocab.cls_id == 2
    assert vocab.sep_id == 3
    assert vocab.mask_id == 4
    assert vocab.tokens[5:] == ["apple", "zebra"]


def test_multiword_names_split_into_words():
    vocab = Vocabulary.build(["traffic light"], ["on top of"])
    assert set(vocab.tokens[5:]) == {"traffic", "light", "on", "top", "of"}


def test_duplicate_tokens_rejected():
    with pytest.raises(ValidationError):
        Vocabulary(list(SPECIAL_TOKENS) + ["dog", "dog"])


def test_missing_special_rejected():
    with pytest.raises(ValidationError):
        Vocabulary(["dog", "cat"])


def test_vocab_round_trip(tmp_path):
    vocab = Vocabulary.build(["person", "hat"], ["wears"], extra_pieces=["##ing"])
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    again = Vocabulary.load(path)
    assert again.tokens == vocab.tokens


def test_unknown_token_lookup_raises():
    vocab = Vocabulary.build(["dog"])
    with pytest.raises(ContractError):
        vocab.id("cat")
    with pytest.raises(ContractError):
        vocab.token(999)


# ---------------------------------------------------------------------------
# tokenizer


def test_single_known_word():
    vocab = Vocabulary.build(["dog"])
    assert tokenize("dog", vocab) == [vocab.id("dog")]


def test_case_folding():
    vocab = Vocabulary.build(["dog"])
    assert tokenize("DOG", vocab) == [vocab.id("dog")]


def test_continuation_pieces():
    vocab = Vocabulary.build(["rid"], extra_pieces=["##ing"])
    assert tokenize("riding", vocab) == [vocab.id("rid"), vocab.id("##ing")]


def test_longest_match_wins():
    # both "ri" and "rid" are pieces; the longer prefix must be taken
    vocab = Vocabulary.build([], extra_pieces=["ri", "rid", "##ing"])
    assert tokenize("riding", vocab) == [vocab.id("rid"), vocab.id("##ing")]


def test_stuck_remainder_becomes_one_unk():
    vocab = Vocabulary.build(["play"])
    assert tokenize("playing", vocab) == [vocab.id("play"), vocab.unk_id]


def test_fully_unknown_word_is_one_unk():
    vocab = Vocabulary.build(["dog"])
    assert tokenize("xyzzy", vocab) == [vocab.unk_id]


def test_multiword_phrase():
    vocab = Vocabulary.build([], ["on top of"])
    ids = tokenize("on top of", vocab)
    assert ids == [vocab.id("on"), vocab.id("top"), vocab.id("of")]


def test_empty_text_rejected():
    vocab = Vocabulary.build(["dog"])
    with pytest.raises(ContractError):
        tokenize("   ", vocab)


# ---------------------------------------------------------------------------
# box geometry


def test_geometry_quarter_box():
    # (W/4, H/4) .. (3W/4, 3H/4) must normalize to the same values for any extent
    box = BoundingBox(50.0, 25.0, 150.0, 75.0)
    geo = box_geometry(box, 200.0, 100.0)
    assert geo.tolist() == [0.25, 0.25, 0.75, 0.75, 0.25]


def test_geometry_full_image_box():
    geo = box_geometry(BoundingBox(0, 0, 64, 48), 64.0, 48.0)
    assert geo.tolist() == [0.0, 0.0, 1.0, 1.0, 1.0]


def test_geometry_zero_area_box_is_valid():
    geo = box_geometry(BoundingBox(10, 10, 10, 30), 100.0, 100.0)
    assert geo[4] == 0.0
    assert geo[0] == geo[2] == 0.1


def test_geometry_scale_invariant_power_of_two():
    box = BoundingBox(13.0, 7.0, 101.0, 59.0)
    base = box_geometry(box, 160.0, 120.0)
    for k in (1, 2, 5, 10):
        s = float(2**k)
        scaled = BoundingBox(box.x_min * s, box.y_min * s, box.x_max * s, box.y_max * s)
        geo = box_geometry(scaled, 160.0 * s, 120.0 * s)
        # power-of-two scaling is exact in binary floating point
        assert geo.tolist() == base.tolist()


@given(st.floats(min_value=0.1, max_value=87.3))
@settings(max_examples=50, deadline=None)
def test_geometry_scale_invariant_arbitrary(s):
    box = BoundingBox(13.0, 7.0, 101.0, 59.0)
    base = box_geometry(box, 160.0, 120.0)
    scaled = BoundingBox(box.x_min * s, box.y_min * s, box.x_max * s, box.y_max * s)
    geo = box_geometry(scaled, 160.0 * s, 120.0 * s)
    assert np.allclose(geo, base, rtol=0.0, atol=1e-13)


def test_geometry_rejects_nonpositive_extent():
    with pytest.raises(ContractError):
        box_geometry(BoundingBox(0, 0, 1, 1), 0.0, 100.0)


def test_geometry_rejects_box_outside_image():
    with pytest.raises(ContractError):
        box_geometry(BoundingBox(0, 0, 200, 50), 100.0, 100.0)


def test_position_embedding_is_linear_projection():
    rng = substream(7, "init")
    proj = Tensor(rng.normal(size=(5, 8)))
    bias = Tensor(rng.normal(size=(8,)))
    box = BoundingBox(10, 20, 30, 60)
    out = image_position_embedding(box, 100.0, 100.0, proj, bias)
    expected = box.normalized_geometry(100.0, 100.0) @ proj.data + bias.data
    assert np.array_equal(out.data, expected)


# ---------------------------------------------------------------------------
# relative offsets


def test_relative_lookup_depends_only_on_offset():
    rng = substream(3, "init")
    table = RelativePositionTable(Tensor(rng.normal(size=(9, 4))), clip=4)
    assert np.array_equal(relative_position_lookup(2, 5, table), relative_position_lookup(10, 13, table))
    assert not np.array_equal(relative_position_lookup(2, 5, table), relative_position_lookup(5, 2, table))


def test_relative_lookup_clamps_long_range():
    rng = substream(3, "init")
    table = RelativePositionTable(Tensor(rng.normal(size=(9, 4))), clip=4)
    assert np.array_equal(relative_position_lookup(0, 4, table), relative_position_lookup(0, 40, table))
    assert np.array_equal(relative_position_lookup(4, 0, table), relative_position_lookup(40, 0, table))


def test_relative_table_row_count_checked():
    with pytest.raises(ValidationError):
        RelativePositionTable(Tensor(np.zeros((8, 4))), clip=4)


def test_sinusoid_first_row_alternates_zero_one():
    mat = sinusoidal_positions(4, 6)
    assert mat.shape == (4, 6)
    assert mat[0].tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]


def test_sinusoid_frozen_second_row():
    mat = sinusoidal_positions(2, 4)
    expected = [math.sin(1.0), math.cos(1.0), math.sin(1.0 / 100.0), math.cos(1.0 / 100.0)]
    assert np.allclose(mat[1], expected, rtol=0.0, atol=1e-15)


# ---------------------------------------------------------------------------
# sequence assembly


def _fixture(position_mode="relative", use_image_pos=True, feature_dim=6):
    names = ["person", "hat", "traffic light"]
    vocab = Vocabulary.build(names, ["wears", "above"])
    config = desk_config(
        num_predicates=5,
        feature_dim=feature_dim,
        vocab_size=len(vocab),
        dropout=0.0,
        position_mode=position_mode,
        use_image_pos=use_image_pos,
    )
    weights = EncoderWeights.initialize(config, substream(11, "init"))
    rng = substream(11, "data")
    sub = Detection(BoundingBox(10, 10, 50, 90), 0, 1.0, rng.normal(size=feature_dim))
    obj = Detection(BoundingBox(20, 5, 40, 25), 1, 0.9, rng.normal(size=feature_dim))
    return names, vocab, config, weights, sub, obj


def test_single_word_layout():
    names, vocab, config, weights, sub, obj = _fixture()
    seq = build_sequence(sub, obj, None, 100.0, 100.0, vocab, names, weights, config)
    assert seq.length == 9
    assert seq.mask_position == 6
    assert seq.embeddings.shape == (9, config.hidden_dim)
    assert seq.segment_ids.tolist() == [0, 0, 0, 0, 0, 1, 1, 1, 1]


def test_multiword_object_shifts_nothing_before_mask():
    names, vocab, config, weights, sub, obj = _fixture()
    obj2 = Detection(obj.bbox, 2, obj.confidence, obj.feature)  # "traffic light"
    seq = build_sequence(sub, obj2, None, 100.0, 100.0, vocab, names, weights, config)
    assert seq.length == 10
    assert seq.mask_position == 6


def test_multiword_subject_shifts_mask():
    names, vocab, config, weights, sub, obj = _fixture()
    sub2 = Detection(sub.bbox, 2, sub.confidence, sub.feature)  # "traffic light"
    seq = build_sequence(sub2, obj, None, 100.0, 100.0, vocab, names, weights, config)
    assert seq.mask_position == 7


def test_word_positions_are_embedding_plus_segment():
    names, vocab, config, weights, sub, obj = _fixture()
    seq = build_sequence(sub, obj, None, 100.0, 100.0, vocab, names, weights, config)
    we, se = weights.word_embedding.data, weights.segment_embedding.data
    assert np.array_equal(seq.embeddings.data[0], we[vocab.cls_id] + se[0])
    assert np.array_equal(seq.embeddings.data[4], we[vocab.sep_id] + se[0])
    assert np.array_equal(seq.embeddings.data[5], we[vocab.id("person")] + se[1])
    assert np.array_equal(seq.embeddings.data[6], we[vocab.mask_id] + se[1])
    assert np.array_equal(seq.embeddings.data[7], we[vocab.id("hat")] + se[1])
    assert np.array_equal(seq.embeddings.data[8], we[vocab.sep_id] + se[1])


def test_exactly_one_masked_slot():
    names, vocab, config, weights, sub, obj = _fixture()
    seq = build_sequence(sub, obj, None, 100.0, 100.0, vocab, names, weights, config)
    we, se = weights.word_embedding.data, weights.segment_embedding.data
    mask_vec = we[vocab.mask_id] + se[1]
    hits = [i for i in range(seq.length) if np.array_equal(seq.embeddings.data[i], mask_vec)]
    assert hits == [6]


def test_image_slots_project_features_and_geometry():
    names, vocab, config, weights, sub, obj = _fixture()
    width = height = 100.0
    seq = build_sequence(sub, obj, None, width, height, vocab, names, weights, config)
    fp, fb = weights.feature_projection.data, weights.feature_bias.data
    ip, ib = weights.image_pos_projection.data, weights.image_pos_bias.data
    se = weights.segment_embedding.data
    union_box = sub.bbox.union(obj.bbox)
    union_feat = 0.5 * (sub.feature + obj.feature)
    rows = [
        (sub.feature, sub.bbox),
        (union_feat, union_box),
        (obj.feature, obj.bbox),
    ]
    for slot, (feat, box) in enumerate(rows, start=1):
        expected = feat @ fp + fb + box.normalized_geometry(width, height) @ ip + ib + se[0]
        assert np.allclose(seq.embeddings.data[slot], expected, rtol=0.0, atol=1e-12)


def test_union_slot_uses_enclosing_box():
    names, vocab, config, weights, sub, obj = _fixture()
    seq = build_sequence(sub, obj, None, 100.0, 100.0, vocab, names, weights, config)
    union_box = sub.bbox.union(obj.bbox)
    assert union_box.as_list() == [10.0, 5.0, 50.0, 90.0]
    # moving the object so the union changes must move only slots 2 and 3
    obj_far = Detection(BoundingBox(60, 50, 99, 99), obj.category_id, obj.confidence, obj.feature)
    seq2 = build_sequence(sub, obj_far, None, 100.0, 100.0, vocab, names, weights, config)
    assert np.array_equal(seq.embeddings.data[1], seq2.embeddings.data[1])
    assert not np.array_equal(seq.embeddings.data[2], seq2.embeddings.data[2])
    assert not np.array_equal(seq.embeddings.data[3], seq2.embeddings.data[3])


def test_explicit_union_feature_respected():
    names, vocab, config, weights, sub, obj = _fixture()
    union = np.arange(config.feature_dim, dtype=np.float64)
    seq = build_sequence(sub, obj, union, 100.0, 100.0, vocab, names, weights, config)
    seq_default = build_sequence(sub, obj, None, 100.0, 100.0, vocab, names, weights, config)
    assert not np.array_equal(seq.embeddings.data[2], seq_default.embeddings.data[2])


def test_image_pos_disabled_drops_geometry_term():
    names, vocab, config, weights, sub, obj = _fixture(use_image_pos=False)
    seq = build_sequence(sub, obj, None, 100.0, 100.0, vocab, names, weights, config)
    fp, fb = weights.feature_projection.data, weights.feature_bias.data
    se = weights.segment_embedding.data
    expected = sub.feature @ fp + fb + se[0]
    assert np.allclose(seq.embeddings.data[1], expected, rtol=0.0, atol=1e-12)


def test_language_only_fills_image_slots_with_null_token():
    names, vocab, config, weights, sub, obj = _fixture()
    seq = build_sequence(
        sub, obj, None, 100.0, 100.0, vocab, names, weights, config, language_only=True
    )
    null = weights.null_image_token.data + weights.segment_embedding.data[0]
    for slot in (1, 2, 3):
        assert np.array_equal(seq.embeddings.data[slot], null)


def test_language_only_ignores_missing_features():
    names, vocab, config, weights, sub, obj = _fixture()
    bare_sub = Detection(sub.bbox, sub.category_id, sub.confidence, None)
    bare_obj = Detection(obj.bbox, obj.category_id, obj.confidence, None)
    seq = build_sequence(
        bare_sub, bare_obj, None, 100.0, 100.0, vocab, names, weights, config, language_only=True
    )
    assert seq.length == 9


def test_multimodal_requires_features():
    names, vocab, config, weights, sub, obj = _fixture()
    bare = Detection(sub.bbox, sub.category_id, sub.confidence, None)
    with pytest.raises(ContractError):
        build_sequence(bare, obj, None, 100.0, 100.0, vocab, names, weights, config)


def test_feature_width_mismatch_rejected():
    names, vocab, config, weights, sub, obj = _fixture()
    wide = Detection(sub.bbox, 0, 1.0, np.zeros(config.feature_dim + 1))
    with pytest.raises(ContractError):
        build_sequence(wide, obj, None, 100.0, 100.0, vocab, names, weights, config)


def test_absolute_mode_adds_sinusoids():
    names, vocab, config, weights, sub, obj = _fixture(position_mode="relative")
    config_abs = config.but(position_mode="absolute")
    weights_abs = EncoderWeights(
        {n: t for n, t in weights.params.items() if "rel_table" not in n}, config_abs
    )
    seq_rel = build_sequence(sub, obj, None, 100.0, 100.0, vocab, names, weights, config)
    seq_abs = build_sequence(sub, obj, None, 100.0, 100.0, vocab, names, weights_abs, config_abs)
    sines = sinusoidal_positions(9, config.hidden_dim)
    assert np.allclose(seq_abs.embeddings.data, seq_rel.embeddings.data + sines, rtol=0.0, atol=1e-12)


def test_batch_padding_and_lengths():
    names, vocab, config, weights, sub, obj = _fixture()
    long_obj = Detection(obj.bbox, 2, obj.confidence, obj.feature)
    examples = [
        PairExample(sub, obj, 100.0, 100.0, "person", "hat"),
        PairExample(sub, long_obj, 100.0, 100.0, "person", "traffic light"),
    ]
    batch = build_sequence_batch(examples, vocab, weights, config)
    assert batch.embeddings.shape == (2, 10, config.hidden_dim)
    assert batch.lengths.tolist() == [9, 10]
    assert batch.mask_positions.tolist() == [6, 6]
    # padded slot of the short row holds the PAD embedding
    pad_vec = weights.word_embedding.data[vocab.pad_id] + weights.segment_embedding.data[1]
    assert np.array_equal(batch.embeddings.data[0, 9], pad_vec)


def test_batch_row_matches_single_build():
    names, vocab, config, weights, sub, obj = _fixture()
    seq = build_sequence(sub, obj, None, 100.0, 100.0, vocab, names, weights, config)
    batch = build_sequence_batch(
        [PairExample(sub, obj, 100.0, 100.0, "person", "hat")], vocab, weights, config
    )
    assert np.array_equal(batch.embeddings.data[0], seq.embeddings.data)


def test_overlong_sequence_rejected():
    names, vocab, config, weights, sub, obj = _fixture()
    tight = config.but(max_len=9)
    long_obj = Detection(obj.bbox, 2, obj.confidence, obj.feature)
    with pytest.raises(ContractError):
        build_sequence_batch(
            [PairExample(sub, long_obj, 100.0, 100.0, "person", "traffic light")],
            vocab, weights.__class__(
                {n: t for n, t in weights.params.items()}, tight
            ), tight,
        )


def test_empty_batch_rejected():
    names, vocab, config, weights, sub, obj = _fixture()
    with pytest.raises(ContractError):
        build_sequence_batch([], vocab, weights, config)


def test_union_feature_default_is_mean():
    names, vocab, config, weights, sub, obj = _fixture()
    got = default_union_feature(sub, obj)
    assert np.array_equal(got, 0.5 * (sub.feature + obj.feature))
