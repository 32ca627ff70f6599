"""Encoder stack checks: attention math against a straight-line oracle,
masking, determinism, gradients, and snapshot IO."""

import math

import numpy as np
import pytest

from vrebert import numerics as nm
from vrebert.encoder import (
    EncoderWeights,
    ModelConfig,
    desk_config,
    encoder_forward_batch,
    fingerprint,
    load_model,
    masked_predict,
    masked_predict_batch,
    paper_config,
    predict_batch,
    rel_attention_scores,
    save_model,
)
from vrebert.errors import ConfigurationError, ContractError, FormatError
from vrebert.numerics import Tensor
from vrebert.seeding import substream


def _tiny_config(**overrides):
    base = dict(
        hidden_dim=8,
        num_heads=2,
        num_layers=1,
        ff_dim=16,
        num_predicates=5,
        feature_dim=6,
        vocab_size=11,
        dropout=0.0,
        rel_clip=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# config


def test_head_split_must_be_even():
    with pytest.raises(ConfigurationError):
        _tiny_config(hidden_dim=9)


def test_dropout_range_checked():
    with pytest.raises(ConfigurationError):
        _tiny_config(dropout=1.0)


def test_position_mode_checked():
    with pytest.raises(ConfigurationError):
        _tiny_config(position_mode="learned")


def test_max_len_floor():
    with pytest.raises(ConfigurationError):
        _tiny_config(max_len=8)


def test_desk_preset_shape():
    cfg = desk_config(num_predicates=70, feature_dim=32, vocab_size=120)
    assert (cfg.hidden_dim, cfg.num_heads, cfg.num_layers, cfg.ff_dim) == (64, 4, 2, 128)
    assert cfg.dropout == 0.1


def test_paper_preset_shape():
    cfg = paper_config(num_predicates=70, feature_dim=2048, vocab_size=120)
    assert (cfg.hidden_dim, cfg.num_heads, cfg.num_layers, cfg.ff_dim) == (768, 12, 12, 3072)


def test_but_returns_modified_copy():
    cfg = _tiny_config()
    other = cfg.but(position_mode="absolute")
    assert other.position_mode == "absolute"
    assert cfg.position_mode == "relative"


# ---------------------------------------------------------------------------
# initialization


def test_rel_tables_start_at_zero():
    cfg = _tiny_config(num_layers=2)
    w = EncoderWeights.initialize(cfg, substream(0, "init"))
    for i in range(2):
        assert not w.rel_table(i).data.any()


def test_layer_norm_gains_start_at_one():
    w = EncoderWeights.initialize(_tiny_config(), substream(0, "init"))
    assert w.params["layer0.ln1_gamma"].data.tolist() == [1.0] * 8
    assert not w.params["layer0.ln1_beta"].data.any()


def test_init_is_seed_deterministic():
    cfg = _tiny_config()
    a = EncoderWeights.initialize(cfg, substream(5, "init"))
    b = EncoderWeights.initialize(cfg, substream(5, "init"))
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
    c = EncoderWeights.initialize(cfg, substream(6, "init"))
    assert not np.array_equal(a.params["layer0.wq"].data, c.params["layer0.wq"].data)


def test_weights_reject_wrong_shape():
    cfg = _tiny_config()
    w = EncoderWeights.initialize(cfg, substream(0, "init"))
    params = dict(w.params)
    params["head_bias"] = Tensor(np.zeros(7), requires_grad=True)
    with pytest.raises(ContractError):
        EncoderWeights(params, cfg)


def test_weights_reject_missing_name():
    cfg = _tiny_config()
    w = EncoderWeights.initialize(cfg, substream(0, "init"))
    params = dict(w.params)
    del params["head_bias"]
    with pytest.raises(ContractError):
        EncoderWeights(params, cfg)


def test_absolute_mode_has_no_rel_tables():
    cfg = _tiny_config(position_mode="absolute")
    w = EncoderWeights.initialize(cfg, substream(0, "init"))
    assert not any("rel_table" in name for name in w.params)
    with pytest.raises(ContractError):
        w.rel_table(0)


def test_shared_table_is_single_parameter():
    cfg = _tiny_config(num_layers=3, rel_table_mode="shared")
    w = EncoderWeights.initialize(cfg, substream(0, "init"))
    tables = [name for name in w.params if "rel_table" in name]
    assert tables == ["rel_table"]
    assert w.rel_table(0) is w.rel_table(2)


def test_per_head_table_shape():
    cfg = _tiny_config(rel_table_mode="per-head")
    w = EncoderWeights.initialize(cfg, substream(0, "init"))
    assert w.rel_table(0).shape == (2, 7, 4)


# ---------------------------------------------------------------------------
# forward oracle


def _oracle_forward(x, w, cfg, lengths=None):
    """Straight-line replay of one batch element with plain numpy loops."""
    x = np.array(x, dtype=np.float64)
    L = x.shape[0]
    heads, dz = cfg.num_heads, cfg.head_dim

    def layer_norm(v, gamma, beta):
        mu = v.mean(-1, keepdims=True)
        var = v.var(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * gamma + beta

    def gelu(v):
        from scipy.special import erf

        return 0.5 * v * (1.0 + erf(v / math.sqrt(2.0)))

    valid = L if lengths is None else int(lengths)
    for li in range(cfg.num_layers):
        p = {k.split(".", 1)[1]: t.data for k, t in w.params.items() if k.startswith(f"layer{li}.")}
        q_all = x @ p["wq"]
        k_all = x @ p["wk"]
        v_all = x @ p["wv"] + p["vb"]
        ctx = np.zeros((L, cfg.hidden_dim))
        for h in range(heads):
            sl = slice(h * dz, (h + 1) * dz)
            q, k, v = q_all[:, sl], k_all[:, sl], v_all[:, sl]
            if cfg.position_mode == "relative":
                table = w.rel_table(li).data
                table_h = table[h] if table.ndim == 3 else table
            scores = np.full((L, L), -np.inf)
            for i in range(L):
                for j in range(valid):
                    if cfg.position_mode == "relative":
                        a = table_h[int(np.clip(j - i, -cfg.rel_clip, cfg.rel_clip)) + cfg.rel_clip]
                        s = q[i] @ k[j] + q[i] @ a + k[j] @ a
                    else:
                        s = q[i] @ k[j]
                    scores[i, j] = s / math.sqrt(dz)
            e = np.exp(scores - scores.max(-1, keepdims=True))
            probs = e / e.sum(-1, keepdims=True)
            ctx[:, sl] = probs @ v
        x = layer_norm(x + ctx @ p["wo"] + p["ob"], p["ln1_gamma"], p["ln1_beta"])
        ff = gelu(x @ p["ff1"] + p["ff1_bias"]) @ p["ff2"] + p["ff2_bias"]
        x = layer_norm(x + ff, p["ln2_gamma"], p["ln2_beta"])
    return x


def test_forward_matches_straight_line_oracle_relative():
    cfg = _tiny_config(num_layers=2)
    w = EncoderWeights.initialize(cfg, substream(1, "init"))
    rng = substream(1, "data")
    # nonzero tables so all three score terms matter
    for i in range(cfg.num_layers):
        w.rel_table(i).data[:] = rng.normal(0, 0.5, size=w.rel_table(i).shape)
    x = rng.normal(size=(3, cfg.hidden_dim))
    got = encoder_forward_batch(Tensor(x[None]), np.array([3]), w, cfg)
    want = _oracle_forward(x, w, cfg)
    assert np.allclose(got.data[0], want, rtol=0.0, atol=1e-10)


def test_forward_matches_straight_line_oracle_per_head():
    cfg = _tiny_config(rel_table_mode="per-head")
    w = EncoderWeights.initialize(cfg, substream(2, "init"))
    rng = substream(2, "data")
    w.rel_table(0).data[:] = rng.normal(0, 0.5, size=w.rel_table(0).shape)
    x = rng.normal(size=(5, cfg.hidden_dim))
    got = encoder_forward_batch(Tensor(x[None]), np.array([5]), w, cfg)
    want = _oracle_forward(x, w, cfg)
    assert np.allclose(got.data[0], want, rtol=0.0, atol=1e-10)


def test_forward_matches_straight_line_oracle_absolute():
    cfg = _tiny_config(position_mode="absolute")
    w = EncoderWeights.initialize(cfg, substream(3, "init"))
    rng = substream(3, "data")
    x = rng.normal(size=(4, cfg.hidden_dim))
    got = encoder_forward_batch(Tensor(x[None]), np.array([4]), w, cfg)
    want = _oracle_forward(x, w, cfg)
    assert np.allclose(got.data[0], want, rtol=0.0, atol=1e-10)


def test_zero_offset_table_equals_plain_attention():
    # with all-zero tables the relative form collapses to content-only scores
    cfg_rel = _tiny_config()
    w_rel = EncoderWeights.initialize(cfg_rel, substream(4, "init"))
    cfg_abs = cfg_rel.but(position_mode="absolute")
    w_abs = EncoderWeights(
        {n: t for n, t in w_rel.params.items() if "rel_table" not in n}, cfg_abs
    )
    x = substream(4, "data").normal(size=(1, 6, cfg_rel.hidden_dim))
    out_rel = encoder_forward_batch(Tensor(x), np.array([6]), w_rel, cfg_rel)
    out_abs = encoder_forward_batch(Tensor(x), np.array([6]), w_abs, cfg_abs)
    assert np.allclose(out_rel.data, out_abs.data, rtol=0.0, atol=1e-12)


def test_zero_layers_is_identity():
    cfg = _tiny_config(num_layers=0)
    w = EncoderWeights.initialize(cfg, substream(0, "init"))
    x = substream(0, "data").normal(size=(2, 4, cfg.hidden_dim))
    out = encoder_forward_batch(Tensor(x), np.array([4, 4]), w, cfg)
    assert np.array_equal(out.data, x)


def test_eval_forward_is_deterministic():
    cfg = _tiny_config(dropout=0.3)
    w = EncoderWeights.initialize(cfg, substream(9, "init"))
    x = substream(9, "data").normal(size=(2, 5, cfg.hidden_dim))
    a = encoder_forward_batch(Tensor(x), np.array([5, 5]), w, cfg, train=False)
    b = encoder_forward_batch(Tensor(x), np.array([5, 5]), w, cfg, train=False)
    assert np.array_equal(a.data, b.data)


def test_train_forward_requires_rng_when_dropping():
    cfg = _tiny_config(dropout=0.3)
    w = EncoderWeights.initialize(cfg, substream(9, "init"))
    x = substream(9, "data").normal(size=(1, 5, cfg.hidden_dim))
    with pytest.raises(ContractError):
        encoder_forward_batch(Tensor(x), np.array([5]), w, cfg, train=True)


def test_padding_content_cannot_leak():
    cfg = _tiny_config(num_layers=2)
    w = EncoderWeights.initialize(cfg, substream(6, "init"))
    rng = substream(6, "data")
    x = rng.normal(size=(1, 7, cfg.hidden_dim))
    lengths = np.array([5])
    base = encoder_forward_batch(Tensor(x.copy()), lengths, w, cfg)
    x2 = x.copy()
    x2[0, 5:] = rng.normal(size=(2, cfg.hidden_dim)) * 100.0
    poked = encoder_forward_batch(Tensor(x2), lengths, w, cfg)
    assert np.array_equal(base.data[0, :5], poked.data[0, :5])


def test_short_row_matches_unpadded_run():
    cfg = _tiny_config(num_layers=2)
    w = EncoderWeights.initialize(cfg, substream(7, "init"))
    rng = substream(7, "data")
    x = rng.normal(size=(4, cfg.hidden_dim))
    alone = encoder_forward_batch(Tensor(x[None]), np.array([4]), w, cfg)
    padded_x = np.concatenate([x, np.zeros((3, cfg.hidden_dim))])[None]
    padded = encoder_forward_batch(Tensor(padded_x), np.array([4]), w, cfg)
    assert np.allclose(alone.data[0], padded.data[0, :4], rtol=0.0, atol=1e-12)


def test_forward_shape_validation():
    cfg = _tiny_config()
    w = EncoderWeights.initialize(cfg, substream(0, "init"))
    with pytest.raises(ContractError):
        encoder_forward_batch(Tensor(np.zeros((5, cfg.hidden_dim))), np.array([5]), w, cfg)
    with pytest.raises(ContractError):
        encoder_forward_batch(Tensor(np.zeros((1, 5, cfg.hidden_dim + 1))), np.array([5]), w, cfg)


# ---------------------------------------------------------------------------
# gradients


def test_query_weight_gradient_checks():
    cfg = _tiny_config()
    w = EncoderWeights.initialize(cfg, substream(8, "init"))
    rng = substream(8, "data")
    w.rel_table(0).data[:] = rng.normal(0, 0.3, size=w.rel_table(0).shape)
    x = rng.normal(size=(1, 4, cfg.hidden_dim))

    probes = [w.params["layer0.wq"], w.rel_table(0), w.params["layer0.ln2_gamma"]]

    def loss():
        out = encoder_forward_batch(Tensor(x), np.array([4]), w, cfg)
        return nm.mean_all(out)

    err = nm.finite_diff_check(loss, probes, max_coords_per_param=6, rng=substream(8, "shuffle"))
    assert err < 1e-6


# ---------------------------------------------------------------------------
# prediction head


def test_zeroed_head_predicts_exactly_uniform():
    cfg = _tiny_config()
    w = EncoderWeights.initialize(cfg, substream(10, "init"))
    w.params["head_weight"].data[:] = 0.0
    w.params["head_bias"].data[:] = 0.0
    x = substream(10, "data").normal(size=(3, 6, cfg.hidden_dim))
    hidden = encoder_forward_batch(Tensor(x), np.array([6, 6, 6]), w, cfg)
    dist = masked_predict_batch(hidden, np.array([2, 3, 4]), w)
    assert np.array_equal(dist.data, np.full((3, 5), 0.2))


def test_predict_rows_sum_to_one():
    cfg = _tiny_config()
    w = EncoderWeights.initialize(cfg, substream(11, "init"))
    x = substream(11, "data").normal(size=(4, 6, cfg.hidden_dim))
    hidden = encoder_forward_batch(Tensor(x), np.array([6, 6, 6, 6]), w, cfg)
    dist = masked_predict_batch(hidden, np.array([1, 2, 3, 4]), w)
    assert np.allclose(dist.data.sum(axis=1), 1.0, rtol=0.0, atol=1e-12)
    assert (dist.data > 0).all()


def test_head_reads_the_requested_slot():
    cfg = _tiny_config()
    w = EncoderWeights.initialize(cfg, substream(12, "init"))
    x = substream(12, "data").normal(size=(1, 6, cfg.hidden_dim))
    hidden = encoder_forward_batch(Tensor(x), np.array([6]), w, cfg)
    d2 = masked_predict_batch(hidden, np.array([2]), w)
    hw, hb = w.params["head_weight"].data, w.params["head_bias"].data
    logits = hidden.data[0, 2] @ hw + hb
    e = np.exp(logits - logits.max())
    assert np.allclose(d2.data[0], e / e.sum(), rtol=0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# snapshots


def _full_fixture():
    from vrebert.data import BoundingBox, Detection
    from vrebert.embedding import PairExample, Vocabulary, build_sequence_batch

    names = ["person", "hat"]
    vocab = Vocabulary.build(names, ["wears", "above"])
    cfg = desk_config(num_predicates=4, feature_dim=6, vocab_size=len(vocab), dropout=0.0)
    w = EncoderWeights.initialize(cfg, substream(20, "init"))
    rng = substream(20, "data")
    sub = Detection(BoundingBox(10, 10, 50, 90), 0, 1.0, rng.normal(size=6))
    obj = Detection(BoundingBox(20, 5, 40, 25), 1, 0.9, rng.normal(size=6))
    batch = build_sequence_batch(
        [PairExample(sub, obj, 100.0, 100.0, "person", "hat")], vocab, w, cfg
    )
    return cfg, w, batch


def test_snapshot_round_trip_preserves_predictions(tmp_path):
    cfg, w, batch = _full_fixture()
    before = predict_batch(batch, w, cfg)
    path = tmp_path / "model.vrw"
    save_model(path, w)
    restored = load_model(path)
    assert restored.config == cfg
    for name in w.params:
        assert np.array_equal(restored.params[name].data, w.params[name].data)
    after = predict_batch(batch, restored, cfg)
    assert np.array_equal(before.data, after.data)


def test_snapshot_without_config_record_rejected(tmp_path):
    cfg, w, _ = _full_fixture()
    path = tmp_path / "bare.vrw"
    nm.save_parameters(path, w.params)
    with pytest.raises(FormatError):
        load_model(path)


def test_fingerprint_tracks_content(tmp_path):
    cfg, w, _ = _full_fixture()
    fp = fingerprint(w)
    path = tmp_path / "model.vrw"
    save_model(path, w)
    assert fingerprint(load_model(path)) == fp
    w.params["head_bias"].data[0] += 1.0
    assert fingerprint(w) != fp


def test_single_predict_matches_batch(tmp_path):
    from vrebert.data import BoundingBox, Detection
    from vrebert.embedding import Vocabulary, build_sequence

    names = ["person", "hat"]
    vocab = Vocabulary.build(names, ["wears"])
    cfg = desk_config(num_predicates=4, feature_dim=6, vocab_size=len(vocab), dropout=0.0)
    w = EncoderWeights.initialize(cfg, substream(21, "init"))
    rng = substream(21, "data")
    sub = Detection(BoundingBox(10, 10, 50, 90), 0, 1.0, rng.normal(size=6))
    obj = Detection(BoundingBox(20, 5, 40, 25), 1, 0.9, rng.normal(size=6))
    seq = build_sequence(sub, obj, None, 100.0, 100.0, vocab, names, w, cfg)
    dist = masked_predict(seq, w, cfg)
    assert dist.shape == (4,)
    assert abs(dist.sum() - 1.0) < 1e-12


def test_rel_attention_scores_is_exposed():
    rng = substream(22, "init")
    q = Tensor(rng.normal(size=(1, 1, 3, 4)))
    k = Tensor(rng.normal(size=(1, 1, 3, 4)))
    table = Tensor(rng.normal(size=(7, 4)))
    got = rel_attention_scores(q, k, table, 3)
    want = nm.relative_scores(q, k, table, 3)
    assert np.array_equal(got.data, want.data)
