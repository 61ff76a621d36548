"""Encoder tests: init statistics, attention oracle, shapes, invariances."""

import math

import numpy as np
import pytest

from kdforge.errors import ConfigError, DimensionError
from kdforge.model import (
    EncodedBatch,
    EncoderParams,
    EncoderRun,
    ModelConfig,
    TaskHeadSpec,
    collate,
    count_parameters,
    count_parameters_for_config,
    forward_mlm,
    forward_task,
    init_params,
    multi_head_attention,
    parameter_shapes,
)
from kdforge.rng import RngState
from kdforge.tokenizer import RESERVED_PIECES, Vocabulary, encode

TABLE_CONFIG = ModelConfig()  # production defaults: hidden 384, 6 layers, 6 heads

TINY = ModelConfig(
    hidden_size=8,
    num_hidden_layers=2,
    num_attention_heads=2,
    intermediate_size=16,
    vocab_size=20,
    max_position_embeddings=12,
    hidden_dropout=0.0,
    attention_dropout=0.0,
)


def tiny_batch(b=2, l=6, vocab=20, seed=0):
    gen = np.random.default_rng(seed)
    ids = gen.integers(5, vocab, size=(b, l))
    ids[:, 0] = 2  # CLS
    mask = np.ones((b, l), dtype=np.int64)
    return EncodedBatch(ids=ids, attention_mask=mask, type_ids=np.zeros_like(ids))


# ---------------------------------------------------------------------------
# configuration and initialization
# ---------------------------------------------------------------------------


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        ModelConfig(hidden_size=10, num_attention_heads=3)


def test_init_deterministic_bitwise():
    a = init_params(TINY, RngState(4))
    b = init_params(TINY, RngState(4))
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a[name], b[name])


def test_init_layer_norm_gains_are_one_biases_zero():
    params = init_params(TINY, RngState(0))
    for name, value in params.items():
        if name.endswith(".gain"):
            assert np.all(value == 1.0)
        if name.endswith((".bias", ".shift")):
            assert np.all(value == 0.0)


def test_init_weight_stddev_sampling_statistics():
    config = ModelConfig(hidden_size=384, num_hidden_layers=1)
    params = init_params(config, RngState(7))
    w = params["layer.0.attn.q.weight"]
    assert w.shape == (384, 384)
    sd = float(w.std())
    assert abs(sd - 0.02) < 0.002
    assert float(np.abs(w).max()) <= 2 * 0.02 + 1e-7


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------


def test_count_parameters_production_config():
    assert count_parameters_for_config(TABLE_CONFIG, mlm_head=True) == 29_831_610
    # closed-form check: embeddings + layers + tied MLM head
    embeddings = 30522 * 384 + 512 * 384 + 2 * 384 + 2 * 384
    per_layer = 4 * (384 * 384 + 384) + 2 * 384 + (384 * 3072 + 3072) + (3072 * 384 + 384) + 2 * 384
    head = (384 * 384 + 384) + 2 * 384 + 30522
    assert per_layer == 2_955_648
    assert embeddings + 6 * per_layer + head == 29_831_610


def test_count_parameters_degenerate_config():
    config = ModelConfig(
        hidden_size=4,
        num_hidden_layers=0,
        num_attention_heads=1,
        intermediate_size=2,
        vocab_size=10,
        max_position_embeddings=4,
        type_vocab_size=2,
    )
    # embeddings only: 10*4 + 4*4 + 2*4 + ln(2*4) = 72
    assert count_parameters_for_config(config, mlm_head=False) == 72


def test_count_parameters_linear_in_layers():
    c6 = count_parameters_for_config(TABLE_CONFIG)
    c12 = count_parameters_for_config(ModelConfig(num_hidden_layers=12))
    assert c12 - c6 == 6 * 2_955_648


def test_count_parameters_pure_function_of_config():
    params = init_params(TINY, RngState(3))
    assert count_parameters(params) == count_parameters_for_config(TINY)
    again = init_params(TINY, RngState(99))
    assert count_parameters(again) == count_parameters(params)


def test_task_head_parameter_shapes():
    head = TaskHeadSpec(kind="classification", num_labels=3)
    shapes = parameter_shapes(TINY, mlm_head=False, task_head=head)
    assert shapes["task.head.weight"] == (8, 3)
    assert shapes["task.head.bias"] == (3,)
    assert "mlm.transform.weight" not in shapes


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def attention_params(values: dict) -> EncoderParams:
    return EncoderParams({k: np.asarray(v, dtype=np.float64) for k, v in values.items()})


def test_zero_query_weights_give_uniform_attention():
    h, l = 4, 5
    gen = np.random.default_rng(0)
    params = attention_params(
        {
            "layer.0.attn.q.weight": np.zeros((h, h)),
            "layer.0.attn.q.bias": np.zeros(h),
            "layer.0.attn.k.weight": gen.normal(size=(h, h)),
            "layer.0.attn.k.bias": np.zeros(h),
            "layer.0.attn.v.weight": np.eye(h),
            "layer.0.attn.v.bias": np.zeros(h),
            "layer.0.attn.out.weight": np.eye(h),
            "layer.0.attn.out.bias": np.zeros(h),
        }
    )
    x = gen.normal(size=(1, l, h))
    mask = np.array([[1, 1, 1, 0, 0]])
    out = multi_head_attention(x, params, mask, num_heads=2)
    # zero Q -> uniform weights over the 3 unmasked positions for every query
    expected = np.tile(x[0, :3, :].mean(axis=0), (l, 1))
    assert np.allclose(out[0], expected, atol=1e-9)


def test_attention_row_sums_to_one():
    h = 6
    gen = np.random.default_rng(1)
    values = {}
    for proj in ("q", "k", "v", "out"):
        values[f"layer.0.attn.{proj}.weight"] = gen.normal(size=(h, h)) * 0.3
        values[f"layer.0.attn.{proj}.bias"] = np.zeros(h)
    params = attention_params(values)
    from kdforge.model import _AttentionBlock

    block = _AttentionBlock(params, "layer.0.attn", 3, 0.0, None, False)
    x = gen.normal(size=(2, 4, h))
    block.forward(x, np.ones((2, 4), dtype=np.int64))
    probs = block.softmax.y
    assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-5)


def test_attention_hand_computed_two_by_two():
    """1 head, L=2, d_k=1: fully scalar pencil-and-paper attention."""
    params = attention_params(
        {
            "layer.0.attn.q.weight": [[0.5]],
            "layer.0.attn.q.bias": [0.1],
            "layer.0.attn.k.weight": [[-0.3]],
            "layer.0.attn.k.bias": [0.2],
            "layer.0.attn.v.weight": [[2.0]],
            "layer.0.attn.v.bias": [0.0],
            "layer.0.attn.out.weight": [[1.0]],
            "layer.0.attn.out.bias": [0.0],
        }
    )
    x = np.array([[[1.0], [2.0]]])
    out = multi_head_attention(x, params, np.ones((1, 2), dtype=np.int64), num_heads=1)

    # scalar oracle, written out step by step
    q = [1.0 * 0.5 + 0.1, 2.0 * 0.5 + 0.1]  # [0.6, 1.1]
    k = [1.0 * -0.3 + 0.2, 2.0 * -0.3 + 0.2]  # [-0.1, -0.4]
    v = [2.0, 4.0]
    expected = []
    for qi in q:
        s0, s1 = qi * k[0], qi * k[1]  # d_k = 1, no scaling effect
        m = max(s0, s1)
        e0, e1 = math.exp(s0 - m), math.exp(s1 - m)
        p0, p1 = e0 / (e0 + e1), e1 / (e0 + e1)
        expected.append(p0 * v[0] + p1 * v[1])
    assert np.allclose(out[0, :, 0], expected, atol=1e-12)


def test_attention_mask_length_mismatch():
    params = init_params(TINY, RngState(0), mlm_head=False)
    x = np.zeros((1, 6, 8), dtype=np.float32)
    with pytest.raises(DimensionError):
        multi_head_attention(x, params, np.ones((1, 4)), num_heads=2)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def test_forward_mlm_shape_contract():
    params = init_params(TINY, RngState(1))
    logits = forward_mlm(tiny_batch(), params, TINY)
    assert logits.shape == (2, 6, 20)


def test_forward_mlm_eval_deterministic():
    params = init_params(TINY, RngState(1))
    batch = tiny_batch()
    a = forward_mlm(batch, params, TINY)
    b = forward_mlm(batch, params, TINY)
    assert np.array_equal(a, b)


def test_forward_mlm_logits_finite_nondegenerate():
    params = init_params(TINY, RngState(2))
    logits = forward_mlm(tiny_batch(), params, TINY)
    assert np.all(np.isfinite(logits))
    # statistical smoke check: per-position rows vary across the vocabulary
    assert float(logits.std(axis=-1).min()) > 1e-4


def test_forward_task_shapes():
    head2 = TaskHeadSpec(kind="classification", num_labels=2)
    head1 = TaskHeadSpec(kind="regression", num_labels=1)
    params2 = init_params(TINY, RngState(1), mlm_head=False, task_head=head2)
    params1 = init_params(TINY, RngState(1), mlm_head=False, task_head=head1)
    batch = tiny_batch()
    assert forward_task(batch, params2, TINY, head2).shape == (2, 2)
    assert forward_task(batch, params1, TINY, head1).shape == (2, 1)


def test_forward_task_permutation_equivariance():
    head = TaskHeadSpec(kind="classification", num_labels=3)
    params = init_params(TINY, RngState(5), mlm_head=False, task_head=head)
    batch = tiny_batch(b=5)
    logits = forward_task(batch, params, TINY, head)
    perm = np.array([3, 0, 4, 1, 2])
    shuffled = EncodedBatch(
        ids=batch.ids[perm],
        attention_mask=batch.attention_mask[perm],
        type_ids=batch.type_ids[perm],
    )
    logits_perm = forward_task(shuffled, params, TINY, head)
    assert np.allclose(logits_perm, logits[perm], atol=1e-5)


def test_sequence_length_error():
    params = init_params(TINY, RngState(0))
    batch = tiny_batch(l=13)  # max positions is 12
    with pytest.raises(DimensionError):
        forward_mlm(batch, params, TINY)


def test_pad_positions_do_not_influence_real_positions():
    params = init_params(TINY, RngState(6))
    gen = np.random.default_rng(0)
    ids = gen.integers(5, 20, size=(2, 5))
    short = EncodedBatch(
        ids=ids,
        attention_mask=np.ones((2, 5), dtype=np.int64),
        type_ids=np.zeros((2, 5), dtype=np.int64),
    )
    padded_ids = np.concatenate([ids, np.zeros((2, 3), dtype=np.int64)], axis=1)
    padded = EncodedBatch(
        ids=padded_ids,
        attention_mask=np.concatenate(
            [np.ones((2, 5), dtype=np.int64), np.zeros((2, 3), dtype=np.int64)], axis=1
        ),
        type_ids=np.zeros((2, 8), dtype=np.int64),
    )
    a = forward_mlm(short, params, TINY)
    b = forward_mlm(padded, params, TINY)
    assert np.allclose(a, b[:, :5, :], atol=1e-5)


def test_training_forward_reproducible_from_rng():
    config = ModelConfig(
        hidden_size=8,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=16,
        vocab_size=20,
        max_position_embeddings=12,
        hidden_dropout=0.2,
        attention_dropout=0.2,
    )
    params = init_params(config, RngState(1))
    batch = tiny_batch()
    a = forward_mlm(batch, params, config, rng=RngState(7), training=True)
    b = forward_mlm(batch, params, config, rng=RngState(7), training=True)
    c = forward_mlm(batch, params, config, rng=RngState(8), training=True)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_init_params_equal_count_with_tied_decoder():
    # the decoder reuses the embedding matrix: no extra V x H block exists
    shapes = parameter_shapes(TINY, mlm_head=True)
    decoder_like = [s for n, s in shapes.items() if s == (TINY.vocab_size, TINY.hidden_size)]
    assert len(decoder_like) == 1  # the token embedding itself
