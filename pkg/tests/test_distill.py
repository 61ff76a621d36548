"""Distillation loss algebra and training-loop contract tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kdforge.data import generate_mlm_corpus
from kdforge.distill import (
    DistillConfig,
    DistillationLossOp,
    combined_loss,
    distillation_loss,
    kl_divergence,
    run_distillation,
    soften,
)
from kdforge.errors import (
    CompatibilityError,
    ConfigError,
    DistributionError,
    InputError,
)
from kdforge.model import EncodedBatch, EncoderRun, ModelConfig, init_params
from kdforge.optim import AdamWConfig
from kdforge.rng import RngState
from kdforge.tensor import softmax_rows
from kdforge.tokenizer import build_vocab, encode


# ---------------------------------------------------------------------------
# soften
# ---------------------------------------------------------------------------


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-30, 30)))
def test_soften_unit_temperature_is_softmax(logits):
    assert np.allclose(soften(logits, 1.0), softmax_rows(logits), atol=1e-12)


def test_soften_uniform_limit():
    out = soften(np.array([5.0, 1.0]), 1000.0)
    assert np.allclose(out, [0.501, 0.499], atol=1e-3)


def test_soften_reduces_to_scaled_softmax():
    out = soften(np.array([2.0, 0.0]), 2.0)
    e = math.exp(1.0)
    assert np.allclose(out, [e / (e + 1), 1 / (e + 1)], atol=1e-12)
    assert np.allclose(out, [0.73106, 0.26894], atol=1e-5)


def test_soften_rejects_nonpositive_temperature():
    with pytest.raises(ConfigError):
        soften(np.array([1.0, 0.0]), 0.0)
    with pytest.raises(ConfigError):
        soften(np.array([1.0, 0.0]), -2.0)


@settings(max_examples=150, deadline=None)
@given(
    st.lists(st.integers(-20, 20), min_size=2, max_size=8, unique=True),
    st.floats(0.05, 50.0),
)
def test_soften_preserves_argmax(int_logits, temperature):
    logits = np.array(int_logits, dtype=np.float64)  # distinct: argmax unique
    assert int(np.argmax(soften(logits, temperature))) == int(np.argmax(logits))


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------


def test_kl_identity_is_zero():
    p = np.array([0.2, 0.5, 0.3])
    assert abs(kl_divergence(p, p)) < 1e-9


def test_kl_one_hot_analytic_case():
    assert kl_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(
        math.log(2.0), abs=1e-12
    )


def test_kl_nonnegative_gibbs_inequality():
    gen = np.random.default_rng(0)
    for _ in range(1000):
        p = gen.dirichlet(np.ones(5))
        q = gen.dirichlet(np.ones(5))
        assert kl_divergence(p, q) >= -1e-12


def test_kl_rejects_unnormalized():
    with pytest.raises(DistributionError):
        kl_divergence(np.array([0.5, 0.4]), np.array([0.5, 0.5]))
    with pytest.raises(DistributionError):
        kl_divergence(np.array([0.5, 0.5]), np.array([0.9, 0.3]))


def test_kl_zero_times_log_zero_convention():
    assert np.isfinite(kl_divergence(np.array([1.0, 0.0]), np.array([1.0, 0.0])))


# ---------------------------------------------------------------------------
# distillation loss
# ---------------------------------------------------------------------------


def test_distillation_loss_zero_for_identical_logits():
    gen = np.random.default_rng(1)
    logits = gen.normal(size=(2, 5, 9))
    mask = np.zeros((2, 5), dtype=bool)
    mask[0, 1] = mask[1, 3] = True
    assert distillation_loss(logits, logits.copy(), 2.0, mask) < 1e-7


def test_distillation_loss_shift_invariance():
    gen = np.random.default_rng(2)
    teacher = gen.normal(size=(1, 4, 6))
    student = gen.normal(size=(1, 4, 6))
    mask = np.ones((1, 4), dtype=bool)
    base = distillation_loss(teacher, student, 2.0, mask)
    shifted = distillation_loss(teacher + 3.7, student - 1.2, 2.0, mask)
    assert shifted == pytest.approx(base, abs=1e-9)


def test_distillation_loss_two_class_scalar_oracle():
    """Teacher [2,0] vs student [0,2] at T=2.

    Scalar oracle: both soften to softmax([1,0]) mirrored, p = e/(1+e), and
    KL = p*ln(p/(1-p)) + (1-p)*ln((1-p)/p) = (2p-1)*ln(e) = 2p-1.
    """
    p = math.exp(1.0) / (1.0 + math.exp(1.0))
    expected = p * math.log(p / (1 - p)) + (1 - p) * math.log((1 - p) / p)
    assert expected == pytest.approx(2 * p - 1, abs=1e-12)

    teacher = np.array([[[2.0, 0.0]]])
    student = np.array([[[0.0, 2.0]]])
    mask = np.ones((1, 1), dtype=bool)
    value = distillation_loss(teacher, student, 2.0, mask)
    assert value == pytest.approx(expected, abs=1e-9)
    assert value == pytest.approx(0.4621171572600098, abs=1e-9)


def test_distillation_loss_requires_selected_positions():
    logits = np.zeros((1, 3, 4))
    with pytest.raises(InputError):
        distillation_loss(logits, logits, 2.0, np.zeros((1, 3), dtype=bool))


def test_distillation_loss_shape_mismatch():
    with pytest.raises(CompatibilityError):
        distillation_loss(
            np.zeros((1, 2, 4)), np.zeros((1, 2, 5)), 2.0, np.ones((1, 2), dtype=bool)
        )


def test_distillation_gradient_matches_finite_differences():
    gen = np.random.default_rng(3)
    teacher = gen.normal(size=(6, 5))
    student = gen.normal(size=(6, 5))
    op = DistillationLossOp()
    op.forward(teacher, student, 2.0)
    analytic = op.backward()
    fd = np.zeros_like(student)
    for i in range(student.size):
        h = 1e-6
        sp = student.reshape(-1).copy()
        sm = sp.copy()
        sp[i] += h
        sm[i] -= h
        lp = DistillationLossOp().forward(teacher, sp.reshape(student.shape), 2.0)
        lm = DistillationLossOp().forward(teacher, sm.reshape(student.shape), 2.0)
        fd.reshape(-1)[i] = (lp - lm) / (2 * h)
    assert np.max(np.abs(analytic - fd)) < 1e-6


# ---------------------------------------------------------------------------
# combined loss
# ---------------------------------------------------------------------------


def test_combined_loss_alpha_limits():
    assert combined_loss(0.4, 0.6, alpha=0.0, temperature=2.0) == 0.6
    assert combined_loss(0.4, 0.6, alpha=1.0, temperature=1.0) == 0.4


def test_combined_loss_arithmetic_oracle():
    assert combined_loss(0.4, 0.6, alpha=0.5, temperature=2.0) == pytest.approx(1.1)


def test_combined_loss_alpha_derivative():
    distill, ce, t = 0.37, 0.91, 2.5
    h = 1e-7
    fd = (
        combined_loss(distill, ce, 0.5 + h, t) - combined_loss(distill, ce, 0.5 - h, t)
    ) / (2 * h)
    assert fd == pytest.approx(t**2 * distill - ce, rel=1e-6)


def test_combined_loss_validates_inputs():
    with pytest.raises(ConfigError):
        combined_loss(0.1, 0.1, alpha=1.5, temperature=2.0)
    with pytest.raises(ConfigError):
        combined_loss(0.1, 0.1, alpha=0.5, temperature=0.0)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

STUDENT = ModelConfig(
    hidden_size=16,
    num_hidden_layers=1,
    num_attention_heads=2,
    intermediate_size=32,
    vocab_size=40,
    max_position_embeddings=16,
    hidden_dropout=0.1,
    attention_dropout=0.1,
)
TEACHER = ModelConfig(
    hidden_size=32,
    num_hidden_layers=2,
    num_attention_heads=2,
    intermediate_size=64,
    vocab_size=40,
    max_position_embeddings=16,
    hidden_dropout=0.1,
    attention_dropout=0.1,
)


def small_sequences(n=24, max_len=12):
    lines = generate_mlm_corpus(n, RngState(0), n_frames=3)
    vocab = build_vocab(lines, target_size=40)
    return [encode(line, vocab, max_len) for line in lines], vocab


def small_distill_config(**over):
    base = dict(
        temperature=2.0,
        alpha=0.5,
        epochs=2,
        batch_size=6,
        learning_rate=1e-3,
        max_len=12,
        seed=3,
    )
    base.update(over)
    return DistillConfig(**base)


def test_alpha_zero_equals_plain_mlm_training():
    sequences, _ = small_sequences()
    teacher_params = init_params(TEACHER, RngState(10))

    student_a = init_params(STUDENT, RngState(11))
    _, report_plain = run_distillation(
        student_a, STUDENT, list(sequences), small_distill_config(alpha=0.0),
        AdamWConfig(learning_rate=1e-3), teacher=None,
    )
    student_b = init_params(STUDENT, RngState(11))
    _, report_kd0 = run_distillation(
        student_b, STUDENT, list(sequences), small_distill_config(alpha=0.0),
        AdamWConfig(learning_rate=1e-3), teacher=(teacher_params, TEACHER),
    )
    for a, b in zip(report_plain.epochs, report_kd0.epochs):
        assert a.train_loss == pytest.approx(b.train_loss, abs=1e-6)
        assert a.val_loss == pytest.approx(b.val_loss, abs=1e-6)
    for pa, pb in zip(student_a.tensors.values(), student_b.tensors.values()):
        assert np.allclose(pa, pb, atol=1e-6)


def test_teacher_parameters_bitwise_unchanged():
    sequences, _ = small_sequences()
    teacher_params = init_params(TEACHER, RngState(20))
    frozen = {k: v.copy() for k, v in teacher_params.items()}
    student = init_params(STUDENT, RngState(21))
    run_distillation(
        student, STUDENT, list(sequences), small_distill_config(),
        AdamWConfig(learning_rate=1e-3), teacher=(teacher_params, TEACHER),
    )
    for name, value in teacher_params.items():
        assert np.array_equal(value, frozen[name])


def test_run_distillation_reproducible_loss_trace():
    sequences, _ = small_sequences()
    teacher_params = init_params(TEACHER, RngState(30))
    traces = []
    for _ in range(2):
        student = init_params(STUDENT, RngState(31))
        _, report = run_distillation(
            student, STUDENT, list(sequences), small_distill_config(),
            AdamWConfig(learning_rate=1e-3), teacher=(teacher_params, TEACHER),
        )
        traces.append([(r.train_loss, r.val_loss) for r in report.epochs])
    assert traces[0] == traces[1]


def test_student_equal_teacher_distill_term_vanishes():
    config = ModelConfig(
        hidden_size=16,
        num_hidden_layers=1,
        num_attention_heads=2,
        intermediate_size=32,
        vocab_size=40,
        max_position_embeddings=16,
        hidden_dropout=0.0,
        attention_dropout=0.0,
    )
    sequences, vocab = small_sequences()
    params = init_params(config, RngState(40))
    student = params.copy()
    from kdforge.data import IGNORE_INDEX, mask_for_mlm
    from kdforge.model import collate

    rows = [mask_for_mlm(s, RngState(1).derive(i), vocab.size) for i, s in enumerate(sequences[:6])]
    batch = collate(rows)
    labels = np.array([r.labels for r in rows])
    selected = labels != IGNORE_INDEX
    teacher_logits = EncoderRun(config, params, training=False).forward_mlm(batch)
    student_logits = EncoderRun(config, student, training=True, rng=RngState(2)).forward_mlm(batch)
    assert distillation_loss(teacher_logits, student_logits, 2.0, selected) < 1e-6


def test_vocab_mismatch_rejected():
    sequences, _ = small_sequences()
    bad_teacher = ModelConfig(
        hidden_size=16,
        num_hidden_layers=1,
        num_attention_heads=2,
        intermediate_size=32,
        vocab_size=50,
        max_position_embeddings=16,
    )
    teacher_params = init_params(bad_teacher, RngState(0))
    student = init_params(STUDENT, RngState(1))
    with pytest.raises(CompatibilityError):
        run_distillation(
            student, STUDENT, list(sequences), small_distill_config(),
            AdamWConfig(), teacher=(teacher_params, bad_teacher),
        )


def test_distill_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(temperature=0.0)
    with pytest.raises(ConfigError):
        DistillConfig(alpha=1.2)
