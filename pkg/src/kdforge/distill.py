"""Temperature-softened distillation losses and the teacher->student loop.

The loss pieces:

  * ``soften(z, T)`` -- row softmax of ``z / T``;
  * ``kl_divergence(p, q)`` -- sum of ``p * log(p / q)`` with the usual
    ``0 * log 0 = 0`` convention and ``q`` clamped below at 1e-12;
  * ``distillation_loss`` -- mean over selected positions of
    ``KL(soften(teacher, T) || soften(student, T))``;
  * ``combined_loss`` -- ``alpha * T^2 * distill + (1 - alpha) * ce``.

The temperature-squared factor appears exactly once, in the combiner, so
the distillation term itself is a plain positional mean.

``run_distillation`` owns the student's training loop: dynamic masking per
epoch, teacher logits in eval mode (the teacher is never updated and its
dropout stays off), CE and KL at masked positions only, AdamW with a
linear warmup/decay schedule, and per-epoch train/validation metrics.
With ``teacher=None`` the same loop is a plain masked-language-model
fine-tune, which is also how the desk-scale teacher gets pretrained.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import IGNORE_INDEX, MlmExample, mask_for_mlm
from .errors import (
    CompatibilityError,
    ConfigError,
    DistributionError,
    DivergenceError,
    InputError,
)
from .metrics import prf_macro_sparse
from .model import EncodedBatch, EncoderParams, EncoderRun, ModelConfig, collate
from .optim import AdamWConfig, AdamWState, ScheduleConfig, adamw_step, lr_at_step
from .rng import RngState
from .tensor import CrossEntropyOp, softmax_rows

# purpose indices for deriving independent rng streams from one seed
_STREAM_SHUFFLE = 1
_STREAM_TRAIN_MASK = 2
_STREAM_DROPOUT = 3
_STREAM_VAL_MASK = 4

EPOCH_CSV_HEADER = "epoch,train_loss,val_loss,train_acc,val_acc,precision,recall,f1,lr"


@dataclass
class DistillConfig:
    temperature: float = 2.0
    alpha: float = 0.5
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 5e-5
    warmup_fraction: float = 0.1
    mask_rate: float = 0.15
    max_len: int = 128
    seed: int = 0
    val_fraction: float = 0.05

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    precision: float
    recall: float
    f1: float
    lr: float
    wall_time: float = 0.0

    def csv_row(self) -> str:
        vals = [
            self.train_loss,
            self.val_loss,
            self.train_acc,
            self.val_acc,
            self.precision,
            self.recall,
            self.f1,
            self.lr,
        ]
        return ",".join([str(self.epoch)] + [repr(float(v)) for v in vals])


@dataclass
class DistillReport:
    epochs: list[EpochStats] = field(default_factory=list)

    @property
    def final_val_loss(self) -> float:
        return self.epochs[-1].val_loss


def write_epoch_csv(path, rows: list[EpochStats]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(EPOCH_CSV_HEADER + "\n")
        for row in rows:
            f.write(row.csv_row() + "\n")


def soften(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Row softmax of temperature-scaled logits."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    return softmax_rows(np.asarray(logits) / temperature)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DistributionError("distributions must share a shape")
    if (p < 0).any() or (q < 0).any():
        raise DistributionError("distributions must be nonnegative")
    for name, d in (("p", p), ("q", q)):
        total = d.sum(axis=-1)
        if not np.allclose(total, 1.0, atol=1e-5):
            raise DistributionError(f"{name} does not sum to 1 (got {total})")
    q = np.maximum(q, 1e-12)
    terms = np.where(p > 0, p * np.log(np.maximum(p, 1e-300) / q), 0.0)
    return float(terms.sum(axis=-1).mean()) if p.ndim > 1 else float(terms.sum())


class DistillationLossOp:
    """KL between softened teacher/student rows, averaged; grad wrt student."""

    def forward(
        self, teacher_logits: np.ndarray, student_logits: np.ndarray, temperature: float
    ) -> float:
        if teacher_logits.shape != student_logits.shape:
            raise CompatibilityError(
                f"teacher logits {teacher_logits.shape} vs student "
                f"{student_logits.shape}"
            )
        if temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {temperature}")
        self.temperature = temperature
        self.n = teacher_logits.shape[0]
        self.p_teacher = softmax_rows(teacher_logits / temperature)
        self.p_student = softmax_rows(student_logits / temperature)
        q = np.maximum(self.p_student, 1e-12)
        pt = self.p_teacher
        terms = np.where(pt > 0, pt * np.log(np.maximum(pt, 1e-300) / q), 0.0)
        return float(terms.sum(axis=-1).mean())

    def backward(self, upstream: float = 1.0) -> np.ndarray:
        return (
            (self.p_student - self.p_teacher)
            * (upstream / (self.temperature * self.n))
        )


def distillation_loss(
    teacher_logits: np.ndarray,
    student_logits: np.ndarray,
    temperature: float,
    positions_mask: np.ndarray,
) -> float:
    """Mean softened KL over the selected positions of a logit tensor."""
    positions_mask = np.asarray(positions_mask, dtype=bool)
    if positions_mask.shape != teacher_logits.shape[:-1]:
        raise CompatibilityError(
            f"positions mask {positions_mask.shape} does not match logits "
            f"{teacher_logits.shape[:-1]}"
        )
    if not positions_mask.any():
        raise InputError("no positions selected for the distillation loss")
    return DistillationLossOp().forward(
        teacher_logits[positions_mask], student_logits[positions_mask], temperature
    )


def combined_loss(distill: float, ce: float, alpha: float, temperature: float) -> float:
    """Weighted objective: alpha * T^2 * distill + (1 - alpha) * ce."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    return alpha * temperature**2 * distill + (1.0 - alpha) * ce


def _mask_batch(
    sequences, indices, rng: RngState, vocab_size: int, mask_rate: float
) -> list[MlmExample]:
    rows = []
    for i in indices:
        row = mask_for_mlm(sequences[i], rng.derive(int(i)), vocab_size, mask_rate)
        if row is not None:
            rows.append(row)
    return rows


def _mlm_arrays(rows: list[MlmExample]) -> tuple[EncodedBatch, np.ndarray]:
    batch = collate(rows)
    labels = np.array([r.labels for r in rows], dtype=np.int64)
    return batch, labels


def run_distillation(
    student_params: EncoderParams,
    student_config: ModelConfig,
    train_sequences,
    distill_config: DistillConfig,
    adam_config: AdamWConfig,
    teacher: tuple[EncoderParams, ModelConfig] | None = None,
    val_sequences=None,
) -> tuple[EncoderParams, DistillReport]:
    """Train the student over masked batches; returns it with a report.

    The teacher (when given) is frozen: it only ever runs eval-mode
    forwards.  With no teacher the loop reduces to plain MLM training and
    the combined loss is exactly the cross entropy.
    """
    cfg = distill_config
    if teacher is not None:
        teacher_params, teacher_config = teacher
        if teacher_config.vocab_size != student_config.vocab_size:
            raise CompatibilityError(
                f"teacher vocab {teacher_config.vocab_size} != student vocab "
                f"{student_config.vocab_size}"
            )
    if not train_sequences:
        raise InputError("empty training corpus")

    if val_sequences is None:
        n_val = max(1, int(round(cfg.val_fraction * len(train_sequences))))
        if n_val >= len(train_sequences):
            raise InputError("corpus too small to carve out a validation tail")
        val_sequences = train_sequences[-n_val:]
        train_sequences = train_sequences[:-n_val]

    n = len(train_sequences)
    vocab_size = student_config.vocab_size
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = max(2, cfg.epochs * steps_per_epoch)
    schedule = ScheduleConfig(
        warmup_steps=int(round(cfg.warmup_fraction * total_steps)),
        total_steps=total_steps,
    )
    opt_state = AdamWState.init_like(student_params.tensors)
    base = RngState(cfg.seed)
    report = DistillReport()

    global_step = 0
    lr_t = 0.0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = base.derive(_STREAM_SHUFFLE, epoch).generator().permutation(n)
        loss_sum = 0.0
        correct = 0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            rows = _mask_batch(
                train_sequences,
                idx,
                base.derive(_STREAM_TRAIN_MASK, epoch),
                vocab_size,
                cfg.mask_rate,
            )
            if not rows:
                continue
            batch, labels = _mlm_arrays(rows)
            selected = labels != IGNORE_INDEX
            sel_idx = np.nonzero(selected)
            targets = labels[sel_idx]

            run = EncoderRun(
                student_config,
                student_params,
                training=True,
                rng=base.derive(_STREAM_DROPOUT, epoch, global_step),
            )
            student_logits = run.forward_mlm(batch)
            sel_student = student_logits[sel_idx]

            ce_op = CrossEntropyOp()
            ce = ce_op.forward(sel_student, targets)
            d_sel = (1.0 - cfg.alpha) * ce_op.backward() if teacher is not None else ce_op.backward()

            if teacher is not None:
                teacher_logits = EncoderRun(
                    teacher_config, teacher_params, training=False
                ).forward_mlm(batch)
                dl_op = DistillationLossOp()
                distill_value = dl_op.forward(
                    teacher_logits[sel_idx], sel_student, cfg.temperature
                )
                loss = combined_loss(distill_value, ce, cfg.alpha, cfg.temperature)
                d_sel = d_sel + (cfg.alpha * cfg.temperature**2) * dl_op.backward()
            else:
                loss = ce

            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at step {global_step}", step=global_step
                )

            d_logits = np.zeros_like(student_logits)
            d_logits[sel_idx] = d_sel
            grads = run.backward(d_logits)
            lr_t = lr_at_step(global_step, cfg.learning_rate, schedule)
            adamw_step(student_params.tensors, grads, opt_state, adam_config, lr_t)
            global_step += 1

            m = targets.size
            loss_sum += loss * m
            correct += int((sel_student.argmax(axis=-1) == targets).sum())
            seen += m

        val = evaluate_mlm(
            student_params,
            student_config,
            val_sequences,
            base.derive(_STREAM_VAL_MASK),
            vocab_size,
            cfg.mask_rate,
            cfg.batch_size,
        )
        report.epochs.append(
            EpochStats(
                epoch=epoch,
                train_loss=loss_sum / max(seen, 1),
                val_loss=val["loss"],
                train_acc=correct / max(seen, 1),
                val_acc=val["accuracy"],
                precision=val["precision"],
                recall=val["recall"],
                f1=val["f1"],
                lr=lr_t,
                wall_time=time.perf_counter() - t0,
            )
        )
    return student_params, report


def evaluate_mlm(
    params: EncoderParams,
    config: ModelConfig,
    sequences,
    mask_rng: RngState,
    vocab_size: int,
    mask_rate: float = 0.15,
    batch_size: int = 8,
) -> dict:
    """Masked-token CE loss, top-1 accuracy, and macro P/R/F1 in eval mode.

    Masks are derived from ``mask_rng`` and each sequence's index only, so
    repeated calls score the exact same prediction problem.
    """
    loss_sum = 0.0
    seen = 0
    all_targets: list[int] = []
    all_preds: list[int] = []
    for start in range(0, len(sequences), batch_size):
        idx = range(start, min(start + batch_size, len(sequences)))
        rows = _mask_batch(sequences, idx, mask_rng, vocab_size, mask_rate)
        if not rows:
            continue
        batch, labels = _mlm_arrays(rows)
        selected = labels != IGNORE_INDEX
        sel_idx = np.nonzero(selected)
        targets = labels[sel_idx]
        logits = EncoderRun(config, params, training=False).forward_mlm(batch)
        sel_logits = logits[sel_idx]
        loss = CrossEntropyOp().forward(sel_logits, targets)
        preds = sel_logits.argmax(axis=-1)
        m = targets.size
        loss_sum += loss * m
        seen += m
        all_targets.extend(int(t) for t in targets)
        all_preds.extend(int(p) for p in preds)
    if seen == 0:
        raise InputError("validation set produced no maskable positions")
    prf = prf_macro_sparse(all_targets, all_preds)
    return {
        "loss": loss_sum / seen,
        "accuracy": prf.accuracy,
        "precision": prf.precision,
        "recall": prf.recall,
        "f1": prf.f1,
    }
