"""Task fine-tuning loop and batched evaluation.

Classification heads train with cross entropy, regression heads with mean
squared error, both via AdamW under a linear warmup/decay schedule.  Each
epoch ends with a validation pass; early stopping watches validation loss
with the configured patience, and the parameters from the best epoch are
what the loop returns (and what gets checkpointed).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledExample, synonym_augment
from .distill import EpochStats
from .errors import InputError, DivergenceError, LabelError
from .metrics import MetricsReport, confusion, matthews, pearson, roc_auc, spearman, summarize
from .model import (
    EncodedBatch,
    EncoderParams,
    EncoderRun,
    ModelConfig,
    TaskHeadSpec,
    collate,
)
from .optim import (
    STOP,
    AdamWConfig,
    AdamWState,
    EarlyStopState,
    ScheduleConfig,
    adamw_step,
    early_stop_update,
    lr_at_step,
)
from .rng import RngState
from .tensor import CrossEntropyOp, MseOp, softmax_rows
from .tokenizer import Vocabulary, encode

_STREAM_SHUFFLE = 11
_STREAM_DROPOUT = 12
_STREAM_AUGMENT = 13


@dataclass
class FinetuneConfig:
    learning_rate: float = 2e-5
    batch_size: int = 8
    epochs: int = 10
    weight_decay: float = 1e-2
    patience: int = 3
    max_len: int = 512
    warmup_fraction: float = 0.1
    warmup_steps: int | None = None  # absolute override when set
    seed: int = 0
    augment_rate: float = 0.0


@dataclass
class FinetuneResult:
    params: EncoderParams
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False


def encode_examples(
    examples: list[LabeledExample], vocab: Vocabulary, max_len: int
) -> list:
    return [
        encode(ex.text, vocab, max_len, text_b=ex.text_b) for ex in examples
    ]


def check_labels(examples: list[LabeledExample], head: TaskHeadSpec) -> None:
    if head.kind != "classification":
        return
    for i, ex in enumerate(examples):
        label = ex.int_label
        if not 0 <= label < head.num_labels:
            raise LabelError(
                f"label {label} at record {i} outside head range [0, {head.num_labels})"
            )


def _batch_loss(
    head: TaskHeadSpec, logits: np.ndarray, examples: list[LabeledExample]
):
    if head.kind == "classification":
        targets = np.array([ex.int_label for ex in examples], dtype=np.int64)
        op = CrossEntropyOp()
        loss = op.forward(logits, targets)
    else:
        targets = np.array([[ex.label] for ex in examples], dtype=logits.dtype)
        op = MseOp()
        loss = op.forward(logits, targets)
    return loss, op


def run_finetune(
    params: EncoderParams,
    config: ModelConfig,
    head: TaskHeadSpec,
    train_examples: list[LabeledExample],
    val_examples: list[LabeledExample],
    vocab: Vocabulary,
    ft: FinetuneConfig,
    synonym_lexicon: dict[str, list[str]] | None = None,
) -> FinetuneResult:
    if not train_examples:
        raise InputError("empty training set")
    if not val_examples:
        raise InputError("empty validation set")
    check_labels(train_examples, head)
    check_labels(val_examples, head)

    base = RngState(ft.seed)
    if synonym_lexicon and ft.augment_rate > 0:
        train_examples = [
            synonym_augment(ex, synonym_lexicon, ft.augment_rate, base.derive(_STREAM_AUGMENT, i))
            for i, ex in enumerate(train_examples)
        ]

    train_seqs = encode_examples(train_examples, vocab, ft.max_len)
    n = len(train_seqs)
    steps_per_epoch = (n + ft.batch_size - 1) // ft.batch_size
    total_steps = max(2, ft.epochs * steps_per_epoch)
    warmup = (
        ft.warmup_steps
        if ft.warmup_steps is not None
        else int(round(ft.warmup_fraction * total_steps))
    )
    warmup = min(warmup, total_steps - 1)
    schedule = ScheduleConfig(warmup_steps=warmup, total_steps=total_steps)
    adam = AdamWConfig(learning_rate=ft.learning_rate, weight_decay=ft.weight_decay)
    opt_state = AdamWState.init_like(params.tensors)
    stopper = EarlyStopState(patience=ft.patience)

    result = FinetuneResult(params=params)
    best_params = params.copy()
    global_step = 0
    lr_t = 0.0
    for epoch in range(1, ft.epochs + 1):
        t0 = time.perf_counter()
        order = base.derive(_STREAM_SHUFFLE, epoch).generator().permutation(n)
        loss_sum = 0.0
        correct = 0
        seen = 0
        for start in range(0, n, ft.batch_size):
            idx = order[start : start + ft.batch_size]
            chunk = [train_examples[i] for i in idx]
            batch = collate([train_seqs[i] for i in idx])
            run = EncoderRun(
                config,
                params,
                training=True,
                rng=base.derive(_STREAM_DROPOUT, epoch, global_step),
            )
            logits = run.forward_task(batch, head)
            loss, op = _batch_loss(head, logits, chunk)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at step {global_step}", step=global_step
                )
            grads = run.backward(op.backward())
            lr_t = lr_at_step(global_step, ft.learning_rate, schedule)
            adamw_step(params.tensors, grads, opt_state, adam, lr_t)
            global_step += 1
            loss_sum += loss * len(chunk)
            seen += len(chunk)
            if head.kind == "classification":
                preds = logits.argmax(axis=-1)
                correct += int(
                    (preds == np.array([ex.int_label for ex in chunk])).sum()
                )

        val = _validation_pass(params, config, head, val_examples, vocab, ft)
        result.epochs.append(
            EpochStats(
                epoch=epoch,
                train_loss=loss_sum / seen,
                val_loss=val["loss"],
                train_acc=correct / seen if head.kind == "classification" else 0.0,
                val_acc=val["accuracy"],
                precision=val["precision"],
                recall=val["recall"],
                f1=val["f1"],
                lr=lr_t,
                wall_time=time.perf_counter() - t0,
            )
        )
        decision = early_stop_update(stopper, val["loss"])
        if stopper.best_epoch == stopper.epochs_seen:
            best_params = params.copy()
            result.best_epoch = epoch
            result.best_val_loss = val["loss"]
        if decision == STOP:
            result.stopped_early = True
            break

    result.params = best_params
    return result


def _validation_pass(params, config, head, val_examples, vocab, ft) -> dict:
    seqs = encode_examples(val_examples, vocab, ft.max_len)
    loss_sum = 0.0
    seen = 0
    preds: list[int] = []
    labels: list[int] = []
    for start in range(0, len(seqs), ft.batch_size):
        chunk = val_examples[start : start + ft.batch_size]
        batch = collate(seqs[start : start + ft.batch_size])
        logits = EncoderRun(config, params, training=False).forward_task(batch, head)
        loss, _ = _batch_loss(head, logits, chunk)
        loss_sum += loss * len(chunk)
        seen += len(chunk)
        if head.kind == "classification":
            preds.extend(int(p) for p in logits.argmax(axis=-1))
            labels.extend(ex.int_label for ex in chunk)
    out = {
        "loss": loss_sum / seen,
        "accuracy": 0.0,
        "precision": 0.0,
        "recall": 0.0,
        "f1": 0.0,
    }
    if head.kind == "classification":
        cm = confusion(labels, preds, head.num_labels)
        report = summarize(cm)
        out.update(
            accuracy=report.accuracy,
            precision=report.weighted["precision"],
            recall=report.weighted["recall"],
            f1=report.weighted["f1"],
        )
    return out


def evaluate_model(
    params: EncoderParams,
    config: ModelConfig,
    head: TaskHeadSpec,
    examples: list[LabeledExample],
    vocab: Vocabulary,
    max_len: int = 512,
    batch_size: int = 8,
) -> MetricsReport:
    """Eval-mode inference over a test set, summarized for the report file.

    Binary classification adds Matthews correlation and an ROC sweep on the
    positive-class probability; regression reports Pearson and Spearman.
    """
    if not examples:
        raise InputError("empty evaluation set")
    check_labels(examples, head)
    seqs = encode_examples(examples, vocab, max_len)
    all_logits = []
    for start in range(0, len(seqs), batch_size):
        batch = collate(seqs[start : start + batch_size])
        all_logits.append(
            EncoderRun(config, params, training=False).forward_task(batch, head)
        )
    logits = np.concatenate(all_logits, axis=0)

    if head.kind == "regression":
        preds = logits[:, 0].astype(np.float64)
        targets = np.array([ex.label for ex in examples], dtype=np.float64)
        return MetricsReport(
            accuracy=0.0,
            per_class_precision=[],
            per_class_recall=[],
            per_class_f1=[],
            support=[],
            macro={},
            weighted={},
            pearson=pearson(preds, targets),
            spearman=spearman(preds, targets),
        )

    labels = [ex.int_label for ex in examples]
    preds = logits.argmax(axis=-1)
    cm = confusion(labels, preds, head.num_labels)
    report = summarize(cm)
    if head.num_labels == 2:
        report.mcc = matthews(cm)
        probs = softmax_rows(logits)[:, 1]
        if len(set(labels)) == 2:
            points, auc = roc_auc(probs, labels)
            report.roc_points = points
            report.auroc = auc
    return report
