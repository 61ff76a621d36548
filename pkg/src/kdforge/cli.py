"""Command-line entry points.

Subcommands: ``preprocess``, ``pretrain-teacher``, ``distill``,
``finetune``, ``evaluate``, ``glue``.  Every command accepts ``--seed``,
``--out-dir``, and ``--config FILE`` (a JSON object that may supply any
flag; explicit flags win).  Exit codes are stable for scripting: 0
success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from types import SimpleNamespace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    balance_upsample,
    examples_to_records,
    preprocess_adhd,
    read_corpus,
    read_jsonl,
    records_to_examples,
    stratified_split,
    write_jsonl,
    load_synonym_lexicon,
)
from .distill import DistillConfig, run_distillation, write_epoch_csv
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    InputError,
    KDForgeError,
    UsageError,
)
from .finetune import (
    FinetuneConfig,
    evaluate_model,
    run_finetune,
)
from .metrics import write_report
from .model import (
    EncoderParams,
    ModelConfig,
    TaskHeadSpec,
    count_parameters,
    init_params,
    parameter_shapes,
)
from .optim import AdamWConfig
from .rng import RngState
from .tokenizer import Vocabulary, build_vocab, encode

_STREAM_INIT = 101
_STREAM_HEAD_INIT = 102
_STREAM_BALANCE = 103
_STREAM_SPLIT = 104

GLUE_TASKS: dict[str, dict] = {
    "mrpc": {"kind": "classification", "num_labels": 2, "epochs": 2, "lr": 5e-5, "batch_size": 8},
    "sst2": {"kind": "classification", "num_labels": 2, "epochs": 10, "lr": 2e-5, "batch_size": 8, "augment": True},
    "cola": {"kind": "classification", "num_labels": 2, "epochs": 10, "lr": 2e-5, "batch_size": 8, "augment": True},
    "qqp": {"kind": "classification", "num_labels": 2, "epochs": 3, "lr": 2e-5, "batch_size": 16, "warmup_steps": 500},
    "mnli": {"kind": "classification", "num_labels": 3, "epochs": 3, "lr": 5e-5, "batch_size": 8},
    # the published batch size for this regression task is not usable
    # verbatim; train with the common batch of 8 instead
    "stsb": {"kind": "regression", "num_labels": 1, "epochs": 6, "lr": 5e-5, "batch_size": 8},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _require_file(path, what: str) -> None:
    if not path or not os.path.exists(path):
        raise InputError(f"{what} not found: {path}")


def _ensure_out_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _print_epoch_table(rows) -> None:
    for r in rows:
        print(
            f"epoch {r.epoch}: train_loss={r.train_loss:.6f} "
            f"val_loss={r.val_loss:.6f} train_acc={r.train_acc:.4f} "
            f"val_acc={r.val_acc:.4f} f1={r.f1:.4f} lr={r.lr:g} "
            f"({r.wall_time:.1f}s)"
        )


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

PREPROCESS_DEFAULTS = {
    "input": None,
    "out_dir": "out",
    "seed": 0,
    "test_fraction": 0.2,
    "cap": 5,
    "mild_threshold": 2,
    "subreddit": "ADHD",
    "no_balance": False,
}


def cmd_preprocess(o) -> None:
    _require_file(o.input, "raw posts file")
    records = read_jsonl(o.input)
    examples, stats = preprocess_adhd(
        records,
        cap_max=o.cap,
        mild_threshold=o.mild_threshold,
        target_subreddit=o.subreddit,
    )
    if not examples:
        raise InputError("zero records survived preprocessing")

    counts = {
        "raw": stats.raw_records,
        "malformed": stats.malformed,
        "wrong_subreddit": stats.wrong_subreddit,
        "removed": stats.removed,
        "filtered": stats.kept,
    }
    base = RngState(o.seed)
    if o.no_balance:
        balanced = examples
    else:
        balanced = balance_upsample(examples, base.derive(_STREAM_BALANCE))
    counts["balanced"] = len(balanced)
    split = stratified_split(balanced, o.test_fraction, base.derive(_STREAM_SPLIT))
    counts["train"] = len(split.train)
    counts["test"] = len(split.test)
    counts["train_classes"] = {str(k): v for k, v in sorted(split.class_counts("train").items())}
    counts["test_classes"] = {str(k): v for k, v in sorted(split.class_counts("test").items())}

    out = _ensure_out_dir(o.out_dir)
    write_jsonl(os.path.join(out, "train.jsonl"), examples_to_records(split.train))
    write_jsonl(os.path.join(out, "test.jsonl"), examples_to_records(split.test))
    with open(os.path.join(out, "counts.json"), "w", encoding="utf-8") as f:
        json.dump(counts, f, indent=2, sort_keys=True)
        f.write("\n")
    print(
        f"preprocess: raw={counts['raw']} filtered={counts['filtered']} "
        f"balanced={counts['balanced']} train={counts['train']} test={counts['test']}"
    )
    print(f"test classes: {counts['test_classes']}")


# ---------------------------------------------------------------------------
# pretrain-teacher / distill
# ---------------------------------------------------------------------------

PRETRAIN_DEFAULTS = {
    "corpus": None,
    "val_corpus": None,
    "out_dir": "out",
    "seed": 0,
    "vocab": None,
    "vocab_size": 2000,
    "hidden": 384,
    "layers": 6,
    "heads": 6,
    "intermediate": 3072,
    "epochs": 10,
    "batch_size": 8,
    "lr": 5e-5,
    "weight_decay": 1e-2,
    "warmup_fraction": 0.1,
    "max_len": 128,
    "mask_rate": 0.15,
    "hidden_dropout": 0.1,
    "attention_dropout": 0.1,
}


def _model_config(o, vocab_size: int, prefix: str = "") -> ModelConfig:
    g = lambda name: getattr(o, prefix + name)
    return ModelConfig(
        hidden_size=g("hidden"),
        num_hidden_layers=g("layers"),
        num_attention_heads=g("heads"),
        intermediate_size=g("intermediate"),
        vocab_size=vocab_size,
        max_position_embeddings=o.max_len,
        hidden_dropout=o.hidden_dropout,
        attention_dropout=o.attention_dropout,
    )


def cmd_pretrain_teacher(o) -> None:
    _require_file(o.corpus, "corpus file")
    corpus = read_corpus(o.corpus)
    out = _ensure_out_dir(o.out_dir)
    if o.vocab:
        _require_file(o.vocab, "vocabulary file")
        vocab = Vocabulary.load(o.vocab)
    else:
        vocab = build_vocab(corpus, o.vocab_size)
        vocab.save(os.path.join(out, "vocab.txt"))

    config = _model_config(o, vocab.size)
    params = init_params(config, RngState(o.seed).derive(_STREAM_INIT))
    print(
        f"pretrain-teacher: params={count_parameters(params)} lr={o.lr:g} "
        f"batch={o.batch_size} epochs={o.epochs} seed={o.seed}"
    )
    sequences = [encode(line, vocab, o.max_len) for line in corpus]
    val_sequences = None
    if o.val_corpus:
        _require_file(o.val_corpus, "validation corpus")
        val_sequences = [encode(line, vocab, o.max_len) for line in read_corpus(o.val_corpus)]

    dcfg = DistillConfig(
        temperature=1.0,
        alpha=0.0,
        epochs=o.epochs,
        batch_size=o.batch_size,
        learning_rate=o.lr,
        warmup_fraction=o.warmup_fraction,
        mask_rate=o.mask_rate,
        max_len=o.max_len,
        seed=o.seed,
    )
    adam = AdamWConfig(learning_rate=o.lr, weight_decay=o.weight_decay)
    params, report = run_distillation(
        params, config, sequences, dcfg, adam, teacher=None, val_sequences=val_sequences
    )
    _print_epoch_table(report.epochs)
    write_epoch_csv(os.path.join(out, "pretrain_log.csv"), report.epochs)
    save_checkpoint(
        os.path.join(out, "teacher.ckpt"),
        config,
        params,
        mlm_head=True,
        vocab_pieces=vocab.pieces,
        rng={"seed": o.seed, "stream": 0},
        epoch=o.epochs,
        best_metric=report.final_val_loss,
    )
    print(f"saved teacher checkpoint to {os.path.join(out, 'teacher.ckpt')}")


DISTILL_DEFAULTS = {
    "teacher": None,
    "corpus": None,
    "val_corpus": None,
    "out_dir": "out",
    "seed": 0,
    "alpha": 0.5,
    "temperature": 2.0,
    "epochs": 10,
    "batch_size": 8,
    "lr": 5e-5,
    "weight_decay": 1e-2,
    "warmup_fraction": 0.1,
    "max_len": 128,
    "mask_rate": 0.15,
    "student_hidden": 384,
    "student_layers": 6,
    "student_heads": 6,
    "student_intermediate": 3072,
    "hidden_dropout": 0.1,
    "attention_dropout": 0.1,
}


def cmd_distill(o) -> None:
    _require_file(o.teacher, "teacher checkpoint")
    _require_file(o.corpus, "corpus file")
    ckpt = load_checkpoint(o.teacher)
    if not ckpt.mlm_head:
        raise DataError("teacher checkpoint does not carry an MLM head")
    if not ckpt.vocab_pieces:
        raise DataError("teacher checkpoint does not embed a vocabulary")
    vocab = Vocabulary(ckpt.vocab_pieces)
    if o.max_len > ckpt.config.max_position_embeddings:
        raise DataError(
            f"max_len {o.max_len} exceeds teacher positions "
            f"{ckpt.config.max_position_embeddings}"
        )

    student_config = _model_config(o, vocab.size, prefix="student_")
    student = init_params(student_config, RngState(o.seed).derive(_STREAM_INIT))
    print(
        f"distill run: T={o.temperature:g} alpha={o.alpha:g} lr={o.lr:g} "
        f"epochs={o.epochs} batch={o.batch_size} seed={o.seed}"
    )
    print(
        f"teacher params={count_parameters(ckpt.params)} "
        f"student params={count_parameters(student)}"
    )

    corpus = read_corpus(o.corpus)
    sequences = [encode(line, vocab, o.max_len) for line in corpus]
    val_sequences = None
    if o.val_corpus:
        _require_file(o.val_corpus, "validation corpus")
        val_sequences = [encode(line, vocab, o.max_len) for line in read_corpus(o.val_corpus)]

    dcfg = DistillConfig(
        temperature=o.temperature,
        alpha=o.alpha,
        epochs=o.epochs,
        batch_size=o.batch_size,
        learning_rate=o.lr,
        warmup_fraction=o.warmup_fraction,
        mask_rate=o.mask_rate,
        max_len=o.max_len,
        seed=o.seed,
    )
    adam = AdamWConfig(learning_rate=o.lr, weight_decay=o.weight_decay)
    student, report = run_distillation(
        student,
        student_config,
        sequences,
        dcfg,
        adam,
        teacher=(ckpt.params, ckpt.config),
        val_sequences=val_sequences,
    )
    _print_epoch_table(report.epochs)
    out = _ensure_out_dir(o.out_dir)
    write_epoch_csv(os.path.join(out, "distill_log.csv"), report.epochs)
    save_checkpoint(
        os.path.join(out, "student.ckpt"),
        student_config,
        student,
        mlm_head=True,
        vocab_pieces=vocab.pieces,
        rng={"seed": o.seed, "stream": 0},
        epoch=o.epochs,
        best_metric=report.final_val_loss,
    )
    print(f"saved student checkpoint to {os.path.join(out, 'student.ckpt')}")


# ---------------------------------------------------------------------------
# finetune / evaluate / glue
# ---------------------------------------------------------------------------

FINETUNE_DEFAULTS = {
    "model": None,
    "train": None,
    "val": None,
    "out_dir": "out",
    "seed": 0,
    "task_kind": "classification",
    "num_labels": None,
    "lr": 2e-5,
    "batch_size": 8,
    "epochs": 10,
    "weight_decay": 1e-2,
    "patience": 3,
    "max_len": 512,
    "warmup_fraction": 0.1,
    "warmup_steps": None,
    "synonyms": None,
    "augment_rate": 0.0,
}


def _infer_head(kind: str, num_labels, examples) -> TaskHeadSpec:
    if kind == "regression":
        return TaskHeadSpec(kind="regression", num_labels=1)
    if num_labels is None:
        labels = []
        for ex in examples:
            if not float(ex.label).is_integer():
                raise DataError(
                    f"non-integer label {ex.label!r} in a classification task"
                )
            labels.append(int(ex.label))
        num_labels = max(2, max(labels) + 1)
    return TaskHeadSpec(kind="classification", num_labels=int(num_labels))


def _load_trunk_with_head(ckpt, head: TaskHeadSpec, seed: int) -> EncoderParams:
    """Re-head a checkpoint: keep every trunk tensor, init the task head."""
    fresh = init_params(
        ckpt.config,
        RngState(seed).derive(_STREAM_HEAD_INIT),
        mlm_head=False,
        task_head=head,
    )
    wanted = parameter_shapes(ckpt.config, mlm_head=False, task_head=head)
    tensors = {}
    for name in wanted:
        if name in ckpt.params and tuple(ckpt.params[name].shape) == wanted[name]:
            tensors[name] = ckpt.params[name].copy()
        else:
            tensors[name] = fresh[name]
    return EncoderParams(tensors)


def _run_finetune_command(o, head_override: TaskHeadSpec | None = None) -> str:
    _require_file(o.model, "model checkpoint")
    _require_file(o.train, "training file")
    _require_file(o.val, "validation file")
    ckpt = load_checkpoint(o.model)
    if not ckpt.vocab_pieces:
        raise DataError("model checkpoint does not embed a vocabulary")
    vocab = Vocabulary(ckpt.vocab_pieces)

    train_examples = records_to_examples(read_jsonl(o.train))
    val_examples = records_to_examples(read_jsonl(o.val))
    if not train_examples:
        raise InputError("empty training set")
    head = head_override or _infer_head(o.task_kind, o.num_labels, train_examples)

    max_len = min(o.max_len, ckpt.config.max_position_embeddings)
    params = _load_trunk_with_head(ckpt, head, o.seed)
    ft = FinetuneConfig(
        learning_rate=o.lr,
        batch_size=o.batch_size,
        epochs=o.epochs,
        weight_decay=o.weight_decay,
        patience=o.patience,
        max_len=max_len,
        warmup_fraction=o.warmup_fraction,
        warmup_steps=o.warmup_steps,
        seed=o.seed,
        augment_rate=o.augment_rate,
    )
    lexicon = None
    if o.synonyms:
        _require_file(o.synonyms, "synonym lexicon")
        lexicon = load_synonym_lexicon(o.synonyms)

    print(
        f"finetune: head={head.kind}/{head.num_labels} lr={ft.learning_rate:g} "
        f"batch={ft.batch_size} weight_decay={ft.weight_decay:g} "
        f"epochs={ft.epochs} patience={ft.patience} seed={ft.seed}"
    )
    result = run_finetune(
        params, ckpt.config, head, train_examples, val_examples, vocab, ft, lexicon
    )
    _print_epoch_table(result.epochs)
    if result.stopped_early:
        print(f"early stop after epoch {result.epochs[-1].epoch} (best epoch {result.best_epoch})")

    out = _ensure_out_dir(o.out_dir)
    write_epoch_csv(os.path.join(out, "finetune_log.csv"), result.epochs)
    ckpt_path = os.path.join(out, "model.ckpt")
    save_checkpoint(
        ckpt_path,
        ckpt.config,
        result.params,
        mlm_head=False,
        head=head,
        vocab_pieces=vocab.pieces,
        rng={"seed": o.seed, "stream": 0},
        epoch=result.best_epoch,
        best_metric=result.best_val_loss,
    )
    print(f"saved fine-tuned checkpoint to {ckpt_path}")
    return ckpt_path


def cmd_finetune(o) -> None:
    _run_finetune_command(o)


EVALUATE_DEFAULTS = {
    "model": None,
    "test": None,
    "out_dir": "out",
    "out": None,
    "seed": 0,
    "batch_size": 8,
    "max_len": 512,
}


def cmd_evaluate(o) -> None:
    _require_file(o.model, "model checkpoint")
    _require_file(o.test, "test file")
    ckpt = load_checkpoint(o.model)
    if ckpt.head is None:
        raise DataError("checkpoint has no task head; fine-tune before evaluating")
    if not ckpt.vocab_pieces:
        raise DataError("model checkpoint does not embed a vocabulary")
    vocab = Vocabulary(ckpt.vocab_pieces)
    examples = records_to_examples(read_jsonl(o.test))
    max_len = min(o.max_len, ckpt.config.max_position_embeddings)
    report = evaluate_model(
        ckpt.params, ckpt.config, ckpt.head, examples, vocab, max_len, o.batch_size
    )
    out_path = o.out or os.path.join(_ensure_out_dir(o.out_dir), "metrics.json")
    write_report(out_path, report)
    if ckpt.head.kind == "regression":
        print(f"evaluate: pearson={report.pearson:.4f} spearman={report.spearman:.4f}")
    else:
        print(
            f"evaluate: accuracy={report.accuracy:.4f} "
            f"f1={report.weighted['f1']:.4f} n={sum(report.support)}"
        )
    print(f"wrote metrics to {out_path}")


GLUE_DEFAULTS = {
    "task": None,
    "model": None,
    "train": None,
    "val": None,
    "test": None,
    "out_dir": "out",
    "seed": 0,
    "epochs": None,
    "lr": None,
    "batch_size": None,
    "weight_decay": 1e-2,
    "patience": 3,
    "max_len": 128,
    "warmup_fraction": 0.1,
    "warmup_steps": None,
    "synonyms": None,
}


def cmd_glue(o) -> None:
    if o.task not in GLUE_TASKS:
        raise UsageError(
            f"unknown task {o.task!r}; choose from {sorted(GLUE_TASKS)}"
        )
    spec = GLUE_TASKS[o.task]
    head = TaskHeadSpec(kind=spec["kind"], num_labels=spec["num_labels"])
    merged = SimpleNamespace(
        model=o.model,
        train=o.train,
        val=o.val,
        out_dir=o.out_dir,
        seed=o.seed,
        task_kind=spec["kind"],
        num_labels=spec["num_labels"],
        lr=o.lr if o.lr is not None else spec["lr"],
        batch_size=o.batch_size if o.batch_size is not None else spec["batch_size"],
        epochs=o.epochs if o.epochs is not None else spec["epochs"],
        weight_decay=o.weight_decay,
        patience=o.patience,
        max_len=o.max_len,
        warmup_fraction=o.warmup_fraction,
        warmup_steps=o.warmup_steps if o.warmup_steps is not None else spec.get("warmup_steps"),
        synonyms=o.synonyms,
        augment_rate=0.1 if (spec.get("augment") and o.synonyms) else 0.0,
    )
    print(f"glue task {o.task}: head={spec['kind']}/{spec['num_labels']}")
    ckpt_path = _run_finetune_command(merged, head_override=head)
    eval_opts = SimpleNamespace(
        model=ckpt_path,
        test=o.test,
        out_dir=o.out_dir,
        out=os.path.join(o.out_dir, "metrics.json"),
        seed=o.seed,
        batch_size=merged.batch_size,
        max_len=o.max_len,
    )
    cmd_evaluate(eval_opts)


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


# one declared type per option name, shared by flag parsing and run-config
# files (defaults of None cannot carry the type themselves)
_FLAG_TYPES: dict[str, type] = {
    "input": str, "out_dir": str, "seed": int, "test_fraction": float,
    "cap": int, "mild_threshold": int, "subreddit": str, "no_balance": bool,
    "corpus": str, "val_corpus": str, "vocab": str, "vocab_size": int,
    "hidden": int, "layers": int, "heads": int, "intermediate": int,
    "epochs": int, "batch_size": int, "lr": float, "weight_decay": float,
    "warmup_fraction": float, "warmup_steps": int, "max_len": int,
    "mask_rate": float, "hidden_dropout": float, "attention_dropout": float,
    "teacher": str, "alpha": float, "temperature": float,
    "student_hidden": int, "student_layers": int, "student_heads": int,
    "student_intermediate": int, "model": str, "train": str, "val": str,
    "task_kind": str, "num_labels": int, "patience": int, "synonyms": str,
    "augment_rate": float, "test": str, "out": str, "task": str,
}


def _add_args(sub: argparse.ArgumentParser, defaults: dict) -> None:
    sub.add_argument("--config", default=argparse.SUPPRESS)
    for key in defaults:
        flag = "--" + key.replace("_", "-")
        kind = _FLAG_TYPES[key]
        if kind is bool:
            sub.add_argument(flag, action="store_true", default=argparse.SUPPRESS)
        else:
            sub.add_argument(flag, type=kind, default=argparse.SUPPRESS)


_COMMANDS = {
    "preprocess": (cmd_preprocess, PREPROCESS_DEFAULTS),
    "pretrain-teacher": (cmd_pretrain_teacher, PRETRAIN_DEFAULTS),
    "distill": (cmd_distill, DISTILL_DEFAULTS),
    "finetune": (cmd_finetune, FINETUNE_DEFAULTS),
    "evaluate": (cmd_evaluate, EVALUATE_DEFAULTS),
    "glue": (cmd_glue, GLUE_DEFAULTS),
}


def _coerce(key: str, value):
    if value is None:
        return None
    kind = _FLAG_TYPES[key]
    if kind is bool:
        return bool(value)
    return kind(value)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kdforge", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)
    for name, (_, defaults) in _COMMANDS.items():
        sub = subs.add_parser(name, parents=[], add_help=True)
        sub.error = parser.error  # type: ignore[method-assign]
        _add_args(sub, defaults)
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        handler, defaults = _COMMANDS[args.command]
        provided = {k: v for k, v in vars(args).items() if k != "command"}
        config_path = provided.pop("config", None)
        opts = dict(defaults)
        if config_path:
            _require_file(config_path, "run-config file")
            with open(config_path, encoding="utf-8") as f:
                file_opts = json.load(f)
            unknown = set(file_opts) - set(defaults)
            if unknown:
                raise UsageError(
                    f"unknown keys in run-config: {sorted(unknown)}"
                )
            for key, value in file_opts.items():
                opts[key] = _coerce(key, value)
        opts.update(provided)
        handler(SimpleNamespace(**opts))
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except KDForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
