"""Dataset preparation: filtering, labeling, balancing, splitting, masking.

Covers the severity-classification preprocessing chain (filter to one
subreddit, drop removed posts, cap scores, label, upsample the minority,
stratified 80:20 split), dynamic masking for masked-language-model
training, synonym-replacement augmentation, and seeded synthetic
generators used for desk-scale runs.

File formats:
  * raw posts: JSON lines with keys ``title``, ``body``, ``score``,
    ``subreddit``;
  * processed examples: JSON lines with ``text``, ``label`` (pair tasks use
    ``text_a``, ``text_b``, ``label``);
  * MLM corpora: plain text, one document per line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BalanceError, ConfigError, InputError, SplitError
from .rng import RngState
from .tokenizer import CLS_ID, MASK_ID, PAD_ID, SEP_ID, TokenizedSequence

IGNORE_INDEX = -100

REMOVAL_MARKERS = ("[removed]", "[deleted]")


@dataclass
class RawPost:
    title: str
    body: str
    score: int
    subreddit: str

    @property
    def removed(self) -> bool:
        return self.body.strip() in REMOVAL_MARKERS or self.title.strip() in REMOVAL_MARKERS


@dataclass
class LabeledExample:
    text: str
    label: float
    text_b: str | None = None

    @property
    def int_label(self) -> int:
        return int(self.label)


@dataclass
class PreprocessStats:
    raw_records: int = 0
    malformed: int = 0
    wrong_subreddit: int = 0
    removed: int = 0
    kept: int = 0


@dataclass
class DatasetSplit:
    train: list[LabeledExample]
    test: list[LabeledExample]

    def class_counts(self, part: str) -> dict[int, int]:
        examples = self.train if part == "train" else self.test
        counts: dict[int, int] = {}
        for ex in examples:
            counts[ex.int_label] = counts.get(ex.int_label, 0) + 1
        return counts


def preprocess_adhd(
    raw_posts,
    cap_max: int = 5,
    mild_threshold: int = 2,
    target_subreddit: str = "ADHD",
) -> tuple[list[LabeledExample], PreprocessStats]:
    """Filter, clean, cap, and label a raw post stream.

    Keeps only the target subreddit, drops removed/deleted posts, fills
    missing title/body with empty strings, joins them as
    ``title + " " + body``, clamps the score into ``[0, cap_max]``, and
    labels scores ``<= mild_threshold`` as 0 (mild) and the rest as 1
    (severe).  Malformed records are skipped and counted; a stream where
    every record is malformed is an error.
    """
    stats = PreprocessStats()
    examples: list[LabeledExample] = []
    for record in raw_posts:
        stats.raw_records += 1
        try:
            post = RawPost(
                title=str(record.get("title") or ""),
                body=str(record.get("body") or ""),
                score=int(record["score"]),
                subreddit=str(record.get("subreddit") or ""),
            )
        except (KeyError, TypeError, ValueError, AttributeError):
            stats.malformed += 1
            continue
        if post.subreddit != target_subreddit:
            stats.wrong_subreddit += 1
            continue
        if post.removed:
            stats.removed += 1
            continue
        score = min(max(post.score, 0), cap_max)
        label = 0 if score <= mild_threshold else 1
        examples.append(LabeledExample(text=post.title + " " + post.body, label=label))
        stats.kept += 1
    if stats.raw_records > 0 and stats.malformed == stats.raw_records:
        raise InputError("every record in the raw stream was malformed")
    return examples, stats


def balance_upsample(examples: list[LabeledExample], rng: RngState) -> list[LabeledExample]:
    """Resample the minority class with replacement up to the majority count.

    Majority examples are kept exactly once; the combined list is then
    shuffled.
    """
    by_class: dict[int, list[LabeledExample]] = {}
    for ex in examples:
        by_class.setdefault(ex.int_label, []).append(ex)
    if len(by_class) < 2:
        raise BalanceError("balancing needs at least two classes present")
    majority_size = max(len(v) for v in by_class.values())
    gen = rng.generator()
    balanced: list[LabeledExample] = []
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) == majority_size:
            balanced.extend(members)
        else:
            idx = gen.integers(0, len(members), size=majority_size)
            balanced.extend(members[i] for i in idx)
    order = gen.permutation(len(balanced))
    return [balanced[i] for i in order]


def stratified_split(
    examples: list[LabeledExample], test_fraction: float = 0.2, rng: RngState | None = None
) -> DatasetSplit:
    """Class-stratified split with a largest-remainder test allocation.

    The overall test size is ``ceil(test_fraction * N)``; per-class seats
    are the floor of each class quota plus leftover seats by descending
    remainder, lower class index first on ties.  Selection within a class
    is uniform without replacement.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    by_class: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        by_class.setdefault(ex.int_label, []).append(i)
    if len(by_class) < 2:
        raise SplitError("stratified split needs at least two classes present")

    n = len(examples)
    n_test = math.ceil(test_fraction * n)
    labels = sorted(by_class)
    quotas = {c: n_test * len(by_class[c]) / n for c in labels}
    alloc = {c: math.floor(quotas[c]) for c in labels}
    leftover = n_test - sum(alloc.values())
    for c in sorted(labels, key=lambda c: (-(quotas[c] - alloc[c]), c)):
        if leftover <= 0:
            break
        alloc[c] += 1
        leftover -= 1
    for c in labels:
        if alloc[c] > len(by_class[c]):
            raise SplitError(
                f"class {c} has {len(by_class[c])} examples but needs {alloc[c]} for the test set"
            )

    gen = rng.generator() if rng is not None else RngState(0).generator()
    test_idx: set[int] = set()
    for c in labels:
        members = np.array(by_class[c])
        chosen = gen.choice(members, size=alloc[c], replace=False)
        test_idx.update(int(i) for i in chosen)
    train = [ex for i, ex in enumerate(examples) if i not in test_idx]
    test = [ex for i, ex in enumerate(examples) if i in test_idx]
    return DatasetSplit(train=train, test=test)


@dataclass
class MlmExample:
    """One masked row: inputs after masking plus reconstruction targets."""

    ids: list[int]
    attention_mask: list[int]
    labels: list[int]  # original id at masked positions, IGNORE_INDEX elsewhere
    mask_positions: list[int]


def mask_for_mlm(
    sequence: TokenizedSequence,
    rng: RngState,
    vocab_size: int,
    mask_rate: float = 0.15,
) -> MlmExample | None:
    """Standard dynamic masking: 15% of non-special positions, 80/10/10.

    Of the selected positions, 80% become ``[MASK]``, 10% a uniformly
    random vocabulary id, and 10% keep their token.  CLS/SEP/PAD positions
    are never selected.  Returns None for sequences with no maskable
    position (skip marker).
    """
    candidates = [
        i
        for i, t in enumerate(sequence.ids)
        if sequence.attention_mask[i] == 1 and t not in (CLS_ID, SEP_ID, PAD_ID)
    ]
    if not candidates:
        return None
    gen = rng.generator()
    n_select = max(1, int(round(mask_rate * len(candidates))))
    chosen = sorted(gen.choice(len(candidates), size=n_select, replace=False).tolist())
    positions = [candidates[i] for i in chosen]

    ids = list(sequence.ids)
    labels = [IGNORE_INDEX] * len(ids)
    for pos in positions:
        labels[pos] = ids[pos]
        u = gen.random()
        if u < 0.8:
            ids[pos] = MASK_ID
        elif u < 0.9:
            ids[pos] = int(gen.integers(0, vocab_size))
        # else: keep the original token
    return MlmExample(
        ids=ids,
        attention_mask=list(sequence.attention_mask),
        labels=labels,
        mask_positions=positions,
    )


def synonym_augment(
    example: LabeledExample,
    lexicon: dict[str, list[str]],
    rate: float = 0.1,
    rng: RngState | None = None,
) -> LabeledExample:
    """Replace whitespace words found in the lexicon with a random synonym."""
    if rate <= 0.0 or not lexicon:
        return example
    gen = (rng or RngState(0)).generator()
    words = example.text.split(" ")
    out = []
    for w in words:
        options = lexicon.get(w)
        if options and gen.random() < rate:
            out.append(options[int(gen.integers(0, len(options)))])
        else:
            out.append(w)
    return LabeledExample(text=" ".join(out), label=example.label, text_b=example.text_b)


def load_synonym_lexicon(path) -> dict[str, list[str]]:
    """Lexicon file: one ``word<TAB>syn1,syn2,...`` entry per line."""
    lexicon: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line or "\t" not in line:
                continue
            word, _, syns = line.partition("\t")
            options = [s for s in syns.split(",") if s]
            if options:
                lexicon[word] = options
    return lexicon


# ---------------------------------------------------------------------------
# Synthetic generators (desk-scale stand-ins for the real corpora)
# ---------------------------------------------------------------------------


@dataclass
class SyntheticTaskSpec:
    classes: int = 2
    vocab_size: int = 120
    examples_per_class: int = 200
    heldout_per_class: int = 50
    signal_strength: float = 1.0
    words_per_text: int = 12

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("synthetic tasks need at least two classes")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ConfigError("signal_strength must lie in [0, 1]")


@dataclass
class SyntheticTask:
    train: list[LabeledExample]
    heldout: list[LabeledExample]
    train_pairs: list[LabeledExample]
    heldout_pairs: list[LabeledExample]


def generate_synthetic_task(spec: SyntheticTaskSpec, rng: RngState) -> SyntheticTask:
    """Class-conditional unigram texts with tunable separability.

    Each class owns a disjoint block of "signal" words; with probability
    ``signal_strength`` a word is drawn from the class block, otherwise
    from the shared pool.  At signal 0 every class has the same word
    distribution (chance-level task); at signal 1 the classes are fully
    separable from any single signal word.  Pair examples draw both texts
    from the same class distribution and carry that class as the label.
    """
    words = [f"w{i:03d}" for i in range(spec.vocab_size)]
    block = spec.vocab_size // (spec.classes + 1)
    class_blocks = [
        words[c * block : (c + 1) * block] for c in range(spec.classes)
    ]
    shared = words[spec.classes * block :]

    def sample_text(gen: np.random.Generator, label: int) -> str:
        chosen = []
        for _ in range(spec.words_per_text):
            if gen.random() < spec.signal_strength:
                pool = class_blocks[label]
            else:
                pool = shared
            chosen.append(pool[int(gen.integers(0, len(pool)))])
        return " ".join(chosen)

    def make_split(gen: np.random.Generator, per_class: int, pairs: bool):
        out = []
        for label in range(spec.classes):
            for _ in range(per_class):
                if pairs:
                    out.append(
                        LabeledExample(
                            text=sample_text(gen, label),
                            text_b=sample_text(gen, label),
                            label=label,
                        )
                    )
                else:
                    out.append(LabeledExample(text=sample_text(gen, label), label=label))
        order = gen.permutation(len(out))
        return [out[i] for i in order]

    return SyntheticTask(
        train=make_split(rng.derive(0).generator(), spec.examples_per_class, False),
        heldout=make_split(rng.derive(1).generator(), spec.heldout_per_class, False),
        train_pairs=make_split(rng.derive(2).generator(), spec.examples_per_class, True),
        heldout_pairs=make_split(rng.derive(3).generator(), spec.heldout_per_class, True),
    )


def generate_mlm_corpus(n_lines: int, rng: RngState, n_frames: int = 10) -> list[str]:
    """Template-structured sentences with strong in-frame word statistics.

    Every line instantiates one of ``n_frames`` sentence frames; each slot
    of a frame picks among a small frame-specific word set, so masked
    words are highly predictable from their neighbours.  This gives a
    small teacher something real to learn at desk scale.
    """
    gen = rng.generator()
    slots_per_frame = 8
    options_per_slot = 3
    lines = []
    for _ in range(n_lines):
        f = int(gen.integers(0, n_frames))
        sentence = []
        for s in range(slots_per_frame):
            k = int(gen.integers(0, options_per_slot))
            sentence.append(f"f{f}s{s}w{k}")
        lines.append(" ".join(sentence))
    return lines


def generate_adhd_raw(
    n_mild: int,
    n_severe: int,
    rng: RngState,
    n_offtopic: int = 0,
    n_removed: int = 0,
) -> list[dict]:
    """Raw-post records shaped like the production input file.

    Mild posts carry scores 0..2, severe posts 3..655 (so the score cap is
    exercised), plus optional off-subreddit and removed records that the
    preprocessing chain must drop.
    """
    gen = rng.generator()
    topics = ["focus", "meds", "sleep", "school", "work", "routine", "family"]

    def text(prefix: str) -> tuple[str, str]:
        a = topics[int(gen.integers(0, len(topics)))]
        b = topics[int(gen.integers(0, len(topics)))]
        return (f"{prefix} about {a}", f"struggling with {b} lately")

    records = []
    for _ in range(n_mild):
        title, body = text("question")
        records.append(
            {"title": title, "body": body, "score": int(gen.integers(0, 3)), "subreddit": "ADHD"}
        )
    for _ in range(n_severe):
        title, body = text("vent")
        records.append(
            {"title": title, "body": body, "score": int(gen.integers(3, 656)), "subreddit": "ADHD"}
        )
    for _ in range(n_offtopic):
        title, body = text("post")
        records.append(
            {"title": title, "body": body, "score": int(gen.integers(0, 10)), "subreddit": "depression"}
        )
    for _ in range(n_removed):
        records.append(
            {"title": "gone", "body": "[removed]", "score": int(gen.integers(0, 10)), "subreddit": "ADHD"}
        )
    order = gen.permutation(len(records))
    return [records[i] for i in order]


# ---------------------------------------------------------------------------
# JSON-lines I/O
# ---------------------------------------------------------------------------


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def examples_to_records(examples: list[LabeledExample]) -> list[dict]:
    records = []
    for ex in examples:
        rec: dict = {"label": ex.label}
        if ex.text_b is None:
            rec["text"] = ex.text
        else:
            rec["text_a"] = ex.text
            rec["text_b"] = ex.text_b
        records.append(rec)
    return records


def records_to_examples(records: list[dict]) -> list[LabeledExample]:
    examples = []
    for rec in records:
        if "text_a" in rec:
            examples.append(
                LabeledExample(text=rec["text_a"], text_b=rec["text_b"], label=rec["label"])
            )
        else:
            examples.append(LabeledExample(text=rec["text"], label=rec["label"]))
    return examples


def read_corpus(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]
