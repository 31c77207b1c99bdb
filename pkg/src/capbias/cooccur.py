"""Co-occurrence based bias metrics: BA, directional BA, Ratio, and Error.

All metric functions return unscaled values; the x100 reporting scale is
applied at the report layer.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from capbias.corpus import Corpus, CorpusError
from capbias.masking import MENTION_MIXED, MENTION_NONE, Masker

logger = logging.getLogger(__name__)


class Provenance(enum.Enum):
    TOP_K_FILTERED = "top_k_filtered"
    OBJECT_LABELS = "object_labels"
    USER_SUPPLIED = "user_supplied"


class CountMode(enum.Enum):
    """How the attribute value of a caption is determined when counting."""

    ATTR_WORDS_IN_CAPTION = "attr_words_in_caption"
    ATTR_ANNOTATION = "attr_annotation"


@dataclass(frozen=True)
class TaskWordSet:
    """The task words (or object labels) whose attribute skew is measured."""

    words: tuple[str, ...]
    provenance: Provenance

    def __post_init__(self) -> None:
        if not self.words:
            raise CorpusError("task word set is empty")
        if len(set(self.words)) != len(self.words):
            raise CorpusError("task word set contains duplicates")


@dataclass(frozen=True)
class CooccurrenceTable:
    """Counts of attribute value a co-occurring with task word l."""

    values: tuple[str, ...]
    words: tuple[str, ...]
    counts: np.ndarray  # shape (|A|, |L|), non-negative integers

    def __post_init__(self) -> None:
        if self.counts.shape != (len(self.values), len(self.words)):
            raise CorpusError(
                f"counts shape {self.counts.shape} does not match "
                f"({len(self.values)}, {len(self.words)})"
            )
        if (self.counts < 0).any():
            raise CorpusError("co-occurrence counts must be non-negative")

    @property
    def value_marginals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def word_marginals(self) -> np.ndarray:
        return self.counts.sum(axis=0)


@dataclass(frozen=True)
class JointDistribution:
    """Joint and conditional probabilities over attribute values x task words.

    Conditionals may contain NaN where the conditioning marginal is zero;
    metrics skip those cells and reduce the divisor.
    """

    values: tuple[str, ...]
    words: tuple[str, ...]
    p_al: np.ndarray           # (|A|, |L|)
    p_a: np.ndarray            # (|A|,)
    p_l: np.ndarray            # (|L|,)
    p_a_given_l: np.ndarray    # (|A|, |L|)
    p_l_given_a: np.ndarray    # (|A|, |L|)

    @classmethod
    def from_table(cls, table: CooccurrenceTable) -> "JointDistribution":
        counts = table.counts.astype(float)
        total = counts.sum()
        if total <= 0:
            raise CorpusError("cannot form a distribution from an all-zero table")
        p_al = counts / total
        p_a = p_al.sum(axis=1)
        p_l = p_al.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            p_a_given_l = np.where(p_l > 0, p_al / p_l, np.nan)
            p_l_given_a = np.where(p_a[:, None] > 0, p_al / p_a[:, None], np.nan)
        return cls(
            values=table.values,
            words=table.words,
            p_al=p_al,
            p_a=p_a,
            p_l=p_l,
            p_a_given_l=p_a_given_l,
            p_l_given_a=p_l_given_a,
        )


def _caption_value(record, masker: Masker, mode: CountMode) -> Optional[str]:
    if mode is CountMode.ATTR_ANNOTATION:
        if record.attribute is None:
            raise CorpusError(
                f"record {record.caption_id!r} lacks an attribute annotation "
                "(required in annotation counting mode)"
            )
        return record.attribute
    mention = masker.mention(record.tokens)
    if mention.kind in (MENTION_MIXED, MENTION_NONE):
        return None
    return mention.kind


def select_task_words(
    human_corpus: Corpus,
    top_k: int = 1000,
    min_per_value: int = 100,
    allow_words: Optional[frozenset[str]] = None,
) -> TaskWordSet:
    """Frequent caption words that co-occur enough with every attribute value.

    Candidates are the top_k most frequent tokens (attribute words excluded,
    optionally restricted to an allow-list); a word survives only if it
    co-occurs at least min_per_value times with each attribute value in the
    ground-truth captions.
    """
    spec = human_corpus.attribute_spec
    masker = Masker(spec)
    freq: dict[str, int] = {}
    for record in human_corpus.records:
        for token in record.tokens:
            freq[token] = freq.get(token, 0) + 1

    candidates = [
        t for t in sorted(freq, key=lambda t: (-freq[t], t))
        if t not in masker.all_words and t != spec.mask_token
        and (allow_words is None or t in allow_words)
    ][:top_k]
    if not candidates:
        raise CorpusError("no task-word candidates; corpus may be too small")

    mode = (
        CountMode.ATTR_WORDS_IN_CAPTION
        if spec.has_word_lists
        else CountMode.ATTR_ANNOTATION
    )
    table = count_cooccurrence(
        human_corpus, TaskWordSet(tuple(candidates), Provenance.USER_SUPPLIED), mode
    )
    keep = (table.counts >= min_per_value).all(axis=0)
    words = tuple(w for w, k in zip(candidates, keep) if k)
    if not words:
        raise CorpusError(
            f"no task words co-occur >= {min_per_value} times with every "
            "attribute value; lower min_per_value or top_k filters"
        )
    return TaskWordSet(words=words, provenance=Provenance.TOP_K_FILTERED)


def count_cooccurrence(
    corpus: Corpus,
    task_words: TaskWordSet,
    mode: CountMode,
    synonyms: Optional[Mapping[str, frozenset[str]]] = None,
) -> CooccurrenceTable:
    """Count captions where a task word appears and an attribute value holds.

    A caption contributes at most once per (value, word) cell. In word-based
    mode, captions mentioning zero or multiple attribute values contribute
    nothing. For object-label word sets, presence is read from the image's
    object annotations instead of the caption tokens. A synonyms lexicon
    (label -> surface forms) makes a label count as present when any of its
    surface forms appears in the caption.
    """
    spec = corpus.attribute_spec
    masker = Masker(spec)
    value_index = {v: i for i, v in enumerate(spec.values)}
    word_index = {w: i for i, w in enumerate(task_words.words)}
    counts = np.zeros((len(spec.values), len(task_words.words)), dtype=np.int64)

    use_objects = task_words.provenance is Provenance.OBJECT_LABELS
    if use_objects and corpus.object_annotations is None:
        raise CorpusError("object-label counting requires object annotations")

    for record in corpus.records:
        value = _caption_value(record, masker, mode)
        if value is None:
            continue
        if use_objects:
            labels = corpus.object_annotations.get(record.image_id)
            if labels is None:
                raise CorpusError(
                    f"image {record.image_id!r} has no object annotation"
                )
            present = labels & word_index.keys()
        elif synonyms is not None:
            token_set = set(record.tokens)
            present = {
                w for w in word_index
                if token_set & synonyms.get(w, frozenset((w,)))
            }
        else:
            present = set(record.tokens) & word_index.keys()
        row = value_index[value]
        for word in present:
            counts[row, word_index[word]] += 1

    return CooccurrenceTable(values=spec.values, words=task_words.words, counts=counts)


def bias_of(table: CooccurrenceTable) -> tuple[np.ndarray, tuple[str, ...]]:
    """Per-word attribute share b_al = c_al / sum_a c_al.

    All-zero columns are excluded (with a warning) rather than producing
    NaN; returns the bias matrix over the surviving words and those words.
    """
    totals = table.word_marginals
    keep = totals > 0
    dropped = [w for w, k in zip(table.words, keep) if not k]
    if dropped:
        logger.warning(
            "excluding %d task words with zero co-occurrence: %s",
            len(dropped), dropped[:10],
        )
    if not keep.any():
        raise CorpusError("every task-word column is all-zero")
    counts = table.counts[:, keep].astype(float)
    bias = counts / counts.sum(axis=0, keepdims=True)
    return bias, tuple(w for w, k in zip(table.words, keep) if k)


def ba(b_hat: np.ndarray, b: np.ndarray, n_values: int) -> float:
    """Bias amplification: mean over words of the gated per-cell deltas.

    Only cells where the ground-truth share strictly exceeds 1/|A|
    contribute. Positive means the model amplifies the skew.
    """
    if b_hat.shape != b.shape:
        raise CorpusError(f"shape mismatch: {b_hat.shape} vs {b.shape}")
    gate = b > (1.0 / n_values)
    n_words = b.shape[1]
    return float(((b_hat - b) * gate).sum() / n_words)


def ba_from_tables(gt_table: CooccurrenceTable, gen_table: CooccurrenceTable) -> float:
    """BA over the task words with non-zero counts in both tables."""
    if gt_table.words != gen_table.words or gt_table.values != gen_table.values:
        raise CorpusError("tables must share the same task words and values")
    keep = (gt_table.word_marginals > 0) & (gen_table.word_marginals > 0)
    if not keep.any():
        raise CorpusError("no task word has counts on both sides")
    gt = gt_table.counts[:, keep].astype(float)
    gen = gen_table.counts[:, keep].astype(float)
    b = gt / gt.sum(axis=0, keepdims=True)
    b_hat = gen / gen.sum(axis=0, keepdims=True)
    return ba(b_hat, b, len(gt_table.values))


class DbaDirection(enum.Enum):
    GENDER_GIVEN_OBJECT = "gender_given_object"   # DBA_G: delta on p(a|l)
    OBJECT_GIVEN_GENDER = "object_given_gender"   # DBA_O: delta on p(l|a)


def dba(
    gt: JointDistribution, gen: JointDistribution, direction: DbaDirection
) -> float:
    """Directional bias amplification with the independence-gated sign.

    The gate y_al = 1[p(a,l) > p(a)p(l)] is read from the ground-truth
    distribution only. Cells whose conditional is undefined on either side
    are skipped and the divisor reduced accordingly.
    """
    if gt.p_al.shape != gen.p_al.shape:
        raise CorpusError("distributions have mismatched shapes")
    if direction is DbaDirection.GENDER_GIVEN_OBJECT:
        delta = gen.p_a_given_l - gt.p_a_given_l
    else:
        delta = gen.p_l_given_a - gt.p_l_given_a
    y = (gt.p_al > np.outer(gt.p_a, gt.p_l)).astype(float)
    valid = ~np.isnan(delta)
    n_skipped = int((~valid).sum())
    if n_skipped:
        logger.warning("dba: skipping %d cells with undefined conditionals", n_skipped)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise CorpusError("no cell has defined conditionals on both sides")
    contrib = np.where(valid, y * delta + (1.0 - y) * (-delta), 0.0)
    return float(contrib.sum() / n_valid)


def ratio(corpus: Corpus) -> float:
    """Captions mentioning only the second attribute value over those
    mentioning only the first (male/female for the default gender spec).
    """
    spec = corpus.attribute_spec
    listed = [v for v in spec.values if spec.word_lists.get(v)]
    if len(listed) != 2:
        raise CorpusError("ratio requires exactly 2 attribute values with word lists")
    first, second = listed
    masker = Masker(spec)
    tally = {first: 0, second: 0}
    for record in corpus.records:
        mention = masker.mention(record.tokens)
        if mention.kind in tally:
            tally[mention.kind] += 1
    if tally[first] == 0:
        raise CorpusError(f"no caption mentions only {first!r}; ratio undefined")
    return tally[second] / tally[first]


def error_rate(corpus: Corpus, count_mixed_as_error: bool = False) -> float:
    """Fraction of attribute-mentioning captions contradicting the annotation.

    Captions with no mention are always excluded; mixed-mention captions are
    excluded by default, or counted as errors when count_mixed_as_error.
    """
    masker = Masker(corpus.attribute_spec)
    n_total = 0
    n_wrong = 0
    for record in corpus.records:
        if record.attribute is None:
            continue
        mention = masker.mention(record.tokens)
        if mention.kind == MENTION_NONE:
            continue
        if mention.kind == MENTION_MIXED:
            if count_mixed_as_error:
                n_total += 1
                n_wrong += 1
            continue
        n_total += 1
        if mention.kind != record.attribute:
            n_wrong += 1
    if n_total == 0:
        raise CorpusError("no caption mentions an attribute value; error undefined")
    return n_wrong / n_total
