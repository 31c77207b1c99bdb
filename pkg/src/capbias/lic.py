"""Classifier-based leakage metrics: SC, Leakage, LIC_D, LIC_M, and LIC,
with the multi-seed protocol that produces mean/std reports.

Per run, one classifier is trained on perturbed masked human captions and
one on masked model captions; each is evaluated on its held-out balanced
test split. Both classifiers share the model-side vocabulary so that human
captions cannot benefit from a richer word inventory.
"""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from capbias import classifier as clf
from capbias.classifier import AttributeClassifier, ClassifierConfig
from capbias.corpus import Corpus, CorpusError, balanced_image_split
from capbias.masking import Masker
from capbias.vocab import Vocabulary, align_to_prediction_vocab, build_vocab

logger = logging.getLogger(__name__)

SCALE = 100.0

_MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, index: int) -> int:
    """splitmix64 stream: independent 64-bit seeds from one master seed."""
    z = (master_seed + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class ProtocolConfig:
    n_seeds: int = 10
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    test_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.n_seeds < 1:
            raise CorpusError("n_seeds must be >= 1")


@dataclass(frozen=True)
class MetricReport:
    """One metric's per-seed samples with mean, sample std, and provenance."""

    name: str
    per_seed: tuple[float, ...]
    mean: float
    std: Optional[float]  # None (flagged) when only one seed ran
    provenance: dict

    @classmethod
    def from_samples(
        cls, name: str, samples: Sequence[float], provenance: dict
    ) -> "MetricReport":
        samples = tuple(float(s) for s in samples)
        std = statistics.stdev(samples) if len(samples) > 1 else None
        if std is None:
            logger.warning("metric %s ran with a single seed; std undefined", name)
        return cls(
            name=name,
            per_seed=samples,
            mean=statistics.fmean(samples),
            std=std,
            provenance=dict(provenance),
        )


def sc_accuracy(
    classifier: AttributeClassifier,
    sequences: Sequence[Sequence[int]],
    labels: Sequence[int],
) -> float:
    """Fraction of captions whose predicted attribute matches the label."""
    if len(sequences) == 0:
        raise CorpusError("cannot score an empty caption set")
    predictions = clf.predict(classifier, sequences)
    return float((predictions == np.asarray(labels)).mean())


def leakage(lambda_m: float, lambda_d: float) -> float:
    """Accuracy gap between the model-side and data-side classifiers."""
    return lambda_m - lambda_d


def lic_component(
    classifier: AttributeClassifier,
    sequences: Sequence[Sequence[int]],
    labels: Sequence[int],
) -> float:
    """Confidence-weighted accuracy on the x100 scale.

    Each caption contributes its true-class confidence when the prediction
    is correct and zero otherwise; two balanced classes with no signal give
    the unbiased reference value 25.
    """
    if len(sequences) == 0:
        raise CorpusError("cannot score an empty caption set")
    probs = clf.predict_proba(classifier, sequences)
    labels_arr = np.asarray(labels)
    correct = probs.argmax(axis=1) == labels_arr
    confidence = probs[np.arange(len(labels_arr)), labels_arr]
    return float((confidence * correct).mean() * SCALE)


def lic(lic_m: float, lic_d: float) -> float:
    """LIC = LIC_M - LIC_D; positive means the model amplifies bias."""
    return lic_m - lic_d


def _encode_corpus(
    corpus: Corpus,
    image_ids: set[str],
    vocabulary: Vocabulary,
    masker: Masker,
    align: bool,
) -> tuple[list[list[int]], list[int]]:
    value_index = {v: i for i, v in enumerate(corpus.attribute_spec.values)}
    sequences: list[list[int]] = []
    labels: list[int] = []
    for record in corpus.records:
        if record.image_id not in image_ids or record.attribute is None:
            continue
        tokens: Sequence[str] = masker.mask(record.tokens).tokens
        if align:
            tokens = align_to_prediction_vocab(tokens, vocabulary)
        sequences.append(vocabulary.encode(tokens))
        labels.append(value_index[record.attribute])
    return sequences, labels


def run_protocol(
    human_corpus: Corpus,
    generated_corpus: Corpus,
    config: ProtocolConfig,
    master_seed: int = 0,
) -> dict[str, MetricReport]:
    """The full LIC pipeline over n_seeds independent runs.

    Per seed: balanced image split (shared by both corpora), model-side
    vocabulary from the masked generated train captions, vocabulary
    alignment of the human captions, one classifier per side, then LIC_D,
    LIC_M, LIC, SC, and Leakage on the held-out test split. Any seed
    failure aborts the whole run.
    """
    if human_corpus.attribute_spec != generated_corpus.attribute_spec:
        raise CorpusError("corpora must share the same attribute spec")
    spec = human_corpus.attribute_spec
    masker = Masker(spec)
    annotations = generated_corpus.annotation_map()
    human_annotations = human_corpus.annotation_map()
    for image_id, value in annotations.items():
        if human_annotations.get(image_id) not in (None, value):
            raise CorpusError(
                f"image {image_id!r} annotated inconsistently across corpora"
            )

    samples: dict[str, list[float]] = {
        name: [] for name in ("lic_d", "lic_m", "lic", "sc", "leakage")
    }
    for run in range(config.n_seeds):
        split_seed = derive_seed(master_seed, 3 * run)
        init_seed = derive_seed(master_seed, 3 * run + 1)
        train_ids, test_ids = balanced_image_split(
            annotations, spec.values, config.test_fraction, split_seed
        )

        gen_train_masked = [
            masker.mask(r.tokens).tokens
            for r in generated_corpus.records
            if r.image_id in train_ids
        ]
        if not gen_train_masked:
            raise CorpusError("generated corpus has no captions in the train split")
        v_pre = build_vocab(gen_train_masked, mask_token=spec.mask_token)

        run_config = replace(config.classifier, seed=init_seed)
        sides = {}
        for which, corpus, align in (
            ("d", human_corpus, True),
            ("m", generated_corpus, False),
        ):
            train_x, train_y = _encode_corpus(corpus, train_ids, v_pre, masker, align)
            test_x, test_y = _encode_corpus(corpus, test_ids, v_pre, masker, align)
            model = clf.init_classifier(run_config, v_pre, len(spec.values))
            clf.train(model, train_x, train_y, run_config)
            sides[which] = (
                lic_component(model, test_x, test_y),
                sc_accuracy(model, test_x, test_y),
            )

        lic_d_value, lambda_d = sides["d"]
        lic_m_value, lambda_m = sides["m"]
        samples["lic_d"].append(lic_d_value)
        samples["lic_m"].append(lic_m_value)
        samples["lic"].append(lic(lic_m_value, lic_d_value))
        samples["sc"].append(lambda_m)
        samples["leakage"].append(leakage(lambda_m, lambda_d))
        logger.info(
            "seed %d/%d: lic_d=%.2f lic_m=%.2f lic=%.2f",
            run + 1, config.n_seeds, lic_d_value, lic_m_value,
            lic(lic_m_value, lic_d_value),
        )

    provenance = {
        "master_seed": master_seed,
        "n_seeds": config.n_seeds,
        "test_fraction": config.test_fraction,
        "config_hash": config.classifier.content_hash(),
        "corpus_hashes": {
            "human": human_corpus.content_hash(),
            "generated": generated_corpus.content_hash(),
        },
        "scale": "x100",
    }
    return {
        name: MetricReport.from_samples(name, values, provenance)
        for name, values in samples.items()
    }
