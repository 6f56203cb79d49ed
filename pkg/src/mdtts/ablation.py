"""Routing ablation experiment on the synthetic corpus.

Trains the routed model and an otherwise identical model whose blocks use a
single shared feed-forward, then scores dialect classification accuracy of
synthesized mels under a classifier fit on ground-truth targets. Used by the
acceptance suite and reproducible from the CLI via the manifest files that
``toydata.write_corpus_files`` emits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .classifier import DialectClassifier, dca, train_dialect_classifier
from .model import SynthesisModel, train_model
from .toydata import ToyCorpus, ToySpec, build_toy_corpus, toy_model_config

log = logging.getLogger(__name__)

__all__ = ["AblationResult", "train_toy_model", "toy_dca", "run_ablation"]

DEFAULT_STEPS = 300


@dataclass(frozen=True)
class AblationResult:
    seed: int
    routed_dca: float
    shared_dca: float

    @property
    def gap(self) -> float:
        return self.routed_dca - self.shared_dca


def train_toy_model(corpus: ToyCorpus, routed: bool, seed: int,
                    steps: int = DEFAULT_STEPS) -> SynthesisModel:
    config = toy_model_config(corpus.spec, routed=routed)
    model = SynthesisModel(config, seed=seed)
    train_model(model, corpus.train, steps=steps, batch_size=8, lr=2e-3,
                seed=seed, log_every=0)
    return model


def toy_dca(model: SynthesisModel, corpus: ToyCorpus,
            classifier: DialectClassifier, seed_base: int = 9000) -> float:
    """DCA of mels synthesized for the held-out split."""
    samples = []
    for i, sample in enumerate(corpus.eval):
        mel, _ = model.synthesize_mel(sample.token_ids, sample.did,
                                      seed=seed_base + i)
        samples.append((mel, sample.did))
    return dca(classifier, samples)


def run_ablation(seeds=(0, 1, 2), steps: int = DEFAULT_STEPS,
                 n_train_texts: int = 120, n_eval_texts: int = 40,
                 spec: ToySpec = ToySpec(),
                 corpus: ToyCorpus | None = None,
                 classifier: DialectClassifier | None = None
                 ) -> list[AblationResult]:
    if corpus is None:
        corpus = build_toy_corpus(n_train_texts=n_train_texts,
                                  n_eval_texts=n_eval_texts, spec=spec)
    if classifier is None:
        classifier = train_dialect_classifier(
            [(s.mel, s.did) for s in corpus.train], epochs=20, seed=0)
    results = []
    for seed in seeds:
        routed = toy_dca(train_toy_model(corpus, True, seed, steps),
                         corpus, classifier)
        shared = toy_dca(train_toy_model(corpus, False, seed, steps),
                         corpus, classifier)
        result = AblationResult(seed=seed, routed_dca=routed,
                                shared_dca=shared)
        log.info("ablation seed %d: routed %.1f%%, shared %.1f%%, gap %.1f",
                 seed, routed, shared, result.gap)
        results.append(result)
    return results
