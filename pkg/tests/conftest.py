"""Shared fixtures: one trained nano bundle per test session.

Training is seeded and deterministic, so the artifacts are cached on disk
under tests/_cache and reused across pytest runs; delete the directory (or
bump FIXTURE_TAG) to retrain from scratch.
"""

from pathlib import Path

import pytest

from specexit.controllers import PredictorWeights
from specexit.core import Rng, TokenSequence
from specexit.nanolm import (
    NanoConfig,
    NanoModel,
    init_exit_from_target,
    load_checkpoint,
    save_checkpoint,
)
from specexit.training import (
    Corpus,
    LabelSet,
    PredictorTrainConfig,
    TrainConfig,
    make_predictor_labels,
    self_distill_generate,
    train_exit,
    train_predictor,
    train_target,
)

FIXTURE_TAG = "v1"
CACHE_DIR = Path(__file__).parent / "_cache"

NANO_CFG = NanoConfig(
    vocab_size=256,
    d_model=64,
    n_heads=4,
    n_layers=4,
    d_ff=128,
    max_seq_len=256,
    exit_after=1,
    exit_depth=1,
)
TARGET_TRAIN = TrainConfig(lr=0.05, batch_size=16, epochs=4, seq_len=64, seed=0)
EXIT_TRAIN = TrainConfig(lr=0.05, batch_size=16, epochs=10, seq_len=64, seed=1, distill_mix=0.5)
SPLIT_SEED = 0
HOLDOUT_FRAC = 0.15
DISTILL_SEED = 11


def _cache_path(name: str) -> Path:
    CACHE_DIR.mkdir(exist_ok=True)
    return CACHE_DIR / f"{FIXTURE_TAG}-{name}"


@pytest.fixture(scope="session")
def corpus_splits():
    return Corpus.bundled().split(HOLDOUT_FRAC, seed=SPLIT_SEED)


@pytest.fixture(scope="session")
def nano_cfg():
    return NANO_CFG


@pytest.fixture(scope="session")
def target_weights(corpus_splits):
    path = _cache_path("target.nlm1")
    if path.exists():
        return load_checkpoint(path)[1]
    train_c, _ = corpus_splits
    weights = train_target(train_c, NANO_CFG, TARGET_TRAIN)
    save_checkpoint(weights, NANO_CFG, path)
    return weights


@pytest.fixture(scope="session")
def init_exit_weights(target_weights):
    return init_exit_from_target(NANO_CFG, target_weights)


@pytest.fixture(scope="session")
def distilled_weights(corpus_splits, target_weights, init_exit_weights):
    path = _cache_path("distilled.nlm1")
    if path.exists():
        return load_checkpoint(path)[1]
    train_c, _ = corpus_splits
    prompts = [d[:24] for d in train_c.documents[:24]]
    generated = self_distill_generate(
        NANO_CFG, target_weights, prompts, gen_len=96, seed=DISTILL_SEED
    )
    weights = train_exit(init_exit_weights, train_c.merge(generated), NANO_CFG, EXIT_TRAIN)
    save_checkpoint(weights, NANO_CFG, path)
    return weights


@pytest.fixture(scope="session")
def trained_bundle(distilled_weights):
    return NanoModel(NANO_CFG, distilled_weights)


@pytest.fixture(scope="session")
def init_bundle(init_exit_weights):
    return NanoModel(NANO_CFG, init_exit_weights)


@pytest.fixture(scope="session")
def label_set(corpus_splits, trained_bundle):
    path = _cache_path("labels.nlm1")
    if path.exists():
        return LabelSet.load(path)
    train_c, _ = corpus_splits
    prompts = [
        TokenSequence(list(d[:40]), 256) for d in train_c.documents if len(d) >= 56
    ][:40]
    labels = make_predictor_labels(trained_bundle, prompts, max_len=40 + 48, draft_k=6)
    labels.save(path)
    return labels


@pytest.fixture(scope="session")
def label_split(label_set):
    order = Rng(99).permutation(len(label_set))
    n_train = int(0.7 * len(label_set))
    return label_set.subset(order[:n_train]), label_set.subset(order[n_train:])


@pytest.fixture(scope="session")
def predictor(label_split):
    path = _cache_path("predictor.nlm1")
    if path.exists():
        return PredictorWeights.load(path)
    train_labels, _ = label_split
    pred = train_predictor(train_labels, PredictorTrainConfig(seed=3))
    pred.save(path)
    return pred
