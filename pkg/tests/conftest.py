import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from netpert import models, traffic

# Desk-scale standard corpora, shared (and never mutated) across the suite.

CORPUS_SEED = 11
MODEL_SEED = 101


@pytest.fixture(scope="session")
def desk_corpus():
    return traffic.synth_corpus(class_count=10, per_class=200, length_range=(350, 650),
                                seed=CORPUS_SEED, fixed_length=500)


@pytest.fixture(scope="session")
def pair_corpus():
    conns = traffic.synth_correlation_corpus(400, length_range=(400, 600),
                                             seed=CORPUS_SEED, fixed_length=200)
    return traffic.make_pairs(conns, negatives_per_flow=4, seed=CORPUS_SEED)


@pytest.fixture(scope="session")
def direction_model(desk_corpus):
    clf, report = models.train_classifier("direction_cnn", desk_corpus,
                                          models.TrainConfig(epochs=12), seed=MODEL_SEED)
    assert report.final_test_accuracy >= 0.90, f"clean accuracy gate: {report}"
    return clf


@pytest.fixture(scope="session")
def twobranch_model(desk_corpus):
    clf, report = models.train_classifier("twobranch", desk_corpus,
                                          models.TrainConfig(epochs=12), seed=MODEL_SEED)
    assert report.final_test_accuracy >= 0.90, f"clean accuracy gate: {report}"
    return clf


@pytest.fixture(scope="session")
def pair_model(pair_corpus):
    clf, report = models.train_classifier("pair_cnn", pair_corpus,
                                          models.TrainConfig(epochs=10), seed=MODEL_SEED)
    assert report.final_test_accuracy >= 0.90, f"TP-at-FP gate: {report}"
    return clf
