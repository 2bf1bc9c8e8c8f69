import math

import numpy as np
import pytest

from hiersmooth.classifiers import (CoinClassifier, ConstantClassifier, IndicatorParityClassifier,
                                    NearestCentroidClassifier, ThresholdClassifier,
                                    UnknownClassifierError, builtin_classifiers, make_classifier)
from hiersmooth.core import (DatasetRecord, Domain, ExtendedMatrix, FeatureMatrix, Gaussian,
                             SmoothingConfig, SparseFlip)
from hiersmooth.harness import SyntheticSpec, make_synthetic_dataset
from hiersmooth.sampling import RngStream, draw_batch, sample_under_noise


def test_registry_round_trip():
    reg = builtin_classifiers()
    assert {"constant", "parity", "threshold", "coin", "centroid", "centroid-indicator"} <= set(reg)
    assert isinstance(make_classifier("constant", label=1), ConstantClassifier)
    assert isinstance(make_classifier("parity"), IndicatorParityClassifier)
    assert isinstance(make_classifier("threshold", threshold=2.0), ThresholdClassifier)
    assert make_classifier("centroid-indicator").use_indicator
    assert not make_classifier("centroid").use_indicator
    with pytest.raises(UnknownClassifierError, match="choose from"):
        make_classifier("resnet")


def test_rule_classifiers():
    z = ExtendedMatrix(FeatureMatrix([[1.0, 2.0], [0.0, 0.0]]), [1, 0])
    assert ConstantClassifier(2, 3).classify(z) == 2
    assert IndicatorParityClassifier().classify(z) == 1
    assert ThresholdClassifier(3.0).classify(z) == 1
    assert ThresholdClassifier(3.5).classify(z) == 0
    with pytest.raises(ValueError):
        ConstantClassifier(3, 3)


def test_coin_exact_vote_probabilities():
    X = FeatureMatrix([[0.0, 0.0]])
    clf = CoinClassifier([0.1, 0.9], X, 1.0)
    assert clf.vote_probabilities(1.0).tolist() == pytest.approx([0.1, 0.9])
    # an unselected row puts u at 1/2, which falls in the second slice
    assert clf.vote_probabilities(0.6).tolist() == pytest.approx([0.06, 0.94])
    with pytest.raises(ValueError):
        CoinClassifier([0.5, 0.6], X, 1.0)


@pytest.mark.parametrize("probs,p", [((0.3, 0.7), 1.0), ((0.2, 0.5, 0.3), 0.7)])
def test_coin_empirical_rate_within_three_sigma(probs, p):
    X = FeatureMatrix([[0.5, -0.5], [1.0, 1.0]])
    clf = CoinClassifier(probs, X, 0.8)
    n = 20_000
    votes = sample_under_noise(clf, X, SmoothingConfig.uniform(p, Gaussian(0.8)), n, RngStream(4))
    exact = clf.vote_probabilities(p)
    for c, q in enumerate(exact):
        assert abs(votes[c] / n - q) <= 3 * math.sqrt(q * (1 - q) / n)


def test_centroid_beats_chance_on_synthetic_data():
    cfg = SmoothingConfig.uniform(0.8, Gaussian(0.5))
    train = make_synthetic_dataset(SyntheticSpec(200, 4, 3, seed=100))
    test = make_synthetic_dataset(SyntheticSpec(200, 4, 3, seed=1))
    for use_indicator in (False, True):
        clf = NearestCentroidClassifier(2, use_indicator).fit(train, cfg, seed=0)
        batch_acc = []
        for i, rec in enumerate(test):
            b = draw_batch(rec.matrix, cfg, 1, RngStream(9, i).generator(0))
            batch_acc.append(clf.classify_batch(b)[0] == rec.label)
        assert np.mean(batch_acc) > 0.75


def test_centroid_indicator_features_are_used():
    cfg = SmoothingConfig.uniform(0.5, SparseFlip(0.0, 0.0))
    recs = [DatasetRecord("a", 0, FeatureMatrix([[0], [0]], Domain.BINARY))]
    clf = NearestCentroidClassifier(1, use_indicator=True).fit(recs, cfg, draws_per_record=8)
    assert clf.centroids.shape == (1, 4)
    assert NearestCentroidClassifier(1).fit(recs, cfg).centroids.shape == (1, 2)


def test_centroid_fit_errors():
    cfg = SmoothingConfig.uniform(0.5, Gaussian(1.0))
    with pytest.raises(ValueError):
        NearestCentroidClassifier().fit([], cfg)
    with pytest.raises(ValueError, match="label"):
        NearestCentroidClassifier(2).fit([DatasetRecord("x", 5, FeatureMatrix([[0.0]]))], cfg)
    with pytest.raises(RuntimeError):
        NearestCentroidClassifier().classify(ExtendedMatrix(FeatureMatrix([[0.0]]), [0]))


def test_unseen_class_is_never_predicted():
    cfg = SmoothingConfig.uniform(1.0, Gaussian(0.1))
    recs = [DatasetRecord("a", 1, FeatureMatrix([[5.0]]))]
    clf = NearestCentroidClassifier(3).fit(recs, cfg)
    b = draw_batch(FeatureMatrix([[-50.0]]), cfg, 10, RngStream(0))
    assert set(clf.classify_batch(b).tolist()) == {1}
