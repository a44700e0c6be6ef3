"""Unit tests for the contrastive-loss primitives.

Expected values come from independent scalar-loop oracles (plain
Python loops over math.exp) and central finite differences, never from
the vectorized implementation under test.
"""

import math

import numpy as np
import pytest

from recolab.core import (ClassMean, LossConfig, QueryBundle, class_mean,
                          negative_class_distribution, normalize_pixels, reco_loss,
                          relation_graph)
from recolab.errors import (EmptyClassError, EmptyNegativesError, SingleClassError,
                            ZeroVectorError)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def loss_loop_oracle(bundles, positives, negatives, tau):
    """Scalar-loop evaluation of the contrastive loss (mean over classes and queries)."""
    per_class = []
    for bundle in bundles:
        pos = positives[bundle.class_id]
        negs = negatives[bundle.class_id]
        per_query = []
        for q in bundle.queries:
            num = math.exp(sum(a * b for a, b in zip(q, pos)) / tau)
            den = num
            for k in negs:
                den += math.exp(sum(a * b for a, b in zip(q, k)) / tau)
            per_query.append(-math.log(num / den))
        per_class.append(sum(per_query) / len(per_query))
    return sum(per_class) / len(per_class)


def fd_query_grads(bundles, positives, negatives, cfg, h=1e-5):
    """Central finite differences of the loss w.r.t. every query entry."""
    grads = []
    for bi, bundle in enumerate(bundles):
        g = np.zeros_like(bundle.queries)
        for i in range(bundle.queries.shape[0]):
            for j in range(bundle.queries.shape[1]):
                for sign in (+1, -1):
                    perturbed = [QueryBundle(b.class_id, b.queries.copy(), b.confidences)
                                 for b in bundles]
                    perturbed[bi].queries[i, j] += sign * h
                    val, _ = reco_loss(perturbed, positives, negatives, cfg)
                    g[i, j] += sign * val
        grads.append(g / (2 * h))
    return grads


def random_instance(rng, n_classes=3, n_queries=5, n_negs=8, m=6):
    bundles, positives, negatives = [], {}, {}
    for c in range(n_classes):
        q = rng.normal(size=(n_queries, m))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        bundles.append(QueryBundle(c, q, rng.uniform(size=n_queries)))
        pos = rng.normal(size=(n_queries + 2, m))
        pos /= np.linalg.norm(pos, axis=1, keepdims=True)
        positives[c] = pos.mean(axis=0)
        neg = rng.normal(size=(n_negs, m))
        neg /= np.linalg.norm(neg, axis=1, keepdims=True)
        negatives[c] = neg
    return bundles, positives, negatives


# ---------------------------------------------------------------------------
# normalize_pixels
# ---------------------------------------------------------------------------

class TestNormalizePixels:
    def test_three_four_five(self):
        raw = np.zeros((1, 1, 1, 2))
        raw[0, 0, 0] = [3.0, 4.0]
        rep = normalize_pixels(raw)
        np.testing.assert_allclose(rep.data[0, 0, 0], [0.6, 0.8], atol=1e-15)
        assert rep.normalized

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        rep = normalize_pixels(rng.normal(size=(2, 3, 3, 4)))
        again = normalize_pixels(rep.data)
        assert np.abs(again.data - rep.data).max() < 1e-12

    def test_random_norms(self):
        rng = np.random.default_rng(1)
        rep = normalize_pixels(rng.normal(size=(2, 2, 2, 4)))
        norms = np.linalg.norm(rep.data, axis=-1)
        assert np.all(np.abs(norms - 1.0) <= 1e-6)

    def test_zero_vector_raises(self):
        raw = np.ones((1, 2, 2, 3))
        raw[0, 1, 1] = 0.0
        with pytest.raises(ZeroVectorError):
            normalize_pixels(raw)


# ---------------------------------------------------------------------------
# class_mean
# ---------------------------------------------------------------------------

class TestClassMean:
    def test_two_point_mean(self):
        rep = normalize_pixels(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
        labels = np.full((1, 1, 2), 3)
        cm = class_mean(rep, labels, 3)
        np.testing.assert_allclose(cm.vector, [0.5, 0.5], atol=1e-15)
        assert cm.support == 2

    def test_singleton(self):
        rep = normalize_pixels(np.array([[[[0.6, 0.8]]]]))
        cm = class_mean(rep, np.zeros((1, 1, 1), dtype=int), 0)
        np.testing.assert_allclose(cm.vector, [0.6, 0.8], atol=1e-15)
        assert cm.support == 1

    def test_against_accumulate_oracle(self):
        rng = np.random.default_rng(7)
        rep = normalize_pixels(rng.normal(size=(1, 2, 5, 3)))
        labels = np.zeros((1, 2, 5), dtype=int)
        cm = class_mean(rep, labels, 0)
        acc = np.zeros(3)
        for v in rep.data.reshape(-1, 3):
            acc += v
        np.testing.assert_allclose(cm.vector, acc / 10, atol=1e-12)

    def test_empty_class_raises(self):
        rep = normalize_pixels(np.ones((1, 1, 1, 2)))
        with pytest.raises(EmptyClassError):
            class_mean(rep, np.zeros((1, 1, 1), dtype=int), 5)


# ---------------------------------------------------------------------------
# relation_graph / negative_class_distribution
# ---------------------------------------------------------------------------

class TestRelationGraph:
    def test_identical_means(self):
        v = np.array([1.0, 0.0])
        g = relation_graph([ClassMean(0, v, 1), ClassMean(1, v.copy(), 1)])
        assert g.g[0, 1] == pytest.approx(1.0)

    def test_orthogonal_means(self):
        g = relation_graph([ClassMean(0, np.array([1.0, 0.0]), 1),
                            ClassMean(1, np.array([0.0, 1.0]), 1)])
        assert g.g[0, 1] == 0.0

    def test_against_pairwise_oracle(self):
        rng = np.random.default_rng(3)
        means = [ClassMean(c, rng.normal(size=5), 1) for c in range(4)]
        g = relation_graph(means)
        for a in means:
            for b in means:
                if a.class_id == b.class_id:
                    continue
                want = sum(x * y for x, y in zip(a.vector, b.vector))
                assert abs(g.g[a.class_id, b.class_id] - want) < 1e-12
        active = list(g.active_classes)
        assert np.array_equal(g.g[np.ix_(active, active)].T,
                              g.g[np.ix_(active, active)])

    def test_single_mean_raises(self):
        with pytest.raises(SingleClassError):
            relation_graph([ClassMean(0, np.ones(2), 1)])


class TestNegativeClassDistribution:
    def test_equal_entries(self):
        means = [ClassMean(c, np.zeros(3), 1) for c in range(3)]
        g = relation_graph(means)
        np.testing.assert_allclose(negative_class_distribution(g, 0), [0.5, 0.5])

    def test_hand_softmax(self):
        # row (0, ln 3) -> (1, 3)/4
        g = relation_graph([ClassMean(0, np.zeros(2), 1),
                            ClassMean(1, np.zeros(2), 1),
                            ClassMean(2, np.zeros(2), 1)])
        g.g[0, 1] = 0.0
        g.g[0, 2] = math.log(3.0)
        dist = negative_class_distribution(g, 0)
        np.testing.assert_allclose(dist, [0.25, 0.75], atol=1e-12)

    def test_sums_to_one(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            means = [ClassMean(c, rng.normal(size=4), 1) for c in range(5)]
            g = relation_graph(means)
            for c in range(5):
                assert abs(negative_class_distribution(g, c).sum() - 1.0) <= 1e-12

    def test_monotone_in_row(self):
        means = [ClassMean(c, np.zeros(2), 1) for c in range(4)]
        g = relation_graph(means)
        g.g[0, 1], g.g[0, 2], g.g[0, 3] = 0.1, 0.5, 0.9
        dist = negative_class_distribution(g, 0)
        assert dist[0] < dist[1] < dist[2]

    def test_single_class_raises(self):
        means = [ClassMean(0, np.zeros(2), 1), ClassMean(1, np.zeros(2), 1)]
        g = relation_graph(means)
        g.active_classes = (0,)
        with pytest.raises(SingleClassError):
            negative_class_distribution(g, 0)


# ---------------------------------------------------------------------------
# reco_loss
# ---------------------------------------------------------------------------

class TestRecoLoss:
    def test_closed_form_orthogonal_negative(self):
        q = np.array([[1.0, 0.0]])
        bundles = [QueryBundle(0, q, np.array([1.0]))]
        positives = {0: np.array([1.0, 0.0])}
        negatives = {0: np.array([[0.0, 1.0]])}
        loss, _ = reco_loss(bundles, positives, negatives, LossConfig(temperature=0.5))
        assert loss == pytest.approx(math.log(1 + math.exp(-2.0)), abs=1e-12)
        assert loss == pytest.approx(0.126928, abs=1e-6)

    def test_indistinguishable_keys(self):
        v = np.array([0.6, 0.8])
        bundles = [QueryBundle(0, np.stack([v, v]), np.ones(2))]
        loss, _ = reco_loss(bundles, {0: v}, {0: v[None]}, LossConfig(temperature=0.5))
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(23)
        cfg = LossConfig(temperature=0.5)
        for _ in range(10):
            bundles, positives, negatives = random_instance(rng)
            loss, _ = reco_loss(bundles, positives, negatives, cfg)
            want = loss_loop_oracle(bundles, positives, negatives, cfg.temperature)
            assert abs(loss - want) < 1e-10

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(29)
        cfg = LossConfig(temperature=0.5)
        bundles, positives, negatives = random_instance(rng, n_classes=2, n_queries=3,
                                                        n_negs=4, m=4)
        _, grads = reco_loss(bundles, positives, negatives, cfg)
        fd = fd_query_grads(bundles, positives, negatives, cfg)
        for g, f in zip(grads, fd):
            rel = np.abs(g - f) / np.maximum(np.abs(f), 1e-8)
            assert rel.max() < 1e-4

    def test_positive_and_nonnegative(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            bundles, positives, negatives = random_instance(rng)
            loss, _ = reco_loss(bundles, positives, negatives, LossConfig())
            assert loss > 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(37)
        cfg = LossConfig(temperature=0.7)
        bundles, positives, negatives = random_instance(rng)
        base, _ = reco_loss(bundles, positives, negatives, cfg)

        shuffled_bundles = [QueryBundle(b.class_id, b.queries[::-1].copy(),
                                        b.confidences[::-1].copy()) for b in bundles]
        loss_q, _ = reco_loss(shuffled_bundles, positives, negatives, cfg)
        assert abs(loss_q - base) < 1e-12

        loss_c, _ = reco_loss(bundles[::-1], positives, negatives, cfg)
        assert abs(loss_c - base) < 1e-12

        shuffled_negs = {c: v[::-1].copy() for c, v in negatives.items()}
        loss_k, _ = reco_loss(bundles, positives, shuffled_negs, cfg)
        assert abs(loss_k - base) < 1e-12

    def test_renormalize_positive_flag(self):
        rng = np.random.default_rng(41)
        bundles, positives, negatives = random_instance(rng, n_classes=2)
        plain, _ = reco_loss(bundles, positives, negatives, LossConfig())
        renorm, _ = reco_loss(bundles, positives, negatives,
                              LossConfig(renormalize_positive=True))
        assert plain != renorm
        unit_pos = {c: v / np.linalg.norm(v) for c, v in positives.items()}
        want = loss_loop_oracle(bundles, unit_pos, negatives, 0.5)
        assert abs(renorm - want) < 1e-10

    def test_empty_negatives_raises(self):
        q = np.array([[1.0, 0.0]])
        bundles = [QueryBundle(0, q, np.ones(1))]
        with pytest.raises(EmptyNegativesError):
            reco_loss(bundles, {0: q[0]}, {0: np.empty((0, 2))}, LossConfig())

    def test_no_bundles_is_zero(self):
        loss, grads = reco_loss([], {}, {}, LossConfig())
        assert loss == 0.0 and grads == []
