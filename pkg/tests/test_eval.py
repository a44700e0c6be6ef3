"""Tests for metrics, class embeddings, dendrogram, and file exports."""

import json

import numpy as np
import pytest

from recolab import rng as rng_mod
from recolab.data import IGNORE
from recolab.evaluate import (ConfusionMatrix, DendrogramNode, class_embeddings,
                              cosine_distance, dendrogram, evaluate_model,
                              export_dendrogram, export_iou_csv, export_relation_csv,
                              export_relation_dot, mean_iou)
from recolab.model import ModelConfig, forward, init_params


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def miou_brute_force(truth, pred, num_classes):
    """Per-pixel counting oracle for IoU."""
    truth = truth.reshape(-1)
    pred = pred.reshape(-1)
    ious = []
    for c in range(num_classes):
        tp = fp = fn = 0
        for t, p in zip(truth, pred):
            if t == IGNORE:
                continue
            if t == c and p == c:
                tp += 1
            elif t != c and p == c:
                fp += 1
            elif t == c and p != c:
                fn += 1
        denom = tp + fp + fn
        ious.append(np.nan if denom == 0 else tp / denom)
    valid = [v for v in ious if not np.isnan(v)]
    return np.array(ious), (sum(valid) / len(valid) if valid else np.nan)


def dendrogram_oracle(means):
    """Brute-force average-linkage agglomeration, recomputing distances each step.

    Returns the merge sequence as (height, leaves_a, leaves_b) triples
    with the same lowest-class-id tie-breaking the implementation uses.
    """
    ids = sorted(means)
    clusters = [[c] for c in ids]
    merges = []
    while len(clusters) > 1:
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                d = np.mean([cosine_distance(means[a], means[b])
                             for a in clusters[i] for b in clusters[j]])
                key = (d, min(clusters[i][0], clusters[j][0]),
                       max(clusters[i][0], clusters[j][0]))
                if best is None or key < best[0]:
                    best = (key, i, j)
        (d, _, _), i, j = best
        a, b = clusters[i], clusters[j]
        merges.append((d, tuple(sorted(a)), tuple(sorted(b))))
        clusters = [c for k, c in enumerate(clusters) if k not in (i, j)]
        clusters.append(sorted(a + b))
        clusters.sort(key=lambda c: c[0])
    return merges


def merge_sequence(node: DendrogramNode):
    """Post-order list of (height, left leaves, right leaves) for comparison."""
    if node.is_leaf:
        return []
    seq = merge_sequence(node.left) + merge_sequence(node.right)
    pair = sorted([tuple(sorted(node.left.leaves())), tuple(sorted(node.right.leaves()))])
    seq.append((node.height, pair[0], pair[1]))
    return seq


# ---------------------------------------------------------------------------
# Confusion matrix and mIoU
# ---------------------------------------------------------------------------

class TestMeanIou:
    def test_perfect_predictions(self):
        cm = ConfusionMatrix.empty(3)
        truth = np.array([0, 1, 2, 1, 0])
        cm.add(truth, truth)
        iou, mean = mean_iou(cm)
        np.testing.assert_allclose(iou, 1.0)
        assert mean == 1.0

    def test_constant_prediction_half_half(self):
        cm = ConfusionMatrix.empty(2)
        truth = np.array([[0, 0], [1, 1]])
        pred = np.zeros((2, 2), dtype=int)
        cm.add(truth, pred)
        iou, mean = mean_iou(cm)
        np.testing.assert_allclose(iou, [0.5, 0.0])
        assert mean == pytest.approx(0.25)

    def test_empty_class_excluded(self):
        cm = ConfusionMatrix.empty(3)
        cm.add(np.array([0, 1, 0, 1]), np.array([0, 1, 0, 1]))
        iou, mean = mean_iou(cm)
        assert np.isnan(iou[2])
        assert mean == 1.0

    def test_matches_brute_force_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            c = int(rng.integers(2, 6))
            truth = rng.integers(0, c, size=(6, 6))
            truth[rng.uniform(size=(6, 6)) < 0.1] = IGNORE
            pred = rng.integers(0, c, size=(6, 6))
            cm = ConfusionMatrix.empty(c)
            cm.add(truth, pred)
            iou, mean = mean_iou(cm)
            want_iou, want_mean = miou_brute_force(truth, pred, c)
            np.testing.assert_allclose(iou, want_iou, equal_nan=True)
            assert mean == pytest.approx(want_mean, nan_ok=True)

    def test_ignored_pixels_not_counted(self):
        cm = ConfusionMatrix.empty(2)
        truth = np.array([0, 1, IGNORE, IGNORE])
        cm.add(truth, np.array([0, 1, 0, 1]))
        assert cm.counts.sum() == 2

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        truth = rng.integers(0, 4, size=50)
        pred = rng.integers(0, 4, size=50)
        cm = ConfusionMatrix.empty(4)
        cm.add(truth, pred)
        _, mean = mean_iou(cm)
        perm = np.array([2, 0, 3, 1])
        cm2 = ConfusionMatrix.empty(4)
        cm2.add(perm[truth], perm[pred])
        _, mean2 = mean_iou(cm2)
        assert mean == pytest.approx(mean2, abs=1e-12)

    def test_accumulation_order_independent(self):
        rng = np.random.default_rng(2)
        chunks = [(rng.integers(0, 3, size=20), rng.integers(0, 3, size=20))
                  for _ in range(5)]
        cm_a = ConfusionMatrix.empty(3)
        for t, p in chunks:
            cm_a.add(t, p)
        cm_b = ConfusionMatrix.empty(3)
        for t, p in reversed(chunks):
            cm_b.add(t, p)
        assert np.array_equal(cm_a.counts, cm_b.counts)


# ---------------------------------------------------------------------------
# Class embeddings
# ---------------------------------------------------------------------------

def tiny_model(seed=0, num_classes=3, rep_dim=4):
    cfg = ModelConfig(num_classes=num_classes, rep_dim=rep_dim)
    return cfg, init_params(cfg, rng_mod.stream(seed, rng_mod.INIT))


class TestClassEmbeddings:
    def make_records(self, seed, n=3, h=6, w=6, c=3):
        rng = np.random.default_rng(seed)
        return {f"i{k}": {"image": rng.uniform(size=(h, w, 3)),
                          "label": rng.integers(0, c, size=(h, w)).astype(np.uint8),
                          "split": "val"}
                for k in range(n)}

    def test_single_pixel_class(self):
        cfg, params = tiny_model()
        rec = self.make_records(3, n=1)
        rec["i0"]["label"][:] = 0
        rec["i0"]["label"][2, 2] = 1
        means = class_embeddings(params, rec, ["i0"], cfg.num_classes, which="r")
        _, rep, _ = forward(params, rec["i0"]["image"][None], train=True)
        np.testing.assert_allclose(means[1], rep.data[0, 2, 2], atol=1e-12)

    def test_matches_loop_oracle(self):
        cfg, params = tiny_model(seed=1)
        recs = self.make_records(4)
        ids = sorted(recs)
        for which in ("z", "r"):
            means = class_embeddings(params, recs, ids, cfg.num_classes, which=which)
            sums, counts = {}, {}
            for i in ids:
                _, rep, cache = forward(params, recs[i]["image"][None], train=True)
                emb = cache["z2"][0] if which == "z" else rep.data[0]
                lab = recs[i]["label"]
                for y in range(lab.shape[0]):
                    for x in range(lab.shape[1]):
                        c = int(lab[y, x])
                        sums.setdefault(c, np.zeros(emb.shape[-1]))
                        sums[c] = sums[c] + emb[y, x]
                        counts[c] = counts.get(c, 0) + 1
            for c in means:
                np.testing.assert_allclose(means[c], sums[c] / counts[c], atol=1e-10)

    def test_absent_class_omitted(self):
        cfg, params = tiny_model(seed=2)
        recs = self.make_records(5, c=2)     # classes 0 and 1 only
        means = class_embeddings(params, recs, sorted(recs), cfg.num_classes)
        assert 2 not in means


# ---------------------------------------------------------------------------
# Dendrogram
# ---------------------------------------------------------------------------

class TestDendrogram:
    def test_two_classes(self):
        means = {0: np.array([1.0, 0.0]), 1: np.array([1.0, 1.0])}
        tree = dendrogram(means)
        assert sorted(tree.leaves()) == [0, 1]
        assert tree.height == pytest.approx(cosine_distance(means[0], means[1]))

    def test_identical_pair_merges_first_at_zero(self):
        means = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0]),
                 2: np.array([2.0, 0.0])}   # class 2 parallel to class 0
        tree = dendrogram(means)
        first = tree.left if not tree.left.is_leaf else tree.right
        if first.is_leaf:
            first = tree.right
        assert sorted(first.leaves()) == [0, 2]
        assert first.height == pytest.approx(0.0, abs=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            c = int(rng.integers(2, 9))
            means = {k: rng.normal(size=5) for k in range(c)}
            tree = dendrogram(means)
            got = merge_sequence(tree)
            want = dendrogram_oracle(means)
            got_sorted = sorted((round(h, 12), a, b) for h, a, b in got)
            want_sorted = sorted((round(h, 12), a, b) for h, a, b in want)
            assert got_sorted == want_sorted, f"trial {trial}"

    def test_heights_non_decreasing_to_root(self):
        rng = np.random.default_rng(6)
        means = {k: rng.normal(size=4) for k in range(7)}
        tree = dendrogram(means)

        def check(node):
            if node.is_leaf:
                return 0.0
            left, right = check(node.left), check(node.right)
            assert node.height >= left - 1e-12
            assert node.height >= right - 1e-12
            return node.height

        check(tree)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

class TestExports:
    def test_relation_csv_and_dot(self, tmp_path):
        g = np.array([[0.0, 0.5, 0.2], [0.5, 0.0, -0.1], [0.2, -0.1, 0.0]])
        csv_path = tmp_path / "rel.csv"
        export_relation_csv(g, csv_path)
        rows = [line.split(",") for line in csv_path.read_text().strip().split("\n")]
        back = np.array([[float(v) for v in row] for row in rows])
        assert np.array_equal(back, g)
        assert np.array_equal(back, back.T)

        dot_path = tmp_path / "rel.dot"
        export_relation_dot(g, [0, 1, 2], dot_path)
        text = dot_path.read_text()
        assert text.startswith("graph") and text.rstrip().endswith("}")
        assert "c0 -- c1" in text

    def test_dendrogram_exports(self, tmp_path):
        means = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0]),
                 2: np.array([1.0, 1.0])}
        tree = dendrogram(means)
        newick = tmp_path / "d.newick"
        js = tmp_path / "d.json"
        export_dendrogram(tree, newick, js)
        text = newick.read_text().strip()
        assert text.endswith(";") and text.count("(") == 2
        doc = json.loads(js.read_text())
        assert "height" in doc and "left" in doc and "right" in doc

    def test_iou_csv(self, tmp_path):
        path = tmp_path / "iou.csv"
        export_iou_csv(np.array([1.0, 0.5, np.nan]), 0.75, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "class,iou"
        assert lines[1] == "0,1.0"
        assert lines[3] == "2,"            # unsupported class stays empty
        assert lines[4] == "mean,0.75"

    def test_evaluate_model_smoke(self):
        cfg, params = tiny_model(seed=7)
        rng = np.random.default_rng(8)
        recs = {f"i{k}": {"image": rng.uniform(size=(6, 6, 3)),
                          "label": rng.integers(0, 3, size=(6, 6)).astype(np.uint8),
                          "split": "val"} for k in range(4)}
        cm = evaluate_model(params, recs, sorted(recs), cfg.num_classes)
        assert cm.counts.sum() == 4 * 36
        cm_par = evaluate_model(params, recs, sorted(recs), cfg.num_classes, workers=3)
        assert np.array_equal(cm.counts, cm_par.counts)
