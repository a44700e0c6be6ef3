"""Segmentation metrics, class-embedding analysis, and relation exports.

Confusion-matrix accumulation is additive over images, so evaluation
can fan out per image and merge.  The dendrogram realizes the
class-relationship analysis as agglomerative average-linkage clustering
of cosine distances between class mean embeddings.
"""

import json
import os
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .data import IGNORE
from .errors import DimensionMismatchError
from .model import forward


@dataclass
class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @staticmethod
    def empty(num_classes: int) -> "ConfusionMatrix":
        return ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64))

    def add(self, truth: np.ndarray, pred: np.ndarray) -> None:
        """Accumulate one label/prediction pair, skipping ignored pixels."""
        truth = np.asarray(truth).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if truth.shape != pred.shape:
            raise DimensionMismatchError("truth/prediction shapes differ")
        c = self.counts.shape[0]
        keep = truth != IGNORE
        flat = truth[keep].astype(np.int64) * c + pred[keep].astype(np.int64)
        self.counts += np.bincount(flat, minlength=c * c).reshape(c, c)

    def merge(self, other: "ConfusionMatrix") -> None:
        self.counts += other.counts


def mean_iou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU = TP / (TP + FP + FN) and its mean over supported classes.

    Classes with an empty union (absent from both truth and prediction)
    get NaN and are excluded from the mean.
    """
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=1) + counts.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    supported = ~np.isnan(iou)
    mean = float(iou[supported].mean()) if supported.any() else float("nan")
    return iou, mean


def evaluate_model(params: dict, records: dict, ids: list[str], num_classes: int,
                   workers: int = 1) -> ConfusionMatrix:
    """Confusion matrix of the model over the chosen images."""
    def one(i):
        rec = records[i]
        img = rec["image"][None].astype(params["conv1_w"].dtype, copy=False)
        logits, _, _ = forward(params, img, train=False)
        pred = np.argmax(logits[0], axis=-1)
        local = ConfusionMatrix.empty(num_classes)
        local.add(rec["label"], pred)
        return local

    total = ConfusionMatrix.empty(num_classes)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for local in pool.map(one, ids):
                total.merge(local)
    else:
        for i in ids:
            total.merge(one(i))
    return total


def class_embeddings(params: dict, records: dict, ids: list[str], num_classes: int,
                     which: str = "r") -> dict[int, np.ndarray]:
    """Mean embedding per class over all labelled pixels of the given images.

    ``which`` selects the embedding: "z" for the encoder output feeding
    the classifier, "r" for the normalized representation-head output.
    Classes with no pixels in the set are omitted.
    """
    if which not in ("z", "r"):
        raise ValueError(f"embedding must be 'z' or 'r', got {which!r}")
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for i in ids:
        rec = records[i]
        img = rec["image"][None].astype(params["conv1_w"].dtype, copy=False)
        _, rep, cache = forward(params, img, train=True)
        emb = (cache["z2"] if which == "z" else rep.data)[0].astype(np.float64)
        label = rec["label"]
        for c in np.unique(label):
            if c == IGNORE:
                continue
            mask = label == c
            c = int(c)
            vec = emb[mask].sum(axis=0)
            if c in sums:
                sums[c] += vec
                counts[c] += int(mask.sum())
            else:
                sums[c] = vec
                counts[c] = int(mask.sum())
    return {c: sums[c] / counts[c] for c in sorted(sums)}


# ---------------------------------------------------------------------------
# Agglomerative average-linkage dendrogram over cosine distances.
# ---------------------------------------------------------------------------

@dataclass
class DendrogramNode:
    """Leaf (class_id set, height 0) or merge of two children at a height."""

    class_id: int | None = None
    left: "DendrogramNode | None" = None
    right: "DendrogramNode | None" = None
    height: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.class_id is not None

    def leaves(self) -> list[int]:
        if self.is_leaf:
            return [self.class_id]
        return self.left.leaves() + self.right.leaves()

    def to_json(self) -> dict:
        if self.is_leaf:
            return {"class": self.class_id}
        return {"height": self.height,
                "left": self.left.to_json(), "right": self.right.to_json()}

    def to_newick(self) -> str:
        return self._newick_inner(parent_height=self.height) + ";"

    def _newick_inner(self, parent_height: float) -> str:
        if self.is_leaf:
            return f"{self.class_id}:{parent_height - 0.0:.6g}"
        branch = parent_height - self.height
        left = self.left._newick_inner(self.height)
        right = self.right._newick_inner(self.height)
        return f"({left},{right}):{branch:.6g}"


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 1.0 - float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def dendrogram(means: dict[int, np.ndarray]) -> DendrogramNode:
    """Agglomerative clustering of class means, average linkage, cosine distance.

    The pair with the smallest average pairwise distance merges first;
    ties break toward the pair whose smallest leaf ids come first.
    Merge heights are non-decreasing from leaves to root.
    """
    ids = sorted(means)
    if len(ids) < 2:
        raise DimensionMismatchError("dendrogram needs at least two class means")
    vecs = {c: np.asarray(means[c], dtype=np.float64) for c in ids}
    base = {(a, b): cosine_distance(vecs[a], vecs[b])
            for k, a in enumerate(ids) for b in ids[k + 1:]}

    def leaf_dist(a: int, b: int) -> float:
        return base[(a, b)] if (a, b) in base else base[(b, a)]

    clusters: list[tuple[list[int], DendrogramNode]] = [
        ([c], DendrogramNode(class_id=c)) for c in ids]
    while len(clusters) > 1:
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                la, lb = clusters[i][0], clusters[j][0]
                d = sum(leaf_dist(a, b) for a in la for b in lb) / (len(la) * len(lb))
                key = (d, min(la[0], lb[0]), max(la[0], lb[0]))
                if best is None or key < best[0]:
                    best = (key, i, j)
        (d, _, _), i, j = best
        la, node_a = clusters[i]
        lb, node_b = clusters[j]
        merged = (sorted(la + lb), DendrogramNode(left=node_a, right=node_b, height=d))
        clusters = [c for k, c in enumerate(clusters) if k not in (i, j)]
        clusters.append(merged)
        clusters.sort(key=lambda c: c[0][0])
    return clusters[0][1]


# ---------------------------------------------------------------------------
# File exports.
# ---------------------------------------------------------------------------

def export_relation_csv(g: np.ndarray, path: str) -> None:
    with open(path, "w") as fh:
        for row in g:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def export_relation_dot(g: np.ndarray, active: list[int], path: str) -> None:
    lines = ["graph class_relations {"]
    for c in active:
        lines.append(f"  c{c} [label=\"class {c}\"];")
    for i, p in enumerate(active):
        for q in active[i + 1:]:
            lines.append(f"  c{p} -- c{q} [weight={g[p, q]:.6f}, label=\"{g[p, q]:.4f}\"];")
    lines.append("}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def export_dendrogram(node: DendrogramNode, newick_path: str, json_path: str) -> None:
    with open(newick_path, "w") as fh:
        fh.write(node.to_newick() + "\n")
    with open(json_path, "w") as fh:
        json.dump(node.to_json(), fh, sort_keys=True, indent=1)


def export_iou_csv(iou: np.ndarray, mean: float, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("class,iou\n")
        for c, v in enumerate(iou):
            fh.write(f"{c},{'' if np.isnan(v) else repr(float(v))}\n")
        fh.write(f"mean,{repr(float(mean))}\n")


def worker_count() -> int:
    """Worker cap from the RECO_LAB_THREADS environment variable (default 1)."""
    try:
        return max(1, int(os.environ.get("RECO_LAB_THREADS", "1")))
    except ValueError:
        return 1
