"""Regional-contrast loss primitives.

Pure numerical definitions: per-pixel embedding normalization, class
mean embeddings, the inter-class relation graph, the softmax
distribution over negative classes, and the contrastive loss itself
with analytic gradients restricted to the queries.  All functions are
pure and safe to call concurrently; loss math runs in float64
regardless of input dtype.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptyClassError,
    EmptyNegativesError,
    SingleClassError,
    ZeroVectorError,
)

# Pixel vectors with a norm below this cannot be normalized meaningfully.
ZERO_NORM = 1e-12


@dataclass
class DenseRepresentation:
    """Per-pixel embedding tensor of shape (B, H, W, m)."""

    data: np.ndarray
    normalized: bool = False

    @property
    def embed_dim(self) -> int:
        return self.data.shape[-1]


@dataclass
class ClassMean:
    """Arithmetic mean of the unit pixel vectors of one class.

    The mean of unit vectors is itself not unit-norm in general and is
    consumed as-is downstream (see LossConfig.renormalize_positive for
    the ablation switch).
    """

    class_id: int
    vector: np.ndarray
    support: int


@dataclass
class QueryBundle:
    """Sampled (or candidate) query vectors of one class.

    ``confidences`` holds the predicted probability of the bundle's own
    class at each query pixel.  ``source_indices`` optionally records
    where each row came from, as (stream, flat pixel) pairs, so a
    training step can scatter query gradients back into the
    representation tensor; it is ignored by the loss itself.
    """

    class_id: int
    queries: np.ndarray
    confidences: np.ndarray
    source_indices: np.ndarray | None = None


@dataclass
class KeyPool:
    """Per-class candidate key vectors, keyed by the class they belong to.

    The negative key set for a query class c is the union of the pools
    of every class except c, so the pool used against c can never
    contain a pixel labelled c.
    """

    pools: dict[int, np.ndarray] = field(default_factory=dict)

    def class_ids(self) -> list[int]:
        return sorted(self.pools)

    def negative_classes(self, c: int) -> list[int]:
        return [p for p in sorted(self.pools) if p != c]


@dataclass
class RelationGraph:
    """Pairwise dot products between class mean embeddings.

    ``g`` is C x C; diagonal entries and rows/columns of inactive
    classes are unused sentinels (zero) and are excluded from every
    softmax taken over the graph.
    """

    g: np.ndarray
    active_classes: tuple[int, ...]

    def negative_classes(self, c: int) -> list[int]:
        return [p for p in self.active_classes if p != c]


@dataclass
class LossConfig:
    """Temperature, per-class sampling budgets, and confidence gates."""

    temperature: float = 0.5
    num_queries: int = 256
    num_keys: int = 512
    strong_threshold: float = 0.97
    weak_threshold: float = 0.7
    # Ablation switch: scale the positive key back to unit norm before use.
    renormalize_positive: bool = False


def normalize_pixels(raw: np.ndarray) -> DenseRepresentation:
    """Scale every pixel vector of a (B, H, W, m) tensor to unit norm.

    Raises ZeroVectorError if any pixel norm falls below 1e-12.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 4 or raw.shape[-1] < 1:
        raise DimensionMismatchError(f"expected a B x H x W x m tensor, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ZeroVectorError("representation tensor contains non-finite entries")
    norms = np.sqrt(np.sum(raw * raw, axis=-1, keepdims=True))
    if np.any(norms < ZERO_NORM):
        raise ZeroVectorError("pixel vector with near-zero norm cannot be normalized")
    return DenseRepresentation(raw / norms, normalized=True)


def class_mean(rep: DenseRepresentation, labels: np.ndarray, c: int) -> ClassMean:
    """Mean of all pixel vectors labelled ``c``; support is their count."""
    labels = np.asarray(labels)
    if labels.shape != rep.data.shape[:-1]:
        raise DimensionMismatchError(
            f"label shape {labels.shape} does not match representation {rep.data.shape[:-1]}")
    mask = labels == c
    count = int(mask.sum())
    if count == 0:
        raise EmptyClassError(f"no pixel labelled {c}")
    vecs = rep.data[mask].astype(np.float64, copy=False)
    return ClassMean(class_id=int(c), vector=vecs.mean(axis=0), support=count)


def relation_graph(means: list[ClassMean], num_classes: int | None = None) -> RelationGraph:
    """Pairwise dot products between class means, symmetric by construction."""
    if len(means) < 2:
        raise SingleClassError("relation graph needs at least two class means")
    ids = [m.class_id for m in means]
    if len(set(ids)) != len(ids):
        raise DimensionMismatchError("duplicate class ids in mean list")
    dims = {m.vector.shape[-1] for m in means}
    if len(dims) != 1:
        raise DimensionMismatchError("class means have inconsistent embedding dimensions")
    size = max(ids) + 1 if num_classes is None else int(num_classes)
    g = np.zeros((size, size), dtype=np.float64)
    for i, a in enumerate(means):
        for b in means[i + 1:]:
            dot = float(np.dot(a.vector, b.vector))
            g[a.class_id, b.class_id] = dot
            g[b.class_id, a.class_id] = dot
    return RelationGraph(g=g, active_classes=tuple(sorted(ids)))


def negative_class_distribution(graph: RelationGraph, c: int) -> np.ndarray:
    """Softmax over the graph row of ``c``, restricted to active classes != c.

    The returned array aligns with ``graph.negative_classes(c)`` (sorted
    ascending).  Raises SingleClassError when c is the only active class.
    """
    if c not in graph.active_classes:
        raise EmptyClassError(f"class {c} is not active in the relation graph")
    negatives = graph.negative_classes(c)
    if not negatives:
        raise SingleClassError(f"class {c} is the only active class")
    row = graph.g[c, negatives].astype(np.float64)
    row = row - row.max()
    w = np.exp(row)
    return w / w.sum()


def reco_loss(
    bundles: list[QueryBundle],
    positives: dict[int, np.ndarray],
    negatives: dict[int, np.ndarray],
    cfg: LossConfig,
) -> tuple[float, list[np.ndarray]]:
    """Contrastive loss over sampled queries with gradients on queries only.

    For each bundle the positive key is the class mean vector and the
    negative keys are the sampled rows for that class.  The loss is the
    mean over bundles of the mean over queries of

        -log  exp(q . k+ / t) / (exp(q . k+ / t) + sum_j exp(q . k-_j / t))

    Positives and negatives are constants by contract: the returned
    gradients cover the query matrices only, one array per bundle,
    aligned with ``bundles``.
    """
    if not bundles:
        return 0.0, []
    tau = float(cfg.temperature)
    total = 0.0
    grads: list[np.ndarray] = []
    n_bundles = len(bundles)
    for bundle in bundles:
        c = bundle.class_id
        q = np.asarray(bundle.queries, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] == 0:
            raise DimensionMismatchError(f"bundle for class {c} must be a non-empty n x m matrix")
        m = q.shape[1]
        if c not in positives:
            raise EmptyClassError(f"no positive key for class {c}")
        pos = np.asarray(positives[c], dtype=np.float64)
        if pos.shape != (m,):
            raise DimensionMismatchError(
                f"positive key for class {c} has shape {pos.shape}, expected ({m},)")
        if c not in negatives or np.asarray(negatives[c]).shape[0] == 0:
            raise EmptyNegativesError(f"no negative keys for class {c}")
        neg = np.asarray(negatives[c], dtype=np.float64)
        if neg.ndim != 2 or neg.shape[1] != m:
            raise DimensionMismatchError(
                f"negative keys for class {c} have shape {neg.shape}, expected (k, {m})")
        if cfg.renormalize_positive:
            pos = pos / np.linalg.norm(pos)

        n_q = q.shape[0]
        scores = np.concatenate([(q @ pos)[:, None], q @ neg.T], axis=1) / tau
        peak = scores.max(axis=1, keepdims=True)
        w = np.exp(scores - peak)
        z = w.sum(axis=1)
        # per-query loss: log Z + peak - s_pos
        per_query = np.log(z) + peak[:, 0] - scores[:, 0]
        total += per_query.mean() / n_bundles

        sigma = w / z[:, None]
        coeff = 1.0 / (tau * n_q * n_bundles)
        grad = coeff * ((sigma[:, 0] - 1.0)[:, None] * pos[None, :] + sigma[:, 1:] @ neg)
        grads.append(grad)
    return float(total), grads
