"""Active selection of hard queries and relation-weighted negative keys.

All sampling is a pure function of (inputs, rng stream); concurrent
callers must pass disjoint streams.  Query/key budgets are per class.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import KeyPool, QueryBundle
from .errors import DimensionMismatchError, EmptyClassError, EmptyPoolError

# The default plus the three ablation variants of query/key selection.
STRATEGIES = (
    "active",
    "random_query_random_key",
    "active_query_random_key",
    "easy_query_active_key",
)

LABELLED = 0
PSEUDO = 1


@dataclass
class SamplerConfig:
    num_queries: int = 256
    num_keys: int = 512
    strong_threshold: float = 0.97
    weak_threshold: float = 0.7
    rng_seed: int = 0
    strategy: str = "active"


@dataclass
class PixelCandidateSet:
    """Per-class candidate pixels for contrastive sampling.

    Each class maps to parallel arrays: embedding row, confidence of the
    class at that pixel, source flag (LABELLED or PSEUDO), and an
    (stream, flat pixel) index pair for gradient scatter.  Pseudo-source
    entries are admitted only above the weak confidence gate, labelled
    entries bypass it.
    """

    vectors: dict[int, np.ndarray] = field(default_factory=dict)
    confidences: dict[int, np.ndarray] = field(default_factory=dict)
    sources: dict[int, np.ndarray] = field(default_factory=dict)
    indices: dict[int, np.ndarray] = field(default_factory=dict)

    def add(self, c: int, vectors: np.ndarray, confidences: np.ndarray,
            source: int, indices: np.ndarray | None = None) -> None:
        if vectors.shape[0] == 0:
            return
        c = int(c)
        if indices is None:
            indices = np.full((vectors.shape[0], 2), -1, dtype=np.int64)
        flags = np.full(vectors.shape[0], source, dtype=np.int8)
        if c in self.vectors:
            self.vectors[c] = np.concatenate([self.vectors[c], vectors])
            self.confidences[c] = np.concatenate([self.confidences[c], confidences])
            self.sources[c] = np.concatenate([self.sources[c], flags])
            self.indices[c] = np.concatenate([self.indices[c], indices])
        else:
            self.vectors[c] = vectors
            self.confidences[c] = confidences
            self.sources[c] = flags
            self.indices[c] = indices

    def classes(self) -> list[int]:
        return sorted(c for c, v in self.vectors.items() if v.shape[0] > 0)

    def count(self, c: int) -> int:
        return self.vectors[c].shape[0] if c in self.vectors else 0


def split_easy_hard(bundle: QueryBundle, strong_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Partition bundle indices into easy (conf > threshold) and hard (conf <= threshold)."""
    conf = np.asarray(bundle.confidences)
    idx = np.arange(conf.shape[0])
    easy = conf > strong_threshold
    return idx[easy], idx[~easy]


def _draw(pool: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k uniform indices from pool without replacement (k <= len(pool))."""
    if k == 0:
        return np.empty(0, dtype=np.int64)
    return rng.choice(pool, size=k, replace=False)


def sample_queries(candidates: PixelCandidateSet, c: int, cfg: SamplerConfig,
                   rng: np.random.Generator) -> QueryBundle:
    """Select up to ``num_queries`` candidate pixels of class c as queries.

    The active strategies draw uniformly from the hard (confidence <=
    strong threshold) set first and top up from the easy set once hard
    candidates run out; the easy-query variant mirrors that with the
    sets swapped; the random variants ignore confidence entirely.
    """
    if candidates.count(c) == 0:
        raise EmptyClassError(f"no candidate pixels for class {c}")
    vecs = candidates.vectors[c]
    confs = candidates.confidences[c]
    idx_all = np.arange(vecs.shape[0])
    n = min(cfg.num_queries, vecs.shape[0])

    if cfg.strategy in ("active", "active_query_random_key"):
        hard = idx_all[confs <= cfg.strong_threshold]
        easy = idx_all[confs > cfg.strong_threshold]
        first, second = hard, easy
    elif cfg.strategy == "easy_query_active_key":
        easy = idx_all[confs > cfg.strong_threshold]
        hard = idx_all[confs <= cfg.strong_threshold]
        first, second = easy, hard
    elif cfg.strategy == "random_query_random_key":
        first, second = idx_all, np.empty(0, dtype=np.int64)
    else:
        raise ValueError(f"unknown sampling strategy {cfg.strategy!r}")

    if first.shape[0] >= n:
        picked = _draw(first, n, rng)
    else:
        picked = np.concatenate([first, _draw(second, n - first.shape[0], rng)])
    picked = picked.astype(np.int64)
    return QueryBundle(
        class_id=int(c),
        queries=vecs[picked],
        confidences=confs[picked],
        source_indices=candidates.indices[c][picked] if c in candidates.indices else None,
    )


def sample_negative_keys(pool: KeyPool, c: int, dist: np.ndarray, cfg: SamplerConfig,
                         rng: np.random.Generator) -> np.ndarray:
    """Draw ``num_keys`` negative key vectors for query class c.

    ``dist`` aligns with ``pool.negative_classes(c)``.  The per-class
    allocation is multinomial under ``dist`` (classes with an empty pool
    get probability zero, the remainder renormalized) and draws within a
    class are uniform with replacement, so small classes can fill their
    allocation.  Random-key strategies replace the whole scheme with a
    uniform-with-replacement draw over the merged pool.
    """
    neg_classes = pool.negative_classes(c)
    if not neg_classes:
        raise EmptyPoolError(f"key pool has no class other than {c}")
    sizes = np.array([pool.pools[p].shape[0] for p in neg_classes], dtype=np.int64)
    if sizes.sum() == 0:
        raise EmptyPoolError(f"every negative class for {c} is empty")

    if cfg.strategy in ("random_query_random_key", "active_query_random_key"):
        merged = np.concatenate([pool.pools[p] for p in neg_classes if pool.pools[p].shape[0] > 0])
        rows = rng.integers(0, merged.shape[0], size=cfg.num_keys)
        return merged[rows]

    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape[0] != len(neg_classes):
        raise DimensionMismatchError(
            f"distribution length {dist.shape[0]} does not match {len(neg_classes)} negative classes")
    probs = np.where(sizes > 0, dist, 0.0)
    total = probs.sum()
    if total <= 0.0:
        raise EmptyPoolError(f"distribution mass only on empty classes for {c}")
    probs = probs / total
    alloc = rng.multinomial(cfg.num_keys, probs)
    chunks = []
    for p, k in zip(neg_classes, alloc):
        if k == 0:
            continue
        rows = rng.integers(0, pool.pools[p].shape[0], size=k)
        chunks.append(pool.pools[p][rows])
    return np.concatenate(chunks, axis=0)


def gate_pseudo_pixels(rep_pixels: np.ndarray, pseudo_labels: np.ndarray,
                       confidence: np.ndarray, weak_threshold: float,
                       into: PixelCandidateSet | None = None,
                       stream_id: int = -1, ignore: int = 255) -> PixelCandidateSet:
    """Admit pseudo-labelled pixels with confidence strictly above the gate.

    ``rep_pixels`` is the flattened (n_pixels, m) embedding matrix
    aligned with flattened ``pseudo_labels`` and ``confidence``.
    Labelled pixels do not pass through here; they enter the candidate
    set directly (the gate applies to pseudo-labels only).  Pixels whose
    pseudo-label is the ignore value never qualify.
    """
    out = into if into is not None else PixelCandidateSet()
    pseudo_labels = np.asarray(pseudo_labels).reshape(-1)
    confidence = np.asarray(confidence).reshape(-1)
    keep = (confidence > weak_threshold) & (pseudo_labels != ignore)
    flat = np.arange(pseudo_labels.shape[0])
    for c in np.unique(pseudo_labels[keep]):
        sel = keep & (pseudo_labels == c)
        pix = flat[sel]
        idx = np.stack([np.full(pix.shape[0], stream_id, dtype=np.int64), pix], axis=1)
        out.add(int(c), rep_pixels[sel], confidence[sel], PSEUDO, idx)
    return out


def labelled_candidates(rep_pixels: np.ndarray, labels: np.ndarray,
                        class_probs: np.ndarray, ignore: int = 255,
                        into: PixelCandidateSet | None = None,
                        stream_id: int = -1) -> PixelCandidateSet:
    """Admit every ground-truth-labelled pixel, bypassing the confidence gate.

    The stored confidence is the predicted probability of the pixel's
    own label (``class_probs`` is the flattened (n_pixels, C) softmax).
    """
    out = into if into is not None else PixelCandidateSet()
    labels = np.asarray(labels).reshape(-1)
    flat = np.arange(labels.shape[0])
    valid = labels != ignore
    for c in np.unique(labels[valid]):
        sel = labels == c
        pix = flat[sel]
        conf = class_probs[sel, int(c)]
        idx = np.stack([np.full(pix.shape[0], stream_id, dtype=np.int64), pix], axis=1)
        out.add(int(c), rep_pixels[sel], conf, LABELLED, idx)
    return out


def key_pool_from_candidates(candidates: PixelCandidateSet) -> KeyPool:
    """Group candidate vectors by their own class; negatives come from the complement."""
    return KeyPool(pools={c: candidates.vectors[c] for c in candidates.classes()})
