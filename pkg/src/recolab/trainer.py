"""Supervised and semi-supervised training steps and the driving loop.

A step owns the full recipe: cross-entropy on ground-truth labels,
pseudo-label cross-entropy weighted by the batch confidence fraction,
and the regional-contrast term over sampled queries/keys, followed by
one SGD update and (in semi-supervised mode) the teacher EMA update,
in that order, so the teacher always lags the student.

All randomness comes from per-iteration Philox streams derived from the
run seed, which makes every step replayable and resumable.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .core import ClassMean, LossConfig, negative_class_distribution, reco_loss, relation_graph
from .data import IGNORE, apply_mask_mix, classmix_mask, random_patch_mask
from .errors import AllIgnoredError, ConfigError
from .model import (ModelConfig, OptimConfig, TeacherState, backward, clone_params,
                    confidence_and_pseudo, forward, ema_update, init_params,
                    sgd_step, softmax_probs, zeros_like_params)
from .sampling import (PixelCandidateSet, SamplerConfig, gate_pseudo_pixels,
                       key_pool_from_candidates, labelled_candidates,
                       sample_negative_keys, sample_queries)

AUGMENTATIONS = ("none", "cutout", "cutmix", "classmix")


@dataclass
class LossBreakdown:
    supervised: float
    unsupervised: float
    reco: float
    eta: float
    total: float


@dataclass
class TrainConfig:
    mode: str = "semi_supervised"            # or "supervised"
    augmentation: str = "classmix"
    reco: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(num_classes=4, rep_dim=32))
    ema_decay: float = 0.99
    labelled_batch: int = 2
    unlabelled_batch: int = 2
    hflip: bool = True
    crop: int | None = None
    checkpoint_every: int = 500
    seed: int = 0

    def validate(self):
        if self.mode not in ("supervised", "semi_supervised"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"unknown augmentation {self.augmentation!r}")
        if self.mode == "semi_supervised" and self.unlabelled_batch < 1:
            raise ConfigError("semi_supervised mode requires unlabelled_batch >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")


@dataclass
class TrainerState:
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    teacher: TeacherState | None
    iteration: int = 0


def init_state(cfg: TrainConfig) -> TrainerState:
    """Fresh student (seeded init), zero momentum, teacher = student copy."""
    params = init_params(cfg.model, rng_mod.stream(cfg.seed, rng_mod.INIT))
    teacher = None
    if cfg.mode == "semi_supervised":
        teacher = TeacherState(params=clone_params(params), decay=cfg.ema_decay)
    return TrainerState(params=params, velocity=zeros_like_params(params),
                        teacher=teacher, iteration=0)


def compute_eta(confidence: np.ndarray, strong_threshold: float) -> float:
    """Fraction of pixels whose predicted confidence exceeds the strong threshold."""
    conf = np.asarray(confidence)
    return float(np.mean(conf > strong_threshold))


def cross_entropy(logits: np.ndarray, labels: np.ndarray, ignore: int = IGNORE,
                  allow_empty: bool = False) -> tuple[float, np.ndarray]:
    """Pixel-mean cross-entropy over non-ignored pixels, with its logit gradient.

    Raises AllIgnoredError when every pixel is ignored unless
    ``allow_empty`` (the pseudo-label path) is set, in which case the
    loss and gradient are zero.
    """
    logits64 = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    valid = labels != ignore
    n = int(valid.sum())
    if n == 0:
        if allow_empty:
            return 0.0, np.zeros_like(logits64)
        raise AllIgnoredError("every pixel in the batch is ignore-labelled")
    shifted = logits64 - logits64.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    lab = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, lab[..., None], axis=-1)[..., 0]
    loss = -float(picked[valid].sum()) / n

    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, lab[..., None], 1.0, axis=-1)
    dlogits = (probs - onehot) * (valid[..., None] / n)
    return loss, dlogits


def contrastive_term(candidates: PixelCandidateSet, loss_cfg: LossConfig,
                     sampler_cfg: SamplerConfig, rng: np.random.Generator):
    """Sample queries/keys from the candidate set and evaluate the contrast loss.

    Returns (loss, payload) where payload is (bundles, query_grads) for
    gradient scatter, or None when fewer than two candidate classes
    exist (the batch then contributes zero, the skip rule).  Classes are
    visited in sorted order; each class draws its queries first, then
    its negative keys, which pins the stream consumption order.
    """
    classes = candidates.classes()
    if len(classes) < 2:
        return 0.0, None
    means = [ClassMean(class_id=c,
                       vector=candidates.vectors[c].astype(np.float64).mean(axis=0),
                       support=candidates.count(c))
             for c in classes]
    graph = relation_graph(means, num_classes=max(classes) + 1)
    pool = key_pool_from_candidates(candidates)

    bundles, positives, negatives = [], {}, {}
    for mean in means:
        c = mean.class_id
        bundle = sample_queries(candidates, c, sampler_cfg, rng)
        dist = negative_class_distribution(graph, c)
        keys = sample_negative_keys(pool, c, dist, sampler_cfg, rng)
        bundles.append(bundle)
        positives[c] = mean.vector
        negatives[c] = keys

    loss, grads = reco_loss(bundles, positives, negatives, loss_cfg)
    return loss, (bundles, grads)


def _scatter_query_grads(bundles, grads, buffers: dict[int, np.ndarray]) -> None:
    for bundle, grad in zip(bundles, grads):
        idx = bundle.source_indices
        if idx is None:
            continue
        streams = idx[:, 0]
        pix = idx[:, 1]
        for sid, buf in buffers.items():
            rows = streams == sid
            if rows.any():
                np.add.at(buf, pix[rows], grad[rows])


def supervised_step(state: TrainerState, batch: dict, cfg: TrainConfig,
                    reco_rng: np.random.Generator) -> tuple[LossBreakdown, float]:
    """One update from a fully labelled batch: cross-entropy plus contrast term."""
    logits, rep, cache = forward(state.params, batch["images"], train=True)
    loss_sup, dlogits = cross_entropy(logits, batch["labels"])

    loss_reco = 0.0
    drep = None
    if cfg.reco:
        m = rep.embed_dim
        probs = softmax_probs(np.asarray(logits, dtype=np.float64))
        cands = labelled_candidates(rep.data.reshape(-1, m), batch["labels"],
                                    probs.reshape(-1, cfg.model.num_classes), stream_id=0)
        loss_reco, payload = contrastive_term(cands, cfg.loss, cfg.sampler, reco_rng)
        if payload:
            buf = np.zeros((rep.data.size // m, m), dtype=np.float64)
            _scatter_query_grads(*payload, buffers={0: buf})
            drep = buf.reshape(rep.data.shape)

    grads = backward(state.params, cache, dlogits, drep)
    lr = sgd_step(state.params, grads, state.velocity, state.iteration, cfg.optim)
    state.iteration += 1
    return LossBreakdown(supervised=loss_sup, unsupervised=0.0, reco=loss_reco,
                         eta=0.0, total=loss_sup + loss_reco), lr


def augment_unlabelled(kind: str, images: np.ndarray, pseudo: np.ndarray,
                       conf: np.ndarray, rng: np.random.Generator):
    """Apply the configured mixing augmentation to the whole unlabelled batch.

    Pseudo-labels and confidences travel with their pixels; cutmix and
    classmix mix image i with image (i+1) mod B of the same batch.
    """
    if kind == "none":
        return images, pseudo, conf
    bsz, h, w = pseudo.shape
    out_img = images.copy()
    out_lab = pseudo.copy()
    out_conf = conf.copy()
    for i in range(bsz):
        if kind == "cutout":
            mask = random_patch_mask(h, w, rng)
            out_img[i][mask] = images[i].reshape(-1, images.shape[-1]).mean(axis=0)
            out_lab[i][mask] = IGNORE
        else:
            j = (i + 1) % bsz
            if kind == "cutmix":
                mask = random_patch_mask(h, w, rng)
            else:
                mask = classmix_mask(pseudo[j], rng)
            out_img[i] = apply_mask_mix(mask, images[j], images[i])
            out_lab[i] = apply_mask_mix(mask, pseudo[j], pseudo[i])
            out_conf[i] = apply_mask_mix(mask, conf[j], conf[i])
    return out_img, out_lab, out_conf


def semi_supervised_step(state: TrainerState, labelled: dict, unlabelled: dict,
                         cfg: TrainConfig, reco_rng: np.random.Generator,
                         aug_rng: np.random.Generator,
                         eta_override: float | None = None) -> tuple[LossBreakdown, float]:
    """One mean-teacher update from a labelled and an unlabelled batch.

    Teacher pseudo-labels the raw unlabelled images; the student trains
    on the mixed versions with those pseudo-labels, weighted by the
    fraction of confident teacher pixels; the contrast term draws
    candidates from labelled pixels plus gated pseudo pixels.  The SGD
    update runs before the teacher EMA update.
    """
    if state.teacher is None:
        raise ConfigError("semi-supervised step requires an initialized teacher")

    t_logits, _, _ = forward(state.teacher.params, unlabelled["images"], train=False)
    pseudo, conf = confidence_and_pseudo(np.asarray(t_logits, dtype=np.float64))
    eta = compute_eta(conf, cfg.loss.strong_threshold) if eta_override is None else float(eta_override)

    aug_images, aug_pseudo, aug_conf = augment_unlabelled(
        cfg.augmentation, unlabelled["images"], pseudo, conf, aug_rng)
    aug_images = aug_images.astype(state.params["conv1_w"].dtype, copy=False)

    logits_l, rep_l, cache_l = forward(state.params, labelled["images"], train=True)
    logits_u, rep_u, cache_u = forward(state.params, aug_images, train=True)
    loss_sup, dlogits_l = cross_entropy(logits_l, labelled["labels"])
    loss_unsup, dlogits_u = cross_entropy(logits_u, aug_pseudo, allow_empty=True)

    loss_reco = 0.0
    drep_l = drep_u = None
    if cfg.reco:
        m = rep_l.embed_dim
        probs_l = softmax_probs(np.asarray(logits_l, dtype=np.float64))
        cands = labelled_candidates(rep_l.data.reshape(-1, m), labelled["labels"],
                                    probs_l.reshape(-1, cfg.model.num_classes), stream_id=0)
        gate_pseudo_pixels(rep_u.data.reshape(-1, m), aug_pseudo, aug_conf,
                           cfg.loss.weak_threshold, into=cands, stream_id=1)
        loss_reco, payload = contrastive_term(cands, cfg.loss, cfg.sampler, reco_rng)
        if payload:
            buf_l = np.zeros((rep_l.data.size // m, m), dtype=np.float64)
            buf_u = np.zeros((rep_u.data.size // m, m), dtype=np.float64)
            _scatter_query_grads(*payload, buffers={0: buf_l, 1: buf_u})
            if buf_l.any():
                drep_l = buf_l.reshape(rep_l.data.shape)
            if buf_u.any():
                drep_u = buf_u.reshape(rep_u.data.shape)

    grads = backward(state.params, cache_l, dlogits_l, drep_l)
    if eta > 0.0 or drep_u is not None:
        du = eta * dlogits_u if eta > 0.0 else np.zeros_like(dlogits_u)
        grads_u = backward(state.params, cache_u, du, drep_u)
        for k in grads:
            grads[k] += grads_u[k]

    lr = sgd_step(state.params, grads, state.velocity, state.iteration, cfg.optim)
    ema_update(state.teacher, state.params)
    state.iteration += 1
    return LossBreakdown(supervised=loss_sup, unsupervised=loss_unsup, reco=loss_reco,
                         eta=eta, total=loss_sup + eta * loss_unsup + loss_reco), lr


# ---------------------------------------------------------------------------
# Batch assembly and the outer loop.
# ---------------------------------------------------------------------------

def assemble_batch(records: dict, ids: list[str], dtype, flip_rng: np.random.Generator,
                   hflip: bool, crop: int | None, with_labels: bool = True) -> dict:
    """Stack images (and labels) for the given ids with per-sample flip/crop."""
    images, labels = [], []
    for i in ids:
        rec = records[i]
        img = rec["image"]
        lab = rec["label"]
        if crop is not None:
            h, w = lab.shape
            y = int(flip_rng.integers(0, h - crop + 1))
            x = int(flip_rng.integers(0, w - crop + 1))
            img = img[y:y + crop, x:x + crop]
            lab = lab[y:y + crop, x:x + crop]
        if hflip and flip_rng.random() < 0.5:
            img = img[:, ::-1]
            lab = lab[:, ::-1]
        images.append(np.ascontiguousarray(img))
        labels.append(np.ascontiguousarray(lab))
    batch = {"images": np.stack(images).astype(dtype, copy=False)}
    if with_labels:
        batch["labels"] = np.stack(labels)
    return batch


class Trainer:
    """Owns one model/optimizer/teacher and walks the iteration counter.

    ``records`` maps image id to {image, label}; for the sparse-label
    benchmark the labels are already partial.  Batch selection, flips,
    augmentation, and sampling each draw from their own per-iteration
    stream, so two trainers with the same inputs and seed produce
    bit-identical histories, and a resumed run continues exactly.
    """

    def __init__(self, records: dict, labelled_ids: list[str], unlabelled_ids: list[str],
                 cfg: TrainConfig, state: TrainerState | None = None):
        cfg.validate()
        if not labelled_ids:
            raise ConfigError("training requires at least one labelled image")
        if cfg.mode == "semi_supervised" and not unlabelled_ids:
            raise ConfigError("semi-supervised training requires unlabelled images")
        self.records = records
        self.labelled_ids = list(labelled_ids)
        self.unlabelled_ids = list(unlabelled_ids)
        self.cfg = cfg
        self.state = state if state is not None else init_state(cfg)

    def _draw_ids(self, pool: list[str], count: int, rng: np.random.Generator) -> list[str]:
        replace = len(pool) < count
        return [pool[k] for k in rng.choice(len(pool), size=count, replace=replace)]

    def step(self) -> tuple[LossBreakdown, float]:
        cfg = self.cfg
        it = self.state.iteration
        dtype = self.state.params["conv1_w"].dtype
        batch_rng = rng_mod.stream(cfg.seed, rng_mod.BATCH, it)
        flip_rng = rng_mod.stream(cfg.seed, rng_mod.FLIP, it)
        reco_rng = rng_mod.stream(cfg.seed, rng_mod.RECO, it)

        lab_ids = self._draw_ids(self.labelled_ids, cfg.labelled_batch, batch_rng)
        lab = assemble_batch(self.records, lab_ids, dtype, flip_rng, cfg.hflip, cfg.crop)
        if cfg.mode == "supervised":
            return supervised_step(self.state, lab, cfg, reco_rng)
        unlab_ids = self._draw_ids(self.unlabelled_ids, cfg.unlabelled_batch, batch_rng)
        unlab = assemble_batch(self.records, unlab_ids, dtype, flip_rng, cfg.hflip,
                               cfg.crop, with_labels=False)
        aug_rng = rng_mod.stream(cfg.seed, rng_mod.AUG, it)
        return semi_supervised_step(self.state, lab, unlab, cfg, reco_rng, aug_rng)
