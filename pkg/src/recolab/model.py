"""Small segmentation network with hand-written forward/backward passes.

Two 3x3 stride-1 convolutions (3 -> 16 -> 32 channels, ReLU after each)
form the encoder; a 1x1 classifier head maps to C logits and a parallel
1x1 representation head maps to an m-dimensional embedding that is
normalized per pixel.  Resolution is preserved end to end, so logits
and embeddings align with input pixels without upsampling.  Everything
uses NHWC layout.

Gradients are computed analytically (no autodiff) so they can be
checked against finite differences; the representation head is skipped
entirely in eval mode and the logits path is bit-identical either way.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .core import DenseRepresentation, ZERO_NORM
from .errors import ShapeMismatchError, ZeroVectorError

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
               "cls_w", "cls_b", "rep_w", "rep_b")


@dataclass
class ModelConfig:
    num_classes: int
    rep_dim: int
    channels: tuple[int, int] = (16, 32)
    dtype: str = "float64"

    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class OptimConfig:
    base_lr: float = 2.5e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    total_iters: int = 1000


@dataclass
class TeacherState:
    """EMA copy of the student parameters; never updated by gradients."""

    params: dict[str, np.ndarray]
    decay: float = 0.99


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    c1, c2 = cfg.channels
    dt = cfg.np_dtype()

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dt)

    return {
        "conv1_w": uniform((3, 3, 3, c1), 3 * 3 * 3),
        "conv1_b": np.zeros(c1, dtype=dt),
        "conv2_w": uniform((3, 3, c1, c2), 3 * 3 * c1),
        "conv2_b": np.zeros(c2, dtype=dt),
        "cls_w": uniform((c2, cfg.num_classes), c2),
        "cls_b": np.zeros(cfg.num_classes, dtype=dt),
        "rep_w": uniform((c2, cfg.rep_dim), c2),
        "rep_b": np.zeros(cfg.rep_dim, dtype=dt),
    }


def clone_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _conv3x3(padded: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 stride-1 convolution on a pre-padded NHWC tensor, as 9 shifted matmuls."""
    bsz, hp, wp, _ = padded.shape
    h, wd = hp - 2, wp - 2
    out = np.tile(b, (bsz, h, wd, 1)).astype(padded.dtype)
    for i in range(3):
        for j in range(3):
            out += padded[:, i:i + h, j:j + wd, :] @ w[i, j]
    return out


def _pad(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))


def forward(params: dict[str, np.ndarray], images: np.ndarray, train: bool = True):
    """Run the network.

    Returns (logits, representation, cache); in eval mode the
    representation head is skipped and both extras are None.  The cache
    holds the intermediates ``backward`` needs.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ShapeMismatchError(f"expected images of shape B x H x W x 3, got {images.shape}")
    if not np.all(np.isfinite(images)):
        raise ShapeMismatchError("image batch contains non-finite values")
    dt = params["conv1_w"].dtype
    x = images.astype(dt, copy=False)

    p1 = _pad(x)
    a1 = _conv3x3(p1, params["conv1_w"], params["conv1_b"])
    z1 = np.maximum(a1, 0.0)
    p2 = _pad(z1)
    a2 = _conv3x3(p2, params["conv2_w"], params["conv2_b"])
    z2 = np.maximum(a2, 0.0)
    logits = z2 @ params["cls_w"] + params["cls_b"]
    if not train:
        return logits, None, None

    r_raw = z2 @ params["rep_w"] + params["rep_b"]
    norms = np.sqrt(np.sum(r_raw * r_raw, axis=-1, keepdims=True))
    if np.any(norms < ZERO_NORM):
        raise ZeroVectorError("representation head produced a zero vector")
    rep = DenseRepresentation(r_raw / norms, normalized=True)
    cache = {"p1": p1, "a1": a1, "p2": p2, "a2": a2, "z2": z2,
             "rep": rep.data, "norms": norms}
    return logits, rep, cache


def backward(params: dict[str, np.ndarray], cache: dict, dlogits: np.ndarray,
             drep: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradients at the two heads.

    ``drep`` is the gradient w.r.t. the *normalized* representation; the
    per-pixel normalization Jacobian is applied here.  Input-image
    gradients are not needed and not computed.
    """
    z2 = cache["z2"]
    bsz, h, w, c2 = z2.shape
    grads: dict[str, np.ndarray] = {}

    dlogits = np.asarray(dlogits).astype(z2.dtype, copy=False)
    if drep is not None:
        drep = np.asarray(drep).astype(z2.dtype, copy=False)
    z2_flat = z2.reshape(-1, c2)
    dlog_flat = dlogits.reshape(-1, dlogits.shape[-1])
    grads["cls_w"] = z2_flat.T @ dlog_flat
    grads["cls_b"] = dlog_flat.sum(axis=0)
    dz2 = dlog_flat @ params["cls_w"].T

    if drep is not None:
        rep, norms = cache["rep"], cache["norms"]
        inner = np.sum(rep * drep, axis=-1, keepdims=True)
        dr_raw = (drep - rep * inner) / norms
        dr_flat = dr_raw.reshape(-1, dr_raw.shape[-1])
        grads["rep_w"] = z2_flat.T @ dr_flat
        grads["rep_b"] = dr_flat.sum(axis=0)
        dz2 += dr_flat @ params["rep_w"].T
    else:
        grads["rep_w"] = np.zeros_like(params["rep_w"])
        grads["rep_b"] = np.zeros_like(params["rep_b"])
    dz2 = dz2.reshape(bsz, h, w, c2)

    da2 = dz2 * (cache["a2"] > 0)
    p2 = cache["p2"]
    w2 = params["conv2_w"]
    grads["conv2_w"] = np.empty_like(w2)
    dp2 = np.zeros_like(p2)
    da2_flat = da2.reshape(-1, da2.shape[-1])
    for i in range(3):
        for j in range(3):
            patch = p2[:, i:i + h, j:j + w, :].reshape(-1, w2.shape[2])
            grads["conv2_w"][i, j] = patch.T @ da2_flat
            dp2[:, i:i + h, j:j + w, :] += da2 @ w2[i, j].T
    grads["conv2_b"] = da2_flat.sum(axis=0)

    dz1 = dp2[:, 1:1 + h, 1:1 + w, :]
    da1 = dz1 * (cache["a1"] > 0)
    p1 = cache["p1"]
    w1 = params["conv1_w"]
    grads["conv1_w"] = np.empty_like(w1)
    da1_flat = da1.reshape(-1, da1.shape[-1])
    for i in range(3):
        for j in range(3):
            patch = p1[:, i:i + h, j:j + w, :].reshape(-1, w1.shape[2])
            grads["conv1_w"][i, j] = patch.T @ da1_flat
    grads["conv1_b"] = da1_flat.sum(axis=0)
    return grads


def confidence_and_pseudo(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel argmax label and max softmax probability.

    Ties resolve to the lowest class index (argmax picks the first
    maximum), which keeps pseudo-labels deterministic.
    """
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expo = np.exp(shifted)
    probs = expo / expo.sum(axis=-1, keepdims=True)
    pseudo = np.argmax(probs, axis=-1)
    conf = np.take_along_axis(probs, pseudo[..., None], axis=-1)[..., 0]
    return pseudo, conf


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expo = np.exp(shifted)
    return expo / expo.sum(axis=-1, keepdims=True)


def poly_lr(it: int, cfg: OptimConfig) -> float:
    """Polynomial decay: base_lr * (1 - it/total)^power."""
    return cfg.base_lr * (1.0 - it / cfg.total_iters) ** cfg.power


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             velocity: dict[str, np.ndarray], it: int, cfg: OptimConfig) -> float:
    """Momentum SGD with classic weight decay added to the gradient.

    v <- momentum * v + (g + wd * p);  p <- p - lr(it) * v.
    Mutates ``params`` and ``velocity`` in place and returns the lr used.
    """
    if not 0 <= it < cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters})")
    lr = poly_lr(it, cfg)
    for k, p in params.items():
        g = grads[k] + cfg.weight_decay * p
        velocity[k] = cfg.momentum * velocity[k] + g
        p -= (lr * velocity[k]).astype(p.dtype, copy=False)
    return lr


def ema_update(teacher: TeacherState, student: dict[str, np.ndarray]) -> TeacherState:
    """Elementwise convex combination: t <- decay * t + (1 - decay) * s."""
    lam = teacher.decay
    for k, t in teacher.params.items():
        s = student[k]
        if s.shape != t.shape:
            raise ShapeMismatchError(f"teacher/student shape mismatch on {k}")
        t *= lam
        t += (1.0 - lam) * s
    return teacher


def flatten_params(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[k].reshape(-1) for k in PARAM_NAMES])


def set_flat_entry(params: dict[str, np.ndarray], flat_index: int, value: float) -> None:
    """Write one scalar into the concatenated parameter vector (for gradient checks)."""
    offset = 0
    for k in PARAM_NAMES:
        size = params[k].size
        if flat_index < offset + size:
            params[k].reshape(-1)[flat_index - offset] = value
            return
        offset += size
    raise IndexError(flat_index)


# ---------------------------------------------------------------------------
# Checkpoint container.
#
# A checkpoint is a single JSON document:
#   format          "recolab-checkpoint-v1"
#   iteration       next training iteration to run
#   seed            root seed; with the per-iteration Philox stream scheme
#                   this fully determines all future draws (rng state)
#   model_config    num_classes / rep_dim / channels / dtype
#   student, velocity, teacher (nullable)   name -> {shape, dtype, data}
#   teacher_decay   EMA decay when a teacher is present
# Floats are serialized with repr (shortest round-trip), so reading a
# checkpoint back reproduces every tensor bit-exactly.
# ---------------------------------------------------------------------------

def _encode_tensors(params: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "dtype": str(v.dtype), "data": v.reshape(-1).tolist()}
            for k, v in params.items()}


def _decode_tensors(blob: dict) -> dict[str, np.ndarray]:
    out = {}
    for k, t in blob.items():
        arr = np.array(t["data"], dtype=np.float64).astype(np.dtype(t["dtype"]))
        out[k] = arr.reshape(t["shape"])
    return out


def save_checkpoint(path, *, iteration: int, seed: int, model_config: ModelConfig,
                    student: dict[str, np.ndarray], velocity: dict[str, np.ndarray],
                    teacher: TeacherState | None) -> None:
    doc = {
        "format": "recolab-checkpoint-v1",
        "iteration": int(iteration),
        "seed": int(seed),
        "model_config": {
            "num_classes": model_config.num_classes,
            "rep_dim": model_config.rep_dim,
            "channels": list(model_config.channels),
            "dtype": model_config.dtype,
        },
        "student": _encode_tensors(student),
        "velocity": _encode_tensors(velocity),
        "teacher": _encode_tensors(teacher.params) if teacher is not None else None,
        "teacher_decay": teacher.decay if teacher is not None else None,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "recolab-checkpoint-v1":
        raise ShapeMismatchError(f"not a recognized checkpoint: {path}")
    mc = doc["model_config"]
    cfg = ModelConfig(num_classes=mc["num_classes"], rep_dim=mc["rep_dim"],
                      channels=tuple(mc["channels"]), dtype=mc["dtype"])
    teacher = None
    if doc["teacher"] is not None:
        teacher = TeacherState(params=_decode_tensors(doc["teacher"]),
                               decay=doc["teacher_decay"])
    return {
        "iteration": doc["iteration"],
        "seed": doc["seed"],
        "model_config": cfg,
        "student": _decode_tensors(doc["student"]),
        "velocity": _decode_tensors(doc["velocity"]),
        "teacher": teacher,
    }
