"""Synthetic shape data, benchmark partition builders, and mixing augmentations.

Images are float arrays in [0, 1] with NHWC layout; label maps are
uint8 with 255 reserved for unlabelled/ignored pixels.  Every generator
takes explicit RNG streams and is reproducible per seed; per-image
streams make generation embarrassingly parallel.
"""

import json
import os
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

from . import rng as rng_mod
from .errors import ConfigError, DataError, UnsatisfiableError

IGNORE = 255

# One shape kind per foreground class, cycling when there are more than
# three foreground classes.
SHAPE_KINDS = ("rectangle", "circle", "triangle")


@dataclass
class SynthSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 4            # background + (num_classes - 1) shape classes
    shapes_min: int = 1
    shapes_max: int = 4
    train_count: int = 100
    val_count: int = 20
    noise_sigma: float = 0.08
    color_jitter: float = 0.08
    seed: int = 0

    def validate(self):
        if self.num_classes < 3:
            raise ConfigError("num_classes must be >= 3")
        if not (0 <= self.shapes_min <= self.shapes_max):
            raise ConfigError("invalid shapes_min/shapes_max range")
        if self.height < 8 or self.width < 8:
            raise ConfigError("image size must be at least 8x8")


@dataclass
class PartitionSpec:
    mode: str = "partial_dataset_full_labels"   # or "partial_labels_full_dataset"
    min_images_per_class: int = 5
    min_distinct_classes: int = 2
    label_budget: object = "one_pixel"          # "one_pixel" or fraction in (0, 1]
    seed: int = 0

    def validate(self):
        if self.mode not in ("partial_dataset_full_labels", "partial_labels_full_dataset"):
            raise ConfigError(f"unknown partition mode {self.mode!r}")
        if self.mode == "partial_dataset_full_labels":
            if self.min_images_per_class < 1:
                raise ConfigError("min_images_per_class must be >= 1")
            if self.min_distinct_classes < 1:
                raise ConfigError("min_distinct_classes must be >= 1")
        else:
            b = self.label_budget
            if b != "one_pixel" and not (isinstance(b, (int, float)) and 0 < float(b) <= 1):
                raise ConfigError("label_budget must be 'one_pixel' or a fraction in (0, 1]")


def class_palette(num_classes: int) -> np.ndarray:
    """Fixed, well-separated base color per class (class 0 = background gray)."""
    colors = [np.array([0.25, 0.25, 0.25])]
    for c in range(1, num_classes):
        hue = ((c - 1) * 0.61803398875) % 1.0
        colors.append(_hsv_to_rgb(hue, 0.75, 0.85))
    return np.stack(colors)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def _shape_mask(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of one randomly placed, non-degenerate shape."""
    yy, xx = np.mgrid[0:h, 0:w]
    scale = rng.uniform(0.15, 0.45) * min(h, w)
    cy, cx = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
    if kind == "rectangle":
        hh = max(2.0, scale * rng.uniform(0.5, 1.0))
        ww = max(2.0, scale * rng.uniform(0.5, 1.0))
        return (np.abs(yy - cy) <= hh / 2) & (np.abs(xx - cx) <= ww / 2)
    if kind == "circle":
        r = max(2.0, scale / 2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    # triangle: three vertices around the center, re-drawn until non-degenerate
    for _ in range(32):
        ang = rng.uniform(0, 2 * np.pi, size=3)
        rad = rng.uniform(0.4, 1.0, size=3) * scale
        vy, vx = cy + rad * np.sin(ang), cx + rad * np.cos(ang)
        area = 0.5 * abs((vx[1] - vx[0]) * (vy[2] - vy[0]) - (vx[2] - vx[0]) * (vy[1] - vy[0]))
        if area >= 8.0:
            break
    d0 = (xx - vx[0]) * (vy[1] - vy[0]) - (yy - vy[0]) * (vx[1] - vx[0])
    d1 = (xx - vx[1]) * (vy[2] - vy[1]) - (yy - vy[1]) * (vx[2] - vx[1])
    d2 = (xx - vx[2]) * (vy[0] - vy[2]) - (yy - vy[2]) * (vx[0] - vx[2])
    return ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))


def _render_image(spec: SynthSpec, palette: np.ndarray, rng: np.random.Generator):
    h, w = spec.height, spec.width
    jitter = spec.color_jitter
    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = np.clip(palette[0] + rng.uniform(-jitter, jitter, size=3), 0, 1)
    label = np.zeros((h, w), dtype=np.uint8)
    n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    drawn = []
    for _ in range(n_shapes):
        c = int(rng.integers(1, spec.num_classes))
        kind = SHAPE_KINDS[(c - 1) % len(SHAPE_KINDS)]
        mask = _shape_mask(kind, h, w, rng)
        color = np.clip(palette[c] + rng.uniform(-jitter, jitter, size=3), 0, 1)
        image[mask] = color
        label[mask] = c           # later shapes sit on top
        drawn.append(c)
    image += rng.normal(0.0, spec.noise_sigma, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return image, label, drawn


def generate_synthetic(spec: SynthSpec, workers: int = 1) -> list[dict]:
    """Render the full dataset: uniform background, stacked random shapes,
    additive pixel noise; the label is the topmost shape at each pixel.

    Returns records {id, split, image, label, drawn_classes}; per-image
    Philox streams keep the output identical for any worker count.
    """
    spec.validate()
    palette = class_palette(spec.num_classes)
    splits = ["train"] * spec.train_count + ["val"] * spec.val_count

    def render(i):
        r = rng_mod.stream(spec.seed, rng_mod.GENERATE, i)
        image, label, drawn = _render_image(spec, palette, r)
        return {"id": f"img_{i:05d}", "split": splits[i],
                "image": image, "label": label, "drawn_classes": drawn}

    indices = range(len(splits))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(render, indices))
    return [render(i) for i in indices]


# ---------------------------------------------------------------------------
# Partition mode 1: few fully-labelled images.
# ---------------------------------------------------------------------------

def partition_pdfl(labels_by_id: dict[str, np.ndarray], spec: PartitionSpec,
                   rng: np.random.Generator):
    """Greedily pick labelled images until every class is covered enough.

    Each selected image must (i) contain at least ``min_distinct_classes``
    distinct classes and (ii) contain one of the classes with the
    currently lowest coverage count.  Selection stops once every class
    appears in at least ``min_images_per_class`` selected images.

    Returns (labelled_ids, unlabelled_ids, audit_steps).
    """
    ids = sorted(labels_by_id)
    class_sets = {i: set(int(v) for v in np.unique(labels_by_id[i]) if v != IGNORE)
                  for i in ids}
    all_classes = sorted(set().union(*class_sets.values())) if ids else []
    if not all_classes:
        raise UnsatisfiableError("dataset has no labelled pixels")

    coverage = {c: 0 for c in all_classes}
    remaining = set(ids)
    labelled: list[str] = []
    audit: list[dict] = []
    while min(coverage.values()) < spec.min_images_per_class:
        floor = min(coverage.values())
        rare = {c for c, n in coverage.items() if n == floor}
        eligible = sorted(
            i for i in remaining
            if len(class_sets[i]) >= spec.min_distinct_classes and class_sets[i] & rare)
        if not eligible:
            raise UnsatisfiableError(
                f"no remaining image has >= {spec.min_distinct_classes} distinct classes "
                f"and one of the least-covered classes {sorted(rare)}")
        chosen = eligible[int(rng.integers(len(eligible)))]
        remaining.discard(chosen)
        labelled.append(chosen)
        for c in class_sets[chosen]:
            coverage[c] += 1
        audit.append({
            "step": len(labelled),
            "chosen": chosen,
            "min_coverage_before": floor,
            "least_covered_before": sorted(rare),
            "classes_in_image": sorted(class_sets[chosen]),
            "coverage_after": {str(c): coverage[c] for c in all_classes},
        })
    unlabelled = [i for i in ids if i not in set(labelled)]
    return labelled, unlabelled, audit


# ---------------------------------------------------------------------------
# Partition mode 2: every image sparsely labelled by seeded dilation.
# ---------------------------------------------------------------------------

def dilate5(mask: np.ndarray) -> np.ndarray:
    """Binary dilation with a 5x5 square structuring element."""
    h, w = mask.shape
    padded = np.zeros((h + 4, w + 4), dtype=bool)
    padded[2:-2, 2:-2] = mask
    out = np.zeros_like(mask)
    for dy in range(5):
        for dx in range(5):
            out |= padded[dy:dy + h, dx:dx + w]
    return out


def partition_plfd(label: np.ndarray, budget, rng: np.random.Generator):
    """Reveal a sparse portion of one full label map.

    For every class present: seed one uniformly random pixel of that
    class; with a fractional budget, repeatedly dilate the revealed
    region with a 5x5 kernel intersected with the class's true region,
    stopping at the first iteration where the revealed fraction reaches
    the budget (or the reachable component saturates).  With the
    'one_pixel' budget only the seeds are revealed.  All other pixels
    become the ignore value.

    Returns (partial_label, audit) where audit records seed and
    iteration counts per class.
    """
    label = np.asarray(label)
    partial = np.full_like(label, IGNORE)
    audit = {}
    for c in sorted(int(v) for v in np.unique(label) if v != IGNORE):
        region = label == c
        total = int(region.sum())
        ys, xs = np.nonzero(region)
        pick = int(rng.integers(total))
        revealed = np.zeros_like(region)
        revealed[ys[pick], xs[pick]] = True
        iters = 0
        if budget != "one_pixel":
            f = float(budget)
            while revealed.sum() / total < f:
                grown = dilate5(revealed) & region
                iters += 1
                if grown.sum() == revealed.sum():
                    break                      # seed component saturated
                revealed = grown
        partial[revealed] = c
        audit[str(c)] = {"seed_pixel": [int(ys[pick]), int(xs[pick])],
                         "dilations": iters,
                         "revealed": int(revealed.sum()),
                         "class_pixels": total}
    return partial, audit


# ---------------------------------------------------------------------------
# Mixing augmentations.  Mask helpers are exposed so a trainer can apply
# the identical mix to extra per-pixel payloads (confidence maps).
# ---------------------------------------------------------------------------

def random_patch_mask(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Axis-aligned rectangle covering a uniform [0.25, 0.5] fraction of the area."""
    area = rng.uniform(0.25, 0.5) * h * w
    aspect = rng.uniform(0.5, 2.0)
    ph = min(h, max(1, int(round(np.sqrt(area * aspect)))))
    pw = min(w, max(1, int(round(np.sqrt(area / aspect)))))
    y = int(rng.integers(0, h - ph + 1))
    x = int(rng.integers(0, w - pw + 1))
    mask = np.zeros((h, w), dtype=bool)
    mask[y:y + ph, x:x + pw] = True
    return mask


def classmix_mask(label_a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mask of ceil(k/2) classes drawn uniformly from the k classes present in A."""
    present = np.array(sorted(int(v) for v in np.unique(label_a) if v != IGNORE))
    if present.size == 0:
        raise DataError("classmix source has no labelled classes")
    k = present.size
    chosen = rng.choice(present, size=(k + 1) // 2, replace=False)
    return np.isin(label_a, chosen)


def apply_mask_mix(mask: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Output takes A where mask holds and B elsewhere (works for any trailing dims)."""
    m = mask
    while m.ndim < a.ndim:
        m = m[..., None]
    return np.where(m, a, b)


def cutout(image: np.ndarray, label: np.ndarray, rng: np.random.Generator):
    """Blank a random patch: image pixels go to the image mean color, labels to ignore."""
    mask = random_patch_mask(label.shape[0], label.shape[1], rng)
    out_img = image.copy()
    out_img[mask] = image.reshape(-1, image.shape[-1]).mean(axis=0)
    out_lab = label.copy()
    out_lab[mask] = IGNORE
    return out_img, out_lab


def cutmix(image_a: np.ndarray, label_a: np.ndarray,
           image_b: np.ndarray, label_b: np.ndarray, rng: np.random.Generator):
    """Paste a random patch of A onto B (image and label move together)."""
    mask = random_patch_mask(label_a.shape[0], label_a.shape[1], rng)
    return apply_mask_mix(mask, image_a, image_b), apply_mask_mix(mask, label_a, label_b)


def classmix(image_a: np.ndarray, label_a: np.ndarray,
             image_b: np.ndarray, label_b: np.ndarray, rng: np.random.Generator):
    """Paste half of A's classes (rounded up) onto B, image and label jointly."""
    mask = classmix_mask(label_a, rng)
    return apply_mask_mix(mask, image_a, image_b), apply_mask_mix(mask, label_a, label_b)


# ---------------------------------------------------------------------------
# On-disk dataset format: images as RGB PNG, labels as 8-bit grayscale
# PNG (class index per pixel, 255 = unlabelled), plus a JSON manifest
# listing every item with its split.
# ---------------------------------------------------------------------------

def save_dataset(records: list[dict], out_dir: str, spec: SynthSpec) -> str:
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    items = []
    for rec in records:
        img8 = np.round(rec["image"] * 255.0).astype(np.uint8)
        image_rel = f"images/{rec['id']}.png"
        label_rel = f"labels/{rec['id']}.png"
        Image.fromarray(img8, mode="RGB").save(os.path.join(out_dir, image_rel))
        Image.fromarray(rec["label"], mode="L").save(os.path.join(out_dir, label_rel))
        items.append({"id": rec["id"], "split": rec["split"],
                      "image": image_rel, "label": label_rel,
                      "drawn_classes": rec["drawn_classes"]})
    manifest = {
        "format": "recolab-dataset-v1",
        "num_classes": spec.num_classes,
        "image_size": [spec.height, spec.width],
        "seed": spec.seed,
        "items": items,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return path


def load_dataset(manifest_path: str) -> dict:
    """Load a dataset directory back into memory (images as float64 in [0, 1])."""
    if not os.path.exists(manifest_path):
        raise DataError(f"dataset manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "recolab-dataset-v1":
        raise DataError(f"not a recognized dataset manifest: {manifest_path}")
    root = os.path.dirname(manifest_path)
    records = {}
    for item in manifest["items"]:
        image = np.asarray(Image.open(os.path.join(root, item["image"])), dtype=np.float64) / 255.0
        label = np.asarray(Image.open(os.path.join(root, item["label"])), dtype=np.uint8)
        records[item["id"]] = {"id": item["id"], "split": item["split"],
                               "image": image, "label": label}
    return {"manifest": manifest, "records": records,
            "num_classes": manifest["num_classes"]}
