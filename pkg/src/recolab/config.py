"""Run configuration: strict JSON loading with early validation.

Unknown keys are rejected with the offending dotted path, numeric
invariants are enforced at load time, and every default mirrors the
reference hyperparameters (temperature 0.5, 256 queries / 512 keys per
class, weak/strong confidence gates 0.7 / 0.97, EMA decay 0.99,
polynomial power 0.9, base lr 2.5e-3, momentum 0.9, weight decay 5e-4);
the embedding width defaults to 256 but is configured down for desk
scale runs.
"""

import json
from dataclasses import dataclass, field

from .core import LossConfig
from .data import PartitionSpec, SynthSpec
from .errors import ConfigError
from .model import ModelConfig, OptimConfig
from .sampling import STRATEGIES, SamplerConfig
from .trainer import TrainConfig


@dataclass
class EvalOptions:
    split: str = "val"
    checkpoint: str | None = None
    dataset: str | None = None
    relate: bool = False
    embedding: str = "r"       # which embedding feeds the relation exports
    model: str = "student"     # evaluate the student or the teacher copy


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    data: SynthSpec = field(default_factory=SynthSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    dataset: str | None = None        # manifest path used by partition/train/eval
    partition_file: str | None = None # partition manifest used by train
    total_iters: int = 1000
    log_every: int = 1


def _take(section: dict, path: str, allowed: dict):
    """Reject keys outside ``allowed`` (name -> validator or None)."""
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{path}{key}'")


def _typed(section: dict, key: str, kinds, path: str, default):
    if key not in section:
        return default
    value = section[key]
    if kinds is bool and not isinstance(value, bool):
        raise ConfigError(f"config key '{path}{key}' must be a boolean")
    if kinds is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"config key '{path}{key}' must be an integer")
    if kinds is float and not isinstance(value, (int, float)):
        raise ConfigError(f"config key '{path}{key}' must be a number")
    if kinds is str and not isinstance(value, str):
        raise ConfigError(f"config key '{path}{key}' must be a string")
    return value


def _parse_data(section: dict) -> SynthSpec:
    path = "data."
    fields = ("height", "width", "num_classes", "shapes_min", "shapes_max",
              "train_count", "val_count", "noise_sigma", "color_jitter", "seed")
    _take(section, path, dict.fromkeys(fields))
    spec = SynthSpec(
        height=_typed(section, "height", int, path, 64),
        width=_typed(section, "width", int, path, 64),
        num_classes=_typed(section, "num_classes", int, path, 4),
        shapes_min=_typed(section, "shapes_min", int, path, 1),
        shapes_max=_typed(section, "shapes_max", int, path, 4),
        train_count=_typed(section, "train_count", int, path, 100),
        val_count=_typed(section, "val_count", int, path, 20),
        noise_sigma=float(_typed(section, "noise_sigma", float, path, 0.08)),
        color_jitter=float(_typed(section, "color_jitter", float, path, 0.08)),
        seed=_typed(section, "seed", int, path, 0),
    )
    spec.validate()
    return spec


def _parse_partition(section: dict) -> PartitionSpec:
    path = "partition."
    fields = ("mode", "min_images_per_class", "min_distinct_classes", "label_budget", "seed")
    _take(section, path, dict.fromkeys(fields))
    budget = section.get("label_budget", "one_pixel")
    if isinstance(budget, str) and budget != "one_pixel":
        raise ConfigError("config key 'partition.label_budget' must be 'one_pixel' or a fraction")
    spec = PartitionSpec(
        mode=_typed(section, "mode", str, path, "partial_dataset_full_labels"),
        min_images_per_class=_typed(section, "min_images_per_class", int, path, 5),
        min_distinct_classes=_typed(section, "min_distinct_classes", int, path, 2),
        label_budget=budget,
        seed=_typed(section, "seed", int, path, 0),
    )
    spec.validate()
    return spec


def _parse_loss(section: dict) -> LossConfig:
    path = "train.loss."
    fields = ("temperature", "num_queries", "num_keys", "strong_threshold",
              "weak_threshold", "renormalize_positive")
    _take(section, path, dict.fromkeys(fields))
    cfg = LossConfig(
        temperature=float(_typed(section, "temperature", float, path, 0.5)),
        num_queries=_typed(section, "num_queries", int, path, 256),
        num_keys=_typed(section, "num_keys", int, path, 512),
        strong_threshold=float(_typed(section, "strong_threshold", float, path, 0.97)),
        weak_threshold=float(_typed(section, "weak_threshold", float, path, 0.7)),
        renormalize_positive=_typed(section, "renormalize_positive", bool, path, False),
    )
    if cfg.temperature <= 0:
        raise ConfigError("config key 'train.loss.temperature' must be positive")
    if cfg.num_queries < 1 or cfg.num_keys < 1:
        raise ConfigError("config keys 'train.loss.num_queries'/'num_keys' must be >= 1")
    if not (0.0 < cfg.weak_threshold <= cfg.strong_threshold < 1.0):
        raise ConfigError(
            "config keys 'train.loss' thresholds must satisfy 0 < weak <= strong < 1")
    return cfg


def _parse_sampler(section: dict, loss: LossConfig, seed: int) -> SamplerConfig:
    path = "train.sampler."
    fields = ("num_queries", "num_keys", "strategy")
    _take(section, path, dict.fromkeys(fields))
    strategy = _typed(section, "strategy", str, path, "active")
    if strategy not in STRATEGIES:
        raise ConfigError(f"config key 'train.sampler.strategy' must be one of {STRATEGIES}")
    return SamplerConfig(
        num_queries=_typed(section, "num_queries", int, path, loss.num_queries),
        num_keys=_typed(section, "num_keys", int, path, loss.num_keys),
        strong_threshold=loss.strong_threshold,
        weak_threshold=loss.weak_threshold,
        rng_seed=seed,
        strategy=strategy,
    )


def _parse_optim(section: dict, total_iters: int) -> OptimConfig:
    path = "train.optim."
    fields = ("base_lr", "momentum", "weight_decay", "power")
    _take(section, path, dict.fromkeys(fields))
    cfg = OptimConfig(
        base_lr=float(_typed(section, "base_lr", float, path, 2.5e-3)),
        momentum=float(_typed(section, "momentum", float, path, 0.9)),
        weight_decay=float(_typed(section, "weight_decay", float, path, 5e-4)),
        power=float(_typed(section, "power", float, path, 0.9)),
        total_iters=total_iters,
    )
    if cfg.base_lr <= 0:
        raise ConfigError("config key 'train.optim.base_lr' must be positive")
    if cfg.power <= 0:
        raise ConfigError("config key 'train.optim.power' must be positive")
    return cfg


def _parse_train(section: dict, num_classes: int, seed: int, total_iters: int) -> TrainConfig:
    path = "train."
    fields = ("mode", "augmentation", "reco", "loss", "sampler", "optim",
              "rep_dim", "dtype", "ema_decay", "labelled_batch", "unlabelled_batch",
              "hflip", "crop", "checkpoint_every")
    _take(section, path, dict.fromkeys(fields))
    loss = _parse_loss(section.get("loss", {}))
    sampler = _parse_sampler(section.get("sampler", {}), loss, seed)
    optim = _parse_optim(section.get("optim", {}), total_iters)
    dtype = _typed(section, "dtype", str, path, "float64")
    if dtype not in ("float32", "float64"):
        raise ConfigError("config key 'train.dtype' must be 'float32' or 'float64'")
    crop = section.get("crop")
    if crop is not None and (isinstance(crop, bool) or not isinstance(crop, int) or crop < 8):
        raise ConfigError("config key 'train.crop' must be null or an integer >= 8")
    cfg = TrainConfig(
        mode=_typed(section, "mode", str, path, "semi_supervised"),
        augmentation=_typed(section, "augmentation", str, path, "classmix"),
        reco=_typed(section, "reco", bool, path, True),
        loss=loss,
        sampler=sampler,
        optim=optim,
        model=ModelConfig(num_classes=num_classes,
                          rep_dim=_typed(section, "rep_dim", int, path, 256),
                          dtype=dtype),
        ema_decay=float(_typed(section, "ema_decay", float, path, 0.99)),
        labelled_batch=_typed(section, "labelled_batch", int, path, 2),
        unlabelled_batch=_typed(section, "unlabelled_batch", int, path, 2),
        hflip=_typed(section, "hflip", bool, path, True),
        crop=crop,
        checkpoint_every=_typed(section, "checkpoint_every", int, path, 500),
        seed=seed,
    )
    cfg.validate()
    return cfg


def _parse_eval(section: dict) -> EvalOptions:
    path = "eval."
    fields = ("split", "checkpoint", "dataset", "relate", "embedding", "model")
    _take(section, path, dict.fromkeys(fields))
    opts = EvalOptions(
        split=_typed(section, "split", str, path, "val"),
        checkpoint=section.get("checkpoint"),
        dataset=section.get("dataset"),
        relate=_typed(section, "relate", bool, path, False),
        embedding=_typed(section, "embedding", str, path, "r"),
        model=_typed(section, "model", str, path, "student"),
    )
    if opts.split not in ("train", "val"):
        raise ConfigError("config key 'eval.split' must be 'train' or 'val'")
    if opts.embedding not in ("z", "r"):
        raise ConfigError("config key 'eval.embedding' must be 'z' or 'r'")
    if opts.model not in ("student", "teacher"):
        raise ConfigError("config key 'eval.model' must be 'student' or 'teacher'")
    return opts


def load_run_config(path: str, seed_override: int | None = None,
                    out_override: str | None = None) -> RunConfig:
    """Parse and validate a run configuration file."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    top = ("seed", "out_dir", "data", "partition", "train", "eval",
           "dataset", "partition_file", "total_iters", "log_every")
    _take(raw, "", dict.fromkeys(top))

    seed = _typed(raw, "seed", int, "", 0)
    if seed_override is not None:
        seed = seed_override
    total_iters = _typed(raw, "total_iters", int, "", 1000)
    if total_iters < 1:
        raise ConfigError("config key 'total_iters' must be >= 1")
    data = _parse_data(raw.get("data", {}))
    cfg = RunConfig(
        seed=seed,
        out_dir=out_override or _typed(raw, "out_dir", str, "", "run"),
        data=data,
        partition=_parse_partition(raw.get("partition", {})),
        train=_parse_train(raw.get("train", {}), data.num_classes, seed, total_iters),
        eval=_parse_eval(raw.get("eval", {})),
        dataset=raw.get("dataset"),
        partition_file=raw.get("partition_file"),
        total_iters=total_iters,
        log_every=_typed(raw, "log_every", int, "", 1),
    )
    return cfg
