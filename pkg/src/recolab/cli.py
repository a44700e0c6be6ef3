"""Command-line entry point: generate | partition | train | eval.

Every command is a pure function of its config file and input files;
rerunning with identical inputs produces byte-identical outputs (pass
--no-timestamp to also suppress the timestamp header in metrics logs).
Exit codes: 0 success, 1 config error, 2 data error, 3 runtime error.
"""

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import rng as rng_mod
from .config import RunConfig, load_run_config
from .data import (load_dataset, generate_synthetic, partition_pdfl, partition_plfd,
                   save_dataset, IGNORE)
from .errors import ConfigError, DataError, RecoLabError, UnsatisfiableError
from .evaluate import (class_embeddings, dendrogram, evaluate_model, export_dendrogram,
                       export_iou_csv, export_relation_csv, export_relation_dot,
                       mean_iou, worker_count)
from .model import load_checkpoint, save_checkpoint
from .trainer import Trainer, TrainerState
from .core import ClassMean, relation_graph


def _resolve(base_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def cmd_generate(cfg: RunConfig, args) -> int:
    records = generate_synthetic(cfg.data, workers=worker_count())
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = save_dataset(records, cfg.out_dir, cfg.data)
    print(f"wrote {len(records)} images to {manifest}")
    return 0


def _dataset_for(cfg: RunConfig, override: str | None = None):
    path = override or cfg.dataset
    if path is None:
        raise ConfigError("config key 'dataset' is required for this command")
    return load_dataset(_resolve(os.getcwd(), path))


def cmd_partition(cfg: RunConfig, args) -> int:
    ds = _dataset_for(cfg)
    train_ids = sorted(i for i, r in ds["records"].items() if r["split"] == "train")
    rng = rng_mod.stream(cfg.partition.seed, rng_mod.PARTITION)
    os.makedirs(cfg.out_dir, exist_ok=True)
    out = {"format": "recolab-partition-v1", "mode": cfg.partition.mode,
           "dataset": cfg.dataset}
    if cfg.partition.mode == "partial_dataset_full_labels":
        labels = {i: ds["records"][i]["label"] for i in train_ids}
        labelled, unlabelled, audit = partition_pdfl(labels, cfg.partition, rng)
        out.update({"labelled": labelled, "unlabelled": unlabelled, "audit": audit})
    else:
        from PIL import Image
        partial_dir = os.path.join(cfg.out_dir, "partial_labels")
        os.makedirs(partial_dir, exist_ok=True)
        partial_paths, audit = {}, {}
        for i in train_ids:
            partial, info = partition_plfd(ds["records"][i]["label"],
                                           cfg.partition.label_budget, rng)
            rel = f"partial_labels/{i}.png"
            Image.fromarray(partial, mode="L").save(os.path.join(cfg.out_dir, rel))
            partial_paths[i] = rel
            audit[i] = info
        out.update({"labelled": train_ids, "unlabelled": train_ids,
                    "budget": cfg.partition.label_budget,
                    "partial_labels": partial_paths, "audit": audit})
    path = os.path.join(cfg.out_dir, "partition.json")
    with open(path, "w") as fh:
        json.dump(out, fh, sort_keys=True, indent=1)
    print(f"wrote partition to {path}")
    return 0


def _load_partition(cfg: RunConfig, ds) -> tuple[list[str], list[str], dict]:
    """Resolve labelled/unlabelled pools, applying partial labels when present."""
    records = {i: dict(r) for i, r in ds["records"].items()}
    if cfg.partition_file is None:
        # no partition: train supervised on every training image
        train_ids = sorted(i for i, r in records.items() if r["split"] == "train")
        return train_ids, [], records
    path = _resolve(os.getcwd(), cfg.partition_file)
    if not os.path.exists(path):
        raise DataError(f"partition file not found: {path}")
    with open(path) as fh:
        part = json.load(fh)
    if part.get("format") != "recolab-partition-v1":
        raise DataError(f"not a recognized partition file: {path}")
    if "partial_labels" in part:
        from PIL import Image
        base = os.path.dirname(path)
        for i, rel in part["partial_labels"].items():
            arr = np.asarray(Image.open(os.path.join(base, rel)), dtype=np.uint8)
            records[i]["label"] = arr
    return list(part["labelled"]), list(part["unlabelled"]), records


def _metrics_header(fh, no_timestamp: bool) -> None:
    if not no_timestamp:
        fh.write(f"# generated {datetime.datetime.now().isoformat()}\n")
    fh.write("iter,lr,supervised,unsupervised,eta,reco,total\n")


def cmd_train(cfg: RunConfig, args) -> int:
    ds = _dataset_for(cfg)
    if ds["num_classes"] != cfg.train.model.num_classes:
        raise ConfigError(
            f"config key 'data.num_classes' ({cfg.train.model.num_classes}) does not match "
            f"dataset ({ds['num_classes']})")
    labelled, unlabelled, records = _load_partition(cfg, ds)

    state = None
    start_iter = 0
    if args.resume:
        snap = load_checkpoint(args.resume)
        state = TrainerState(params=snap["student"], velocity=snap["velocity"],
                             teacher=snap["teacher"], iteration=snap["iteration"])
        start_iter = snap["iteration"]
    trainer = Trainer(records, labelled, unlabelled, cfg.train, state=state)

    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    mode = "a" if args.resume and os.path.exists(metrics_path) else "w"
    with open(metrics_path, mode) as fh:
        if mode == "w":
            _metrics_header(fh, args.no_timestamp)
        for it in range(start_iter, cfg.total_iters):
            breakdown, lr = trainer.step()
            if it % cfg.log_every == 0 or it == cfg.total_iters - 1:
                fh.write(f"{it},{lr!r},{breakdown.supervised!r},{breakdown.unsupervised!r},"
                         f"{breakdown.eta!r},{breakdown.reco!r},{breakdown.total!r}\n")
            done = trainer.state.iteration
            if done % cfg.train.checkpoint_every == 0 or done == cfg.total_iters:
                name = "ckpt_final.json" if done == cfg.total_iters else f"ckpt_{done:06d}.json"
                save_checkpoint(os.path.join(cfg.out_dir, name),
                                iteration=done, seed=cfg.seed,
                                model_config=cfg.train.model,
                                student=trainer.state.params,
                                velocity=trainer.state.velocity,
                                teacher=trainer.state.teacher)
    print(f"trained {cfg.total_iters - start_iter} iterations; metrics in {metrics_path}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    ds = _dataset_for(cfg, override=cfg.eval.dataset)
    if cfg.eval.checkpoint is None:
        raise ConfigError("config key 'eval.checkpoint' is required for eval")
    snap = load_checkpoint(_resolve(os.getcwd(), cfg.eval.checkpoint))
    if cfg.eval.model == "teacher":
        if snap["teacher"] is None:
            raise ConfigError("checkpoint has no teacher parameters")
        params = snap["teacher"].params
    else:
        params = snap["student"]
    ids = sorted(i for i, r in ds["records"].items() if r["split"] == cfg.eval.split)
    if not ids:
        raise DataError(f"dataset has no images in split '{cfg.eval.split}'")

    cm = evaluate_model(params, ds["records"], ids, ds["num_classes"],
                        workers=worker_count())
    iou, mean = mean_iou(cm)
    os.makedirs(cfg.out_dir, exist_ok=True)
    export_iou_csv(iou, mean, os.path.join(cfg.out_dir, "iou.csv"))
    print(f"mIoU[{cfg.eval.split}] = {mean:.4f}")

    if args.relate or cfg.eval.relate:
        means = class_embeddings(params, ds["records"], ids, ds["num_classes"],
                                 which=cfg.eval.embedding)
        mean_list = [ClassMean(class_id=c, vector=v, support=1) for c, v in means.items()]
        graph = relation_graph(mean_list, num_classes=ds["num_classes"])
        export_relation_csv(graph.g, os.path.join(cfg.out_dir, "relation.csv"))
        export_relation_dot(graph.g, list(graph.active_classes),
                            os.path.join(cfg.out_dir, "relation.dot"))
        tree = dendrogram(means)
        export_dendrogram(tree, os.path.join(cfg.out_dir, "dendrogram.newick"),
                          os.path.join(cfg.out_dir, "dendrogram.json"))
        print(f"relation exports written to {cfg.out_dir}")
    return 0


COMMANDS = {"generate": cmd_generate, "partition": cmd_partition,
            "train": cmd_train, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recolab",
                                     description="regional-contrast segmentation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--no-timestamp", action="store_true",
                       help="suppress timestamp header lines in logs")
        if name == "eval":
            p.add_argument("--relate", action="store_true",
                           help="export relation graph and dendrogram")
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint to continue from")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not hasattr(args, "relate"):
        args.relate = False
    if not hasattr(args, "resume"):
        args.resume = None
    try:
        cfg = load_run_config(args.config, seed_override=args.seed, out_override=args.out)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, UnsatisfiableError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except RecoLabError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
