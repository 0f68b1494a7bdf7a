"""Glue from a :class:`RunConfig` to datasets, tasks, and a run directory."""

import json
import logging
import platform
import time
from pathlib import Path

import numpy as np
import torch

from .config import dump_config, load_config
from .datasets import (
    folder_task,
    inject_anomalies,
    load_folder_dataset,
    load_idx_dataset,
    load_mnist_subset,
    one_class_split,
    synthesize_shapes,
)
from .errors import DataError, InvalidInputError
from .networks import load_checkpoint, save_checkpoint
from .scoring import evaluate, export_latents
from .trainer import build_model, fit, seed_streams

log = logging.getLogger(__name__)

ARTIFACTS = {
    "config": "config.snapshot",
    "best": "checkpoint.best",
    "final": "checkpoint.final",
    "log": "train_log.jsonl",
    "report": "score_report.json",
    "embeddings": "embeddings.csv",
    "manifest": "task.json",
    "meta": "run_meta.json",
}


def load_sets(data):
    """``(train, test)`` image sets for a :class:`DataConfig`."""
    if data.source == "synthetic":
        return synthesize_shapes(data.n_per_class, data.classes, data.image_size,
                                 np.random.default_rng(0))
    if data.source == "mnist5k":
        return load_mnist_subset(data.image_size)
    if data.source == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not Path(getattr(data, key)).is_file():
                raise DataError(f"data.{key}: {getattr(data, key)} does not exist")
        return load_idx_dataset(data.train_images, data.train_labels, data.test_images,
                                data.test_labels, data.image_size)
    return load_folder_dataset(data.root, data.image_size, data.channels)


def make_task(cfg, streams, sets=None):
    """The train/test task of ``cfg`` (with injected anomalies in mode e)."""
    train, test = sets or load_sets(cfg.data)
    try:
        if cfg.data.source == "folder":
            task = folder_task(train, test)
        else:
            task = one_class_split(train, test, cfg.data.target_class, streams["split"])
        task.seed = cfg.seed
        if cfg.mode == "e":
            per_sub = cfg.data.source == "folder" and cfg.anomaly_count is not None
            amount = cfg.anomaly_count if cfg.anomaly_count is not None else cfg.anomaly_fraction
            task = inject_anomalies(task, amount, streams["split"], per_subcategory=per_sub)
    except InvalidInputError as exc:
        raise DataError(str(exc)) from exc
    if cfg.data.source != "folder" and train.images.shape[1] != cfg.data.channels:
        raise DataError(f"images have {train.images.shape[1]} channels, config says {cfg.data.channels}")
    return task


def input_shape(task):
    return tuple(task.train[0].image.shape)


def train_run(cfg, out_dir, sets=None):
    """Train ``cfg`` and populate ``out_dir`` with the full artifact tree.

    Returns the :class:`FitResult`. Only ``run_meta.json`` holds wall-clock
    information, so every other artifact is reproducible byte for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    (out / ARTIFACTS["config"]).write_text(dump_config(cfg))
    streams = seed_streams(cfg.seed)
    sets = sets or load_sets(cfg.data)
    task = make_task(cfg, streams, sets)
    task.write_manifest(out / ARTIFACTS["manifest"])
    model = build_model(cfg, input_shape(task))
    log_path = out / ARTIFACTS["log"]
    log_path.unlink(missing_ok=True)
    result = fit(model, task, cfg, streams, log_path=log_path)

    snapshot = cfg.to_dict()
    best_epoch = max(result.best_epoch, 0) if result.best_auroc is not None else -1
    model.load_state_dict(result.final_state)
    save_checkpoint(out / ARTIFACTS["final"], model, snapshot, epoch=cfg.epochs)
    model.load_state_dict(result.best_state)
    save_checkpoint(out / ARTIFACTS["best"], model, snapshot, epoch=best_epoch + 1,
                    extra={"best_auroc": result.best_auroc, "best_epoch": best_epoch})
    write_outputs(out, "best", sets=sets)
    meta = {
        "started": started,
        "finished": time.time(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "host": platform.node(),
    }
    (out / ARTIFACTS["meta"]).write_text(json.dumps(meta, indent=1) + "\n")
    return result


def evaluate_run(run_dir, which="best", alpha=None, sets=None):
    """Rebuild the test split of a run and score it with one of its checkpoints."""
    run = Path(run_dir)
    ckpt = run / ARTIFACTS[which]
    if not ckpt.is_file():
        raise DataError(f"{ckpt} does not exist")
    cfg = load_config(run / ARTIFACTS["config"])
    model, meta = load_checkpoint(ckpt)
    task = make_task(cfg, seed_streams(cfg.seed), sets)
    x, y, ids = task.test_arrays()
    alpha = cfg.alpha_score if alpha is None else alpha
    info = {"checkpoint": which, "epoch": meta["epoch"], "mode": cfg.mode, "seed": cfg.seed,
            "name": cfg.name}
    return evaluate(model, x, y, ids, alpha, meta=info), (model, x, y, ids)


def write_outputs(run_dir, which="best", alpha=None, sets=None):
    """Write ``score_report.json`` and ``embeddings.csv`` for a run's checkpoint."""
    run = Path(run_dir)
    report, (model, x, y, ids) = evaluate_run(run, which, alpha, sets)
    report.write(run / ARTIFACTS["report"])
    export_latents(model, x, y, ids, run / ARTIFACTS["embeddings"])
    return report
