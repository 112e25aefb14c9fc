"""Run directories: manifest, config snapshot, result summary and reuse."""
from __future__ import annotations

import json
import os
import platform
import shutil
import time

import numpy as np
import torch

from . import kernels
from .config import config_hash, save_config
from .evaluate import linear_eval, extract_features
from .trainer import RunConfig, pretrain

RESULT_FILE = "result.json"
MANIFEST_FILE = "manifest.json"


class RunDirError(RuntimeError):
    pass


def _versions():
    return {"python": platform.python_version(), "numpy": np.__version__,
            "torch": torch.__version__, "kernels": kernels.BACKEND}


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def completed_result(run_dir, cfg: RunConfig):
    """The stored result if ``run_dir`` already finished this exact config."""
    path = os.path.join(run_dir, RESULT_FILE)
    if not os.path.exists(path):
        return None
    result = read_json(path)
    return result if result.get("config_hash") == config_hash(cfg) else None


def _write_manifest(run_dir, manifest):
    with open(os.path.join(run_dir, MANIFEST_FILE), "w") as fh:
        json.dump(manifest, fh, indent=2)


def prepare_run_dir(run_dir, cfg: RunConfig, force=False):
    """Create ``run_dir`` for ``cfg`` and write its manifest.

    A directory that already holds a run (finished, or for another config)
    is refused unless ``force``, in which case it is wiped first.
    """
    manifest_path = os.path.join(run_dir, MANIFEST_FILE)
    digest = config_hash(cfg)
    if os.path.exists(manifest_path) and not force:
        old = read_json(manifest_path)
        if old.get("config_hash") != digest:
            raise RunDirError(
                f"{run_dir} holds a run with a different config "
                f"({old.get('config_hash')} != {digest}); pass --force to overwrite")
        if old.get("status") == "complete":
            raise RunDirError(f"{run_dir} already holds a completed run; pass --force to re-run")
    if force and os.path.isdir(run_dir):
        shutil.rmtree(run_dir)
    os.makedirs(run_dir, exist_ok=True)
    for stale in ("metrics.jsonl", "metrics.csv", RESULT_FILE):
        if os.path.exists(os.path.join(run_dir, stale)):
            os.remove(os.path.join(run_dir, stale))
    manifest = {"run_id": os.path.basename(os.path.abspath(run_dir)), "config_hash": digest,
                "seed": cfg.seed, "name": cfg.name, "status": "running",
                "started": time.strftime("%Y-%m-%dT%H:%M:%S"), "versions": _versions(),
                "config": "config.toml", "artifacts": {}}
    save_config(cfg, os.path.join(run_dir, "config.toml"))
    _write_manifest(run_dir, manifest)
    return manifest


def execute_run(cfg: RunConfig, run_dir, dataset=None, force=False, reuse=False,
                linear_epochs=50, device="cpu"):
    """Pretrain into ``run_dir`` and write ``result.json``.

    With ``reuse`` a finished run of the identical config is returned as is
    instead of being refused.
    """
    cfg = cfg.resolved().validate()
    if reuse and not force:
        done = completed_result(run_dir, cfg)
        if done is not None:
            return done
    manifest = prepare_run_dir(run_dir, cfg, force=force)
    if dataset is None:
        from .data import ingest_dataset
        dataset = ingest_dataset(cfg.data.name, seed=cfg.data.seed)
    t0 = time.time()
    try:
        res = pretrain(cfg, run_dir=run_dir, dataset=dataset, device=device)
    except BaseException:
        manifest["status"] = "failed"
        _write_manifest(run_dir, manifest)
        raise
    ds = dataset.subset(cfg.data.train_size or None, cfg.data.test_size or None)
    linear = None
    if linear_epochs:
        tr = extract_features(res.model.encoder, ds.images("train"))
        te = extract_features(res.model.encoder, ds.images("test"))
        linear = linear_eval(tr, ds.labels("train"), te, ds.labels("test"),
                             num_classes=ds.num_classes, epochs=linear_epochs,
                             seed=cfg.seed).top1
    result = {
        "name": cfg.name, "config_hash": config_hash(cfg), "view_mode": cfg.view_mode,
        "loss": list(cfg.loss.as_tuple()), "steps": res.steps, "knn": res.final_knn,
        "linear": linear, "collapsed": res.collapsed, "collapsed_at": res.collapsed_at,
        "checkpoint": res.checkpoint, "seconds": round(time.time() - t0, 1),
    }
    with open(os.path.join(run_dir, RESULT_FILE), "w") as fh:
        json.dump(result, fh, indent=2)
    manifest.update(status="complete", finished=time.strftime("%Y-%m-%dT%H:%M:%S"),
                    artifacts={"metrics_jsonl": "metrics.jsonl", "metrics_csv": "metrics.csv",
                               "result": RESULT_FILE,
                               "checkpoint": os.path.relpath(res.checkpoint, run_dir)})
    _write_manifest(run_dir, manifest)
    return result
