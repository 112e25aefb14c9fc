"""Ablation grids over view modes and loss weights.

``fig4`` covers ten training paradigms (a-j) that differ in which view
pairs are pulled together and in which direction; ``fig5`` sweeps the
reverse-direction weight delta from 0 to 1 with gamma = 1 - delta.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .config import config_from_dict, config_hash, config_to_dict, merge
from .runs import execute_run
from .trainer import RunConfig

log = logging.getLogger(__name__)

ABLATION_PRESETS = ("fig4", "fig5")


def _w(a, b, c, d):
    return {"alpha": a, "beta": b, "gamma": c, "delta": d}


# letter -> (description, overrides)
PARADIGMS = {
    "a": ("one standard pair", {"view_mode": "baseline_1pair", "loss": _w(1, 0, 0, 0)}),
    "b": ("two standard pairs", {"view_mode": "baseline_2pairs", "loss": _w(1, 0, 0, 0)}),
    "c": ("heavy pair only", {"view_mode": "dssl", "loss": _w(0, 1, 0, 0)}),
    "d": ("joint standard+heavy pair", {"view_mode": "baseline_joint", "loss": _w(1, 0, 0, 0)}),
    "e": ("all pairs, both directions", {"view_mode": "dssl", "loss": _w(1, 1, 1, 1)}),
    "f": ("standard pair + heavy pair", {"view_mode": "dssl", "loss": _w(1, 1, 0, 0)}),
    "g": ("heavy from raw image, one direction",
          {"view_mode": "dssl", "loss": _w(1, 0, 1, 0), "views": {"heavy_source": "raw"}}),
    "h": ("heavy<->standard, both directions", {"view_mode": "dssl", "loss": _w(1, 0, 1, 1)}),
    "i": ("heavy from an unrelated standard view",
          {"view_mode": "dssl", "loss": _w(1, 0, 1, 0), "views": {"heavy_source": "independent"}}),
    "j": ("heavy -> own standard parent", {"view_mode": "dssl", "loss": _w(1, 0, 1, 0)}),
}

DELTAS = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class Cell:
    name: str
    config: RunConfig
    label: str = ""


def _cell(base: RunConfig, name, overrides, label=""):
    data = config_to_dict(base)
    data.pop("loss", None)
    data = merge(data, overrides)
    data["name"] = name
    return Cell(name, config_from_dict(data), label)


def fig4_cells(base: RunConfig, paradigms=None):
    # standard views here are crop + colour distortion only
    base_dict = {"views": {"standard": {"blur_prob": 0.0}}}
    letters = paradigms or tuple(PARADIGMS)
    cells = []
    for letter in letters:
        if letter not in PARADIGMS:
            raise ValueError(f"unknown paradigm {letter!r}")
        label, over = PARADIGMS[letter]
        cells.append(_cell(base, f"fig4-{letter}", merge(base_dict, over), label))
    return cells


def fig5_cells(base: RunConfig, deltas=DELTAS):
    cells = []
    for d in deltas:
        if not 0.0 <= d <= 1.0:
            raise ValueError(f"delta {d} outside [0, 1]")
        over = {"view_mode": "dssl", "loss": _w(1.0, 0.0, round(1.0 - d, 10), d)}
        cells.append(_cell(base, f"fig5-delta{d:.1f}", over, f"delta={d:.1f}"))
    return cells


def preset_cells(preset: str, base: RunConfig):
    if preset == "fig4":
        return fig4_cells(base)
    if preset == "fig5":
        return fig5_cells(base)
    raise ValueError(f"unknown ablation preset {preset!r} (expected one of {ABLATION_PRESETS})")


def _run_one(name, cfg_dict, run_dir, force, dataset=None):
    cfg = config_from_dict(cfg_dict)
    try:
        return {"status": "ok", **execute_run(cfg, run_dir, dataset=dataset, force=force,
                                              reuse=True)}
    except Exception as exc:  # one failed cell must not abort the grid
        log.error("cell %s failed: %s", name, exc)
        with open(os.path.join(run_dir, "error.txt"), "w") as fh:
            fh.write(traceback.format_exc())
        return {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}


RESULT_COLUMNS = ("cell", "label", "status", "view_mode", "alpha", "beta", "gamma", "delta",
                  "heavy_source", "steps", "knn", "linear", "collapsed", "collapsed_at",
                  "config_hash", "run_dir", "error")


def run_grid(cells, out_dir, dataset=None, parallel=1, force=False, preset=None):
    """Run every cell (identical configs run once) and write results.csv/json."""
    os.makedirs(out_dir, exist_ok=True)
    by_hash, jobs = {}, []
    for cell in cells:
        digest = config_hash(cell.config)
        if digest not in by_hash:
            by_hash[digest] = os.path.join(out_dir, "runs", cell.name)
            os.makedirs(by_hash[digest], exist_ok=True)
            jobs.append((cell.name, config_to_dict(cell.config), by_hash[digest]))
    outcomes = {}
    if parallel > 1:
        with ProcessPoolExecutor(parallel) as ex:
            futs = {run_dir: ex.submit(_run_one, name, cfg, run_dir, force)
                    for name, cfg, run_dir in jobs}
            outcomes = {k: f.result() for k, f in futs.items()}
    else:
        for name, cfg, run_dir in jobs:
            outcomes[run_dir] = _run_one(name, cfg, run_dir, force, dataset)

    rows = []
    for cell in cells:
        run_dir = by_hash[config_hash(cell.config)]
        out = outcomes[run_dir]
        a, b, g, d = cell.config.loss.as_tuple()
        rows.append({
            "cell": cell.name, "label": cell.label, "status": out["status"],
            "view_mode": cell.config.view_mode, "alpha": a, "beta": b, "gamma": g, "delta": d,
            "heavy_source": cell.config.views.heavy_source, "steps": out.get("steps"),
            "knn": out.get("knn"), "linear": out.get("linear"),
            "collapsed": out.get("collapsed"), "collapsed_at": out.get("collapsed_at"),
            "config_hash": config_hash(cell.config), "run_dir": os.path.relpath(run_dir, out_dir),
            "error": out.get("error", ""),
        })
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    with open(os.path.join(out_dir, "results.json"), "w") as fh:
        json.dump({"preset": preset, "cells": rows}, fh, indent=2)
    return rows
