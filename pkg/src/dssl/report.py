"""Markdown/CSV summaries and PNG plots for single runs and ablation grids."""
from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class ReportError(RuntimeError):
    pass


def read_metrics(run_dir, kind="epoch"):
    path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.exists(path):
        return []
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [r for r in rows if r.get("kind") == kind]


def _fmt(v, pct=False):
    if v is None or v == "":
        return "-"
    if isinstance(v, float):
        return f"{100 * v:.1f}" if pct else f"{v:.4g}"
    return str(v)


def _accuracy_cell(row):
    if row.get("status") == "failed":
        return "failed"
    acc = _fmt(row.get("knn"), pct=True)
    return f"{acc} (collapse)" if row.get("collapsed") else acc


def plot_knn_curves(named_runs, path, chance=None):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, run_dir in named_runs:
        pts = [(r["epoch"] + 1, r["knn_acc"]) for r in read_metrics(run_dir)
               if r.get("knn_acc") is not None]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, [100 * y for y in ys], marker=".", label=name)
    if chance is not None:
        ax.axhline(100 * chance, color="grey", ls="--", lw=1, label="chance")
    ax.set_xlabel("epoch")
    ax.set_ylabel("kNN accuracy (%)")
    ax.legend(fontsize=7, ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_delta_sweep(rows, path):
    pts = sorted((r["delta"], r["knn"]) for r in rows
                 if r.get("status") == "ok" and r.get("knn") is not None)
    if not pts:
        raise ReportError("no finished cells to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    xs, ys = zip(*pts)
    ax.plot(xs, [100 * y for y in ys], marker="o")
    for r in rows:
        if r.get("collapsed"):
            ax.annotate("collapse", (r["delta"], 100 * (r["knn"] or 0)), fontsize=7)
    ax.set_xlabel("delta (gamma = 1 - delta)")
    ax.set_ylabel("final kNN accuracy (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _load_rows(path):
    with open(path) as fh:
        data = json.load(fh)
    return data.get("preset"), data["cells"]


def _single_row(directory):
    with open(os.path.join(directory, "result.json")) as fh:
        res = json.load(fh)
    return {"cell": res["name"], "label": res["view_mode"], "status": "ok",
            "view_mode": res["view_mode"], "alpha": res["loss"][0], "beta": res["loss"][1],
            "gamma": res["loss"][2], "delta": res["loss"][3], "steps": res["steps"],
            "knn": res["knn"], "linear": res.get("linear"), "collapsed": res["collapsed"],
            "collapsed_at": res["collapsed_at"], "run_dir": directory}


def collect_rows(directories):
    """Rows from grid directories (results.json) and/or single run directories."""
    if not directories:
        raise ReportError("no run directories given")
    preset, rows = None, []
    for d in directories:
        if os.path.exists(os.path.join(d, "results.json")):
            p, grid_rows = _load_rows(os.path.join(d, "results.json"))
            preset = preset or p
            rows += [{**r, "run_dir": os.path.join(d, r["run_dir"])} for r in grid_rows]
        elif os.path.exists(os.path.join(d, "result.json")):
            rows.append(_single_row(d))
        else:
            raise ReportError(f"{d} has neither results.json nor result.json")
    return preset, rows


def write_report(directories, out_dir=None, chance=0.1):
    """Write report.md, summary.csv and PNG plots.

    ``directories`` is one path or a list of grid / single-run directories;
    the output goes to ``out_dir`` (default: the only directory given).
    """
    if isinstance(directories, (str, os.PathLike)):
        directories = [directories]
    preset, rows = collect_rows(directories)
    if out_dir is None:
        if len(directories) != 1:
            raise ReportError("out_dir is required when reporting several directories")
        out_dir = directories[0]
    os.makedirs(out_dir, exist_ok=True)

    plots = []
    runs = [(r["cell"], r["run_dir"]) for r in rows if r.get("run_dir")]
    plots.append(plot_knn_curves(runs, os.path.join(out_dir, "knn_curves.png"), chance))
    if preset == "fig5":
        plots.append(plot_delta_sweep(rows, os.path.join(out_dir, "delta_vs_accuracy.png")))

    cols = ("cell", "label", "view_mode", "alpha", "beta", "gamma", "delta", "steps",
            "knn", "linear", "collapsed", "collapsed_at", "status")
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)

    title = preset or ", ".join(r["cell"] for r in rows)
    lines = [f"# Report: {title}", ""]
    lines.append(f"Chance level: {100 * chance:.1f}%. Accuracies are final kNN top-1 (%); "
                 "`(collapse)` marks runs whose collapse monitor fired.")
    lines += ["", "| cell | description | mode | a | b | g | d | steps | kNN | linear | collapsed at |",
              "|---|---|---|---|---|---|---|---|---|---|---|"]
    for r in rows:
        lines.append("| " + " | ".join([
            r["cell"], r.get("label", ""), r["view_mode"], _fmt(r["alpha"]), _fmt(r["beta"]),
            _fmt(r["gamma"]), _fmt(r["delta"]), _fmt(r.get("steps")), _accuracy_cell(r),
            _fmt(r.get("linear"), pct=True), _fmt(r.get("collapsed_at"))]) + " |")
    failed = [r for r in rows if r.get("status") == "failed"]
    if failed:
        lines += ["", "## Failed cells", ""]
        lines += [f"- {r['cell']}: {r.get('error', '')}" for r in failed]
    lines += ["", "## Plots", ""] + [f"![{os.path.basename(p)}]({os.path.basename(p)})"
                                     for p in plots]
    path = os.path.join(out_dir, "report.md")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
