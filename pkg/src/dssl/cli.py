"""Command line entry point: ``dssl <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

log = logging.getLogger("dssl")

EXIT_CONFIG, EXIT_RUNDIR, EXIT_DATA, EXIT_FAILED = 2, 3, 4, 1


def _common(p, preset_help="named run preset (desk, full)"):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--preset", help=preset_help)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--device", default=os.environ.get("DSSL_DEVICE", "cpu"),
                   help="torch device (default: $DSSL_DEVICE or cpu)")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="force deterministic torch kernels")
    p.add_argument("--force", action="store_true",
                   help="overwrite an output directory holding a different run")


def _resolve(args, preset=None, extra=None):
    from .config import resolve_config

    over = dict(extra or {})
    if args.seed is not None:
        over["seed"] = args.seed
    if args.deterministic is not None:
        over["deterministic"] = args.deterministic
    preset = preset if preset is not None else args.preset
    if not args.config and not preset:
        preset = "desk"
    return resolve_config(args.config, preset, over)


def _dataset(cfg):
    from .data import ingest_dataset

    return ingest_dataset(cfg.data.name, seed=cfg.data.seed)


def cmd_pretrain(args):
    from .config import config_hash
    from .report import write_report

    extra = {}
    if args.view_mode:
        extra["view_mode"] = args.view_mode
    if args.epochs:
        extra["epochs"] = args.epochs
    cfg = _resolve(args, extra=extra)
    out = args.out or os.path.join("runs", f"{cfg.name}-{config_hash(cfg)[:8]}")
    result = _execute(cfg, out, args)
    write_report(out)
    print(json.dumps(result, indent=2))
    return 0


def _execute(cfg, out, args):
    import torch

    from .runs import execute_run

    if args.device.startswith("cuda") and not torch.cuda.is_available():
        log.warning("device %s unavailable, using cpu", args.device)
        args.device = "cpu"
    return execute_run(cfg, out, dataset=_dataset(cfg), force=args.force, device=args.device)


def _eval(args, protocol):
    from .data import ingest_dataset
    from .evaluate import evaluate_checkpoint

    ds = ingest_dataset(args.dataset, seed=args.data_seed)
    kwargs = {"k": args.k, "t": args.t} if protocol == "knn" else {"epochs": args.epochs}
    out = args.out or os.path.join(args.checkpoint, f"eval-{protocol}.json")
    if os.path.exists(out) and not args.force:
        print(f"error: {out} exists; pass --force to overwrite", file=sys.stderr)
        return EXIT_RUNDIR
    report = evaluate_checkpoint(args.checkpoint, ds, protocol, out_path=out,
                                 feature_cache=args.feature_cache, **kwargs)
    print(f"{protocol} top-1: {100 * report.top1:.2f}%  ({out})")
    return 0


def cmd_ablate(args):
    from .ablation import preset_cells, run_grid
    from .report import write_report

    base = _resolve(args, preset=args.base_preset if not args.config else "",
                    extra={"epochs": args.epochs} if args.epochs else None)
    cells = preset_cells(args.preset, base)
    out = args.out or os.path.join("runs", f"ablate-{args.preset}")
    rows = run_grid(cells, out, parallel=args.parallel, force=args.force, preset=args.preset,
                    dataset=None if args.parallel > 1 else _dataset(base))
    path = write_report(out)
    failed = [r["cell"] for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} cells, {len(failed)} failed; report: {path}")
    return EXIT_FAILED if failed else 0


def cmd_report(args):
    from .report import write_report

    print(write_report(args.directories, out_dir=args.out))
    return 0


def cmd_dump_views(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .augment import ImageSample
    from .views import build_training_views

    cfg = _resolve(args)
    mode = args.view_mode or cfg.view_mode
    ds = _dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    images = ds.images("train", np.arange(args.n))
    rng = np.random.default_rng(cfg.seed)
    sets = [build_training_views(ImageSample(img, i), mode, cfg.views, rng).check()
            for i, img in enumerate(images)]
    slots = sets[0].slots
    fig, axes = plt.subplots(len(sets), len(slots) + 1,
                             figsize=(1.4 * (len(slots) + 1), 1.4 * len(sets)), squeeze=False)
    for r, vs in enumerate(sets):
        panels = [("image", images[r])] + [(s, vs.views[s].pixels) for s in slots]
        for c, (title, px) in enumerate(panels):
            ax = axes[r][c]
            ax.imshow(np.clip(px.transpose(1, 2, 0), 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(title, fontsize=7)
    fig.tight_layout()
    png = os.path.join(args.out, f"views-{mode}.png")
    fig.savefig(png, dpi=120)
    plt.close(fig)
    sidecar = {
        "mode": mode, "seed": cfg.seed,
        "sets": [{"source_id": vs.source_id,
                  "edges": [[e.src, e.dst, e.kind] for e in vs.edges],
                  "trace": vs.policy_trace} for vs in sets],
    }
    with open(os.path.join(args.out, f"views-{mode}.json"), "w") as fh:
        json.dump(sidecar, fh, indent=1, default=_jsonable)
    print(png)
    return 0


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def build_parser():
    from .ablation import ABLATION_PRESETS
    from .data import DATASETS
    from .views import VIEW_MODES

    p = argparse.ArgumentParser(prog="dssl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="self-supervised pretraining run")
    _common(sp)
    sp.add_argument("--view-mode", choices=VIEW_MODES)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", help="run directory (default runs/<name>-<hash>)")
    sp.set_defaults(func=cmd_pretrain)

    for name, protocol in (("eval-linear", "linear"), ("eval-knn", "knn")):
        ep = sub.add_parser(name, help=f"{protocol} evaluation of a checkpoint")
        ep.add_argument("checkpoint", help="checkpoint directory")
        ep.add_argument("--dataset", choices=DATASETS, default="synthetic-tiny")
        ep.add_argument("--data-seed", type=int, default=0)
        ep.add_argument("--out", help="report JSON path")
        ep.add_argument("--feature-cache", help="directory for cached frozen features")
        ep.add_argument("--force", action="store_true")
        if protocol == "knn":
            ep.add_argument("--k", type=int, default=200)
            ep.add_argument("--t", type=float, default=0.1)
        else:
            ep.add_argument("--epochs", type=int, default=50)
        ep.set_defaults(func=lambda a, _p=protocol: _eval(a, _p))

    ap = sub.add_parser("ablate", help="run an ablation grid")
    _common(ap, preset_help=f"grid preset ({', '.join(ABLATION_PRESETS)})")
    ap.add_argument("--base-preset", default="desk", help="run preset the grid starts from")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--parallel", type=int, default=1, help="cells run concurrently")
    ap.add_argument("--out")
    ap.set_defaults(func=cmd_ablate)

    rp = sub.add_parser("report", help="build report.md and plots for runs or grids")
    rp.add_argument("directories", nargs="+", help="run or ablation directories")
    rp.add_argument("--out", help="output directory (required for several inputs)")
    rp.set_defaults(func=cmd_report)

    dp = sub.add_parser("dump-views", help="write a PNG grid of training views")
    _common(dp)
    dp.add_argument("--view-mode", choices=VIEW_MODES)
    dp.add_argument("--n", type=int, default=8)
    dp.add_argument("--out", default="views")
    dp.set_defaults(func=cmd_dump_views)
    return p


def main(argv=None):
    from .config import ConfigError
    from .data import DatasetError
    from .report import ReportError
    from .runs import RunDirError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "ablate" and args.preset is None:
        print("error: ablate needs --preset (fig4 or fig5)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunDirError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNDIR
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ReportError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
