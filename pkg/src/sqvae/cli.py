"""Command line: ``sqvae train | eval | sweep | plot``.

Exit codes: 0 success, 1 usage/config error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import checkpoint
from .autodiff import NumericError, ShapeError
from .data import DataFormatError, build_dataset
from .plotting import PLOTS
from .records import SUMMARY_HEADER, MetricsWriter, mean_std, read_metrics
from .training import (
    ConfigError,
    RunState,
    TrainConfig,
    TrainingDiverged,
    continue_training,
    evaluate,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_KEYS = ("out_dir", "checkpoint_every")
SUMMARY_METRICS = ("loss", "val_loss", "perplexity", "mean_entropy", "test_mse",
                   "pixel_error", "miou", "sigma2", "sigma2_phi", "kappa", "kappa_phi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# run configuration files


def parse_run_config(raw: dict) -> tuple[TrainConfig, dict]:
    """Split a run-config mapping into the TrainConfig and run options."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    opts = {"out_dir": raw.pop("out_dir", None), "checkpoint_every": raw.pop("checkpoint_every", 10)}
    ce = opts["checkpoint_every"]
    if not isinstance(ce, int) or isinstance(ce, bool) or ce < 0:
        raise ConfigError("checkpoint_every: must be an integer >= 0 (0 disables)")
    if opts["out_dir"] is not None and not isinstance(opts["out_dir"], str):
        raise ConfigError("out_dir: must be a string")
    return TrainConfig.from_dict(raw), opts


def materialize(config: TrainConfig, opts: dict) -> dict:
    out = config.to_dict()
    out.update(opts)
    return out


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None


def _dataset_for(config: TrainConfig):
    try:
        return build_dataset(config.dataset)
    except ShapeError as exc:
        raise ConfigError(f"dataset: {exc}") from None


# ---------------------------------------------------------------------------
# train


def run_training(config: TrainConfig, opts: dict, out: str, resume: str | None = None,
                 epochs: int | None = None, log=None) -> RunState:
    """Train into directory ``out`` (config.json, metrics.csv, *.sqvc)."""
    os.makedirs(out, exist_ok=True)
    if resume:
        state = checkpoint.load_state(resume)
        if state.config.to_dict() != config.to_dict():
            raise ConfigError("resume: checkpoint config differs from --config")
        writer = MetricsWriter(os.path.join(out, "metrics.csv"), keep_until_step=state.step)
    else:
        state = RunState(config, _dataset_for(config), run_id=_run_id(config))
        writer = MetricsWriter(os.path.join(out, "metrics.csv"))
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(materialize(config, opts), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not resume:
        checkpoint.save_state(os.path.join(out, "init.sqvc"), state)
    total = config.epochs if epochs is None else epochs
    remaining = max(0, total - state.epoch)
    every = opts.get("checkpoint_every", 10)

    def after_epoch(st):
        if every and st.epoch % every == 0:
            checkpoint.save_state(os.path.join(out, f"epoch_{st.epoch:04d}.sqvc"), st)
        if log is not None:
            log(f"epoch {st.epoch} step {st.step}")

    continue_training(state, remaining, writer, after_epoch)
    checkpoint.save_state(os.path.join(out, "final.sqvc"), state)
    return state


def _run_id(config: TrainConfig) -> str:
    return f"{config.model}-K{config.K}-db{config.d_b}-s{config.seed}"


def cmd_train(args) -> int:
    raw = read_json(args.config)
    config, opts = parse_run_config(raw)
    out = args.out or opts["out_dir"]
    if not out:
        raise ConfigError("out_dir: give --out or set out_dir in the config")
    state = run_training(config, opts, out, args.resume, args.epochs,
                         log=(lambda m: print(m, file=sys.stderr)) if args.verbose else None)
    print(json.dumps({"out": out, "epoch": state.epoch, "step": state.step}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    state = checkpoint.load_state(args.checkpoint)
    metrics = evaluate(state, args.split)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def grid_cells(grid: dict) -> list[dict]:
    if not isinstance(grid, dict) or set(grid) - {"base", "axes"}:
        raise ConfigError("grid: expected an object with keys base and axes")
    base = grid.get("base", {})
    axes = grid.get("axes", {})
    if not isinstance(axes, dict) or not all(isinstance(v, list) and v for v in axes.values()):
        raise ConfigError("grid.axes: every axis must be a non-empty list")
    names = list(axes)
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        cfg = dict(base)
        cfg.update(dict(zip(names, combo)))
        cells.append(cfg)
    return cells


def _cell_name(cfg: dict, axes: list[str]) -> str:
    parts = []
    for a in axes:
        v = cfg[a]
        parts.append(f"{a}={json.dumps(v, sort_keys=True) if isinstance(v, (dict, list)) else v}")
    return "_".join(parts).replace("/", "-").replace(" ", "") or "cell"


def _run_cell(raw: dict, out: str) -> dict:
    """Worker: one full training run; returns the final metric row or an error."""
    try:
        config, opts = parse_run_config(raw)
        run_training(config, opts, out)
        rows = read_metrics(os.path.join(out, "metrics.csv"), allow_empty=True)
        if not rows:
            return {"status": "ok", "row": {}}
        last = rows[-1]
        return {"status": "ok", "row": {k: getattr(last, k) for k in SUMMARY_METRICS}}
    except Exception as exc:  # recorded per cell; other cells keep running
        return {"status": f"failed: {type(exc).__name__}: {exc}", "row": {}}


def summarize(cells: list[dict], results: list[dict], axes: list[str]) -> list[list[str]]:
    """Rows of summary.csv: one per grid point with seeds aggregated."""
    group_axes = [a for a in axes if a != "seed"]
    groups: dict[tuple, list[dict]] = {}
    order = []
    for cfg, res in zip(cells, results):
        key = tuple(json.dumps(cfg.get(a), sort_keys=True) for a in group_axes)
        if key not in groups:
            groups[key] = []
            order.append((key, cfg))
        groups[key].append(res)
    header = group_axes + ["n_runs", "n_failed"]
    for m in SUMMARY_METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    header.append("errors")
    table = [header]
    for key, cfg in order:
        res = groups[key]
        ok = [r for r in res if r["status"] == "ok"]
        line = [str(cfg.get(a)) if not isinstance(cfg.get(a), (dict, list))
                else json.dumps(cfg.get(a), sort_keys=True) for a in group_axes]
        line += [str(len(res)), str(len(res) - len(ok))]
        for m in SUMMARY_METRICS:
            vals = [r["row"][m] for r in ok if r["row"].get(m) is not None]
            if vals:
                mu, sd = mean_std(vals)
                line += [repr(mu), repr(sd)]
            else:
                line += ["", ""]
        line.append("; ".join(r["status"] for r in res if r["status"] != "ok"))
        table.append(line)
    return table


def cmd_sweep(args) -> int:
    import csv

    grid = read_json(args.grid)
    cells = grid_cells(grid)
    axes = list(grid.get("axes", {}))
    for cfg in cells:  # validate up front so typos fail fast
        parse_run_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    dirs = [os.path.join(args.out, _cell_name(c, axes)) for c in cells]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_run_cell, cells, dirs))
    else:
        results = [_run_cell(c, d) for c, d in zip(cells, dirs)]
    table = summarize(cells, results, axes)
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        csv.writer(fh, lineterminator="\n").writerows(table)
    failed = sum(r["status"] != "ok" for r in results)
    print(json.dumps({"cells": len(cells), "failed": failed,
                      "summary": os.path.join(args.out, "summary.csv")}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot


def cmd_plot(args) -> int:
    svg = PLOTS[args.kind](args.metrics)
    with open(args.out, "w") as fh:
        fh.write(svg)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sqvae", description="Train and evaluate SQ-VAE and VQ-VAE baselines.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="train until this many epochs in total")
    t.add_argument("--verbose", action="store_true", help="log epochs to stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid of runs with a seed-aggregated summary")
    s.add_argument("--grid", required=True, help='JSON {"base": {...}, "axes": {...}}')
    s.add_argument("--out", required=True)
    s.add_argument("--parallel", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    q = sub.add_parser("plot", help="render metrics CSVs to SVG")
    q.add_argument("--metrics", nargs="+", required=True)
    q.add_argument("--kind", required=True, choices=sorted(PLOTS))
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NumericError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ShapeError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
