"""``deta`` command line: generate, pretrain, adapt, eval, export-embeddings.

Exit codes: 0 success, 1 training or validation failure, 2 I/O or config error.
Set ``DETA_LOG`` (e.g. ``INFO``, ``DEBUG``) for progress logging.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, save_config
from .encoder import DualEncoderParams, load_checkpoint, save_checkpoint
from .graphs import WSIGraph, load_graphs, save_graphs
from .synthdata import dataset_summary, generate_domain_pair, summary_csv
from .trainer import adapt, evaluate, predict, pretrain

log = logging.getLogger("deta")


class InputError(Exception):
    """Missing or unreadable input, or inputs that do not fit together."""


# ------------------------------------------------------------------ helpers


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.paths.out
    if not out:
        raise InputError("no output directory: pass --out or set paths.out")
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _path(flag: str | None, fallback: str | None, what: str) -> Path:
    p = flag or fallback
    if not p:
        raise InputError(f"no {what} given")
    path = Path(p)
    if not path.is_file():
        raise InputError(f"{what} file not found: {path}")
    return path


def _graphs(path: Path, cfg: RunConfig) -> list[WSIGraph]:
    try:
        graphs = load_graphs(path, knn_k=cfg.train.knn_k)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    if not graphs:
        raise InputError(f"{path} holds no graphs")
    return graphs


def _checkpoint(path: Path) -> DualEncoderParams:
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: cannot load checkpoint: {exc}") from exc


def _check_compatible(params: DualEncoderParams, cfg: RunConfig, graphs: list[WSIGraph]) -> None:
    width = graphs[0].features.shape[1]
    if params.config.in_dim != width:
        raise InputError(f"checkpoint in_dim={params.config.in_dim} but data feature width is {width}")
    wanted = dataclasses.asdict(cfg.train.encoder_config(width))
    have = dataclasses.asdict(params.config)
    for key, value in wanted.items():
        if have[key] != value:
            raise InputError(f"checkpoint {key}={have[key]} but config asks for {key}={value}")


def _write_trace(path: Path, trace: dict[str, list[float]]) -> None:
    keys = list(trace)
    n = max((len(v) for v in trace.values()), default=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", *keys])
        for e in range(n):
            w.writerow([e, *(repr(float(trace[k][e])) for k in keys)])


def _write_metrics(path: Path, rows: list[tuple[str, str, float]], seed: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "split", "value", "seed"])
        for metric, split, value in rows:
            w.writerow([metric, split, repr(float(value)), seed])


def _write_km(path: Path, curves: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "survival", "group"])
        for group, (times, surv) in curves.items():
            w.writerow([0, 1.0, group])
            for t, s in zip(times, surv):
                w.writerow([int(t) if float(t).is_integer() else repr(float(t)), repr(float(s)), group])


def km_svg(curves: dict[str, tuple[np.ndarray, np.ndarray]], title: str = "") -> str:
    """Minimal step-chart SVG of survival curves."""
    width, height, pad = 360, 240, 36
    t_max = max([float(np.max(t)) for t, _ in curves.values() if len(t)] + [1.0])
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]

    def xy(t, s):
        return pad + (width - 2 * pad) * t / t_max, height - pad - (height - 2 * pad) * s

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-size="11">',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle">time bin</text>',
        f'<text x="{pad}" y="{pad - 8}">S(t)</text>',
    ]
    if title:
        parts.append(f'<text x="{width / 2}" y="16" text-anchor="middle">{title}</text>')
    for i, (group, (times, surv)) in enumerate(curves.items()):
        x, y = xy(0.0, 1.0)
        points = [f"{x:.1f},{y:.1f}"]
        s_prev = 1.0
        for t, s in zip(times, surv):
            x, _ = xy(float(t), s_prev)
            _, y = xy(float(t), float(s))
            points.append(f"{x:.1f},{xy(0, s_prev)[1]:.1f}")
            points.append(f"{x:.1f},{y:.1f}")
            s_prev = float(s)
        colour = colours[i % len(colours)]
        parts.append(f'<polyline fill="none" stroke="{colour}" points="{" ".join(points)}"/>')
        parts.append(f'<text x="{width - pad - 60}" y="{pad + 14 * i}" fill="{colour}">{group}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ----------------------------------------------------------------- commands


def cmd_generate(args, cfg: RunConfig) -> None:
    out = _out_dir(args, cfg)
    source, target = generate_domain_pair(cfg.shift)
    save_graphs(out / "source.jsonl", source)
    save_graphs(out / "target.jsonl", target)
    for name, graphs in (("source", source), ("target", target)):
        text = summary_csv(dataset_summary(graphs, cfg.shift.k_bins), name)
        (out / f"summary_{name}.csv").write_text(text, encoding="utf-8")
    save_config(out / "config.toml", cfg)
    log.info("wrote %d + %d graphs to %s", len(source), len(target), out)


def cmd_pretrain(args, cfg: RunConfig) -> None:
    src = _graphs(_path(args.source, cfg.paths.source, "source data"), cfg)
    out = _out_dir(args, cfg)
    result = pretrain(src, cfg.train)
    save_checkpoint(out / "pretrain.ckpt.json", result.params, meta={"stage": "pretrain", "seed": cfg.train.seed})
    _write_trace(out / "loss_trace_pretrain.csv", result.trace)
    save_config(out / "config.toml", cfg)


def cmd_adapt(args, cfg: RunConfig) -> None:
    src = _graphs(_path(args.source, cfg.paths.source, "source data"), cfg)
    tgt = _graphs(_path(args.target, cfg.paths.target, "target data"), cfg)
    ckpt = args.checkpoint[0] if args.checkpoint else None
    params = _checkpoint(_path(ckpt, cfg.paths.checkpoint, "checkpoint"))
    _check_compatible(params, cfg, src)
    out = _out_dir(args, cfg)
    # target labels, if the file carries any, never reach adaptation
    result = adapt(params, src, [g.unlabeled() for g in tgt], cfg.train)
    save_checkpoint(out / "adapt.ckpt.json", result.params, meta={"stage": "adapt", "seed": cfg.train.seed})
    _write_trace(out / "loss_trace_adapt.csv", result.trace)
    save_config(out / "config.toml", cfg)


def _stem(path: Path) -> str:
    return path.name.split(".")[0]


def cmd_eval(args, cfg: RunConfig) -> None:
    data = {}
    if args.source or cfg.paths.source:
        data["source"] = _graphs(_path(args.source, cfg.paths.source, "source data"), cfg)
    if args.target or cfg.paths.target:
        data["target"] = _graphs(_path(args.target, cfg.paths.target, "target data"), cfg)
    if not data:
        raise InputError("eval needs --source and/or --target")
    ckpts = [_path(c, None, "checkpoint") for c in (args.checkpoint or [])]
    if not ckpts and cfg.paths.checkpoint:
        ckpts = [_path(cfg.paths.checkpoint, None, "checkpoint")]
    if not ckpts:
        raise InputError("eval needs at least one --checkpoint")
    loaded = []
    for path in ckpts:
        params = _checkpoint(path)
        for graphs in data.values():
            _check_compatible(params, cfg, graphs)
        loaded.append((_stem(path), params))
    for domain, graphs in data.items():
        if not all(g.labeled for g in graphs):
            raise InputError(f"{domain} data has unlabelled graphs; eval needs labels")
    out = _out_dir(args, cfg)
    rows = []
    for name, params in loaded:
        for domain, graphs in data.items():
            m = evaluate(params, graphs)
            split = f"{domain}:{name}"
            rows += [(metric, split, value) for metric, value in m.rows()]
            curves = {"low": m.km_low, "high": m.km_high}
            _write_km(out / f"km_{domain}_{name}.csv", curves)
            (out / f"km_{domain}_{name}.svg").write_text(
                km_svg(curves, f"{domain} / {name}  log-rank p={m.logrank_p:.3g}"), encoding="utf-8"
            )
            log.info("%s c_index=%.4f logrank_p=%.4g", split, m.c_index, m.logrank_p)
    _write_metrics(out / "metrics.csv", rows, cfg.train.seed)
    save_config(out / "config.toml", cfg)


def cmd_export_embeddings(args, cfg: RunConfig) -> None:
    ckpt = args.checkpoint[0] if args.checkpoint else None
    params = _checkpoint(_path(ckpt, cfg.paths.checkpoint, "checkpoint"))
    data = {}
    if args.source or cfg.paths.source:
        data["source"] = _graphs(_path(args.source, cfg.paths.source, "source data"), cfg)
    if args.target or cfg.paths.target:
        data["target"] = _graphs(_path(args.target, cfg.paths.target, "target data"), cfg)
    if not data:
        raise InputError("export-embeddings needs --source and/or --target")
    for graphs in data.values():
        _check_compatible(params, cfg, graphs)
    out = _out_dir(args, cfg)
    hidden = params.config.hidden
    header = ["graph", "domain", "predicted_bin"]
    header += [f"mp_{i}" for i in range(hidden)] + [f"sp_{i}" for i in range(hidden)]
    with open(out / "embeddings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for domain, graphs in data.items():
            pred = predict(params, graphs)
            bins = pred["hazard"].argmax(axis=1) + 1
            for i in range(len(graphs)):
                values = np.concatenate([pred["embedding_mp"][i], pred["embedding_sp"][i]])
                w.writerow([i, domain, int(bins[i]), *(repr(float(v)) for v in values)])
    save_config(out / "config.toml", cfg)


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run config (defaults if omitted)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="overrides shift.seed and train.seed")
        p.add_argument("--source", help="source graphs (JSON Lines)")
        p.add_argument("--target", help="target graphs (JSON Lines)")
        p.add_argument("--checkpoint", action="append", help="parameter checkpoint; eval accepts several")
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("DETA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.config and not Path(args.config).is_file():
            raise InputError(f"config file not found: {args.config}")
        cfg = load_config(args.config).with_seed(args.seed)
        cfg.validate()
    except (ConfigError, InputError, OSError) as exc:
        print(f"deta: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args, cfg)
    except (InputError, ConfigError, OSError) as exc:
        print(f"deta: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError) as exc:
        print(f"deta: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
