"""Command line: run experiments, generate synthetic workloads, validate workload files."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .core import ClusterSpec, Workload
from .scheduler import InfeasibleStreamWarning
from .simulator import (ExperimentResult, SchedulerChoice, SimOptions, audit, run_experiment)
from .workload import (BUILTIN_PREFIX, SyntheticSpec, WorkloadError, generate_synthetic,
                       load_workload, save_workload)

log = logging.getLogger("edgesched")

OUT_ENV = "EDGESCHED_OUT"
CSV_COLUMNS = ("scheduler", "gpus", "window", "stream", "mean_acc", "min_acc", "retrain_gpu_s",
               "infer_gpu_s", "profiling_gpu_s", "sched_wall_ms")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """One experiment: a workload crossed with schedulers, GPU counts and steal quanta."""

    workload: str
    schedulers: List[SchedulerChoice]
    gpus: List[int]
    delta: float = 0.1
    steal_quanta: List[float] = field(default_factory=lambda: [0.1])
    a_min: float = 0.0
    window_duration_s: Optional[float] = None
    windows: Optional[int] = None
    options: SimOptions = field(default_factory=SimOptions)
    out: str = "results"

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path = Path(".")) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)} | {"steal_quantum", "seed"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        if "workload" not in raw:
            raise ConfigError("config needs a 'workload' path (or builtin:<name>)")
        wl = str(raw["workload"])
        if not wl.startswith(BUILTIN_PREFIX):
            path = Path(wl) if Path(wl).is_absolute() else base_dir / wl
            if not path.is_file():
                raise ConfigError(f"workload file {path} does not exist")
            wl = str(path)
        try:
            schedulers = [SchedulerChoice(**s) for s in raw.get("schedulers", [{"name": "thief"}])]
            opts = dict(raw.get("options", {}))
            if "seed" in raw:
                opts["seed"] = raw["seed"]
            options = SimOptions(**opts)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        gpus = raw.get("gpus", [1])
        gpus = [gpus] if isinstance(gpus, int) else list(gpus)
        quanta = raw.get("steal_quanta", raw.get("steal_quantum", raw.get("delta", 0.1)))
        quanta = list(quanta) if isinstance(quanta, list) else [quanta]
        cfg = cls(wl, schedulers, gpus, raw.get("delta", 0.1), quanta, raw.get("a_min", 0.0),
                  raw.get("window_duration_s"), raw.get("windows"), options,
                  raw.get("out", "results"))
        for g in cfg.gpus:
            for q in cfg.steal_quanta:
                cfg.cluster(g, q)  # raises on invalid combinations
        return cfg

    def cluster(self, gpus: int, quantum: float) -> ClusterSpec:
        try:
            return ClusterSpec(gpus, self.delta, quantum, self.a_min)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class Cell:
    scheduler: SchedulerChoice
    gpus: int
    quantum: float
    label: str

    @property
    def slug(self) -> str:
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in self.label)
        return f"{safe}_g{self.gpus}"


def _cells(cfg: ExperimentConfig) -> List[Cell]:
    cells = []
    for sch in cfg.schedulers:
        for g in cfg.gpus:
            quanta = cfg.steal_quanta if sch.name == "thief" else cfg.steal_quanta[:1]
            for q in quanta:
                label = sch.label
                if sch.name == "thief" and len(cfg.steal_quanta) > 1:
                    label = f"thief(steal={q:g})"
                cells.append(Cell(sch, g, q, label))
    return cells


def _run_cell(workload: Workload, cfg: ExperimentConfig, cell: Cell) -> ExperimentResult:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InfeasibleStreamWarning)
        return run_experiment(workload, cell.scheduler, cfg.cluster(cell.gpus, cell.quantum),
                              cfg.options, cfg.windows, cfg.window_duration_s)


def _fmt(x: float) -> str:
    return repr(round(float(x), 12))


def metrics_csv(results: Sequence[Tuple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for cell, res in results:
        for m in res.metrics:
            for sid in sorted(m.streams):
                s = m.streams[sid]
                writer.writerow([cell.label, cell.gpus, s.window, sid, _fmt(s.mean_acc),
                                 _fmt(s.min_acc), _fmt(s.retrain_gpu_s), _fmt(s.infer_gpu_s),
                                 _fmt(s.profiling_gpu_s), _fmt(s.sched_wall_ms)])
    return buf.getvalue()


def run(cfg: ExperimentConfig, out_dir: Path, parallel: int = 1) -> int:
    """Run every cell, write metrics.csv, summary.json and per-cell timelines.

    Returns the process exit status: 1 if any invariant was violated.
    """
    workload = load_workload(cfg.workload)
    cells = _cells(cfg)
    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(lambda c: _run_cell(workload, cfg, c), cells))
    else:
        results = [_run_cell(workload, cfg, c) for c in cells]

    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"workload": cfg.workload, "cells": []}
    failed = False
    for cell, res in zip(cells, results):
        cell_dir = out_dir / cell.slug
        cell_dir.mkdir(exist_ok=True)
        problems = []
        for tl, m in zip(res.timelines, res.metrics):
            problems.extend(f"window {m.window}: {p}" for p in audit(tl, m))
        (cell_dir / "timeline.json").write_text(
            json.dumps([tl.to_dict() for tl in res.timelines], indent=1) + "\n")
        failed |= bool(problems)
        for p in problems:
            log.error("%s: %s", cell.label, p)
        summary["cells"].append({
            "scheduler": cell.label,
            "gpus": cell.gpus,
            "steal_quantum": cell.quantum,
            "mean_acc": round(res.mean_acc, 12),
            "min_acc": round(min(m.min_acc for m in res.metrics), 12),
            "per_window_mean_acc": [round(m.mean_acc, 12) for m in res.metrics],
            "retrain_gpu_s": round(sum(m.total("retrain_gpu_s") for m in res.metrics), 9),
            "infer_gpu_s": round(sum(m.total("infer_gpu_s") for m in res.metrics), 9),
            "profiling_gpu_s": round(sum(m.total("profiling_gpu_s") for m in res.metrics), 9),
            "sched_wall_ms": round(sum(m.sched_wall_ms for m in res.metrics), 6),
            "violations": problems,
        })
    (out_dir / "metrics.csv").write_text(metrics_csv(list(zip(cells, results))))
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    width = max(len(c.label) for c in cells)
    for c in summary["cells"]:
        print(f"{c['scheduler']:<{width}}  gpus={c['gpus']:<3} mean_acc={c['mean_acc']:.4f}  "
              f"min_acc={c['min_acc']:.4f}  sched_ms={c['sched_wall_ms']:.1f}")
    return 1 if failed else 0


def _load_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def cmd_run(args) -> int:
    raw = _load_json(args.config)
    cfg = ExperimentConfig.from_dict(raw, Path(args.config).resolve().parent)
    if args.seed is not None:
        cfg.options.seed = args.seed
    out = args.out or os.environ.get(OUT_ENV) or cfg.out
    return run(cfg, Path(out), args.parallel)


def cmd_gen(args) -> int:
    raw = _load_json(args.spec)
    try:
        spec = SyntheticSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{args.spec}: {exc}") from None
    workload = generate_synthetic(spec)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_workload(workload, args.out)
    print(f"wrote {args.out}: {len(workload.streams)} streams x {workload.n_windows} windows")
    return 0


def cmd_validate(args) -> int:
    try:
        workload = load_workload(args.workload)
    except WorkloadError as exc:
        for p in exc.problems:
            print(p, file=sys.stderr)
        return 1
    n_cfg = len({c.id for ts in workload.streams.values() for t in ts for c in t.configs()})
    print(f"ok: {len(workload.streams)} streams, {workload.n_windows} windows, "
          f"{n_cfg} retraining configs, {len(workload.inference_configs)} inference configs")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgesched", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--parallel", type=int, default=1, metavar="K")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen", help="generate a synthetic workload")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("validate", help="check a workload file")
    p.add_argument("--workload", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, WorkloadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
