"""Workload files: versioned JSON I/O, the synthetic generator and shipped scenarios."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (ConfigProfile, InferenceConfig, RetrainConfig, WindowTrace, Workload,
                   validate_workload)
from .profiler import CurveModel, distribution_distance

SCHEMA_VERSION = 1
BUILTIN_PREFIX = "builtin:"
BUILTINS = {"toy": "toy_scenario.json", "synthetic10": "synthetic10.json"}


class WorkloadError(ValueError):
    """Malformed or invalid workload; ``problems`` lists every located issue."""

    def __init__(self, problems: Union[str, Sequence[str]]):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


# -- serialization ------------------------------------------------------------

def _config_to_dict(cfg: RetrainConfig) -> dict:
    return asdict(cfg)


def workload_to_dict(workload: Workload) -> dict:
    streams = []
    for sid, traces in workload.streams.items():
        windows = []
        for tr in traces:
            win = {
                "index": tr.window,
                "class_distribution": list(tr.class_distribution),
                "stale_accuracy": tr.stale_accuracy,
                "profiles": [{
                    "config": _config_to_dict(p.config),
                    "accuracy_by_epoch": [[k, a] for k, a in p.accuracy_by_epoch],
                    "gpu_seconds_per_epoch_full": p.gpu_seconds_per_epoch_full,
                    "post_retrain_accuracy": p.post_retrain_accuracy,
                } for p in tr.profiles.values()],
            }
            if tr.cached_accuracy:
                win["cached_accuracy"] = {str(j): a for j, a in sorted(tr.cached_accuracy.items())}
            windows.append(win)
        streams.append({"id": sid, "windows": windows})
    return {
        "version": SCHEMA_VERSION,
        "window_duration_s": workload.window_duration_s,
        "streams": streams,
        "inference_configs": [asdict(c) for c in workload.inference_configs],
    }


def dumps(workload: Workload) -> str:
    return json.dumps(workload_to_dict(workload), indent=1, sort_keys=False) + "\n"


def save_workload(workload: Workload, path) -> None:
    Path(path).write_text(dumps(workload))


class _Reader:
    """Walks the parsed JSON, recording problems with their field path."""

    def __init__(self):
        self.problems: List[str] = []

    def get(self, obj, key, where, kind=None, default=...):
        if not isinstance(obj, dict):
            self.problems.append(f"{where}: expected an object")
            return None
        if key not in obj:
            if default is not ...:
                return default
            self.problems.append(f"{where}.{key}: missing")
            return None
        val = obj[key]
        if kind is not None and not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
            self.problems.append(f"{where}.{key}: expected {_kind_name(kind)}, got {type(val).__name__}")
            return None
        return val

    def build(self, factory, where, **kw):
        if any(v is None for v in kw.values()):
            return None
        try:
            return factory(**kw)
        except (TypeError, ValueError) as exc:
            self.problems.append(f"{where}: {exc}")
            return None


def _kind_name(kind) -> str:
    if isinstance(kind, tuple):
        return " or ".join(k.__name__ for k in kind)
    return kind.__name__


NUM = (int, float)


def _parse_config(r: _Reader, raw, where) -> Optional[RetrainConfig]:
    if not isinstance(raw, dict):
        r.problems.append(f"{where}: expected an object")
        return None
    known = {"id", "epochs", "batch_size", "last_layer_neurons", "frozen_layers", "data_fraction"}
    for key in sorted(set(raw) - known):
        r.problems.append(f"{where}.{key}: unknown field")
    kw = dict(id=r.get(raw, "id", where, str), epochs=r.get(raw, "epochs", where, int))
    for key, kind in (("batch_size", int), ("last_layer_neurons", int), ("frozen_layers", int),
                      ("data_fraction", NUM)):
        if key in raw:
            kw[key] = r.get(raw, key, where, kind)
    return r.build(RetrainConfig, where, **kw)


def _parse_window(r: _Reader, sid: str, raw, where) -> Optional[WindowTrace]:
    index = r.get(raw, "index", where, int)
    dist = r.get(raw, "class_distribution", where, list)
    stale = r.get(raw, "stale_accuracy", where, NUM)
    profiles_raw = r.get(raw, "profiles", where, list)
    cached_raw = r.get(raw, "cached_accuracy", where, dict, default={})
    if dist is not None and not all(isinstance(x, NUM) and not isinstance(x, bool) for x in dist):
        r.problems.append(f"{where}.class_distribution: entries must be numbers")
        dist = None
    profiles: Dict[str, ConfigProfile] = {}
    for i, p in enumerate(profiles_raw or []):
        pw = f"{where}.profiles[{i}]"
        cfg = _parse_config(r, r.get(p, "config", pw), f"{pw}.config")
        curve = r.get(p, "accuracy_by_epoch", pw, list)
        pts = None
        if curve is not None:
            if all(isinstance(pt, list) and len(pt) == 2 and isinstance(pt[0], int)
                   and isinstance(pt[1], NUM) for pt in curve):
                pts = tuple((int(k), float(a)) for k, a in curve)
            else:
                r.problems.append(f"{pw}.accuracy_by_epoch: expected [[epoch, accuracy], ...]")
        gpu = r.get(p, "gpu_seconds_per_epoch_full", pw, NUM)
        post = r.get(p, "post_retrain_accuracy", pw, NUM)
        if None in (cfg, pts, gpu, post):
            continue
        if cfg.id in profiles:
            r.problems.append(f"{pw}.config.id: duplicate config {cfg.id!r}")
            continue
        profiles[cfg.id] = ConfigProfile(sid, index if index is not None else -1, cfg, pts,
                                         float(gpu), float(post))
    cached = {}
    for j, a in (cached_raw or {}).items():
        try:
            cached[int(j)] = float(a)
        except (TypeError, ValueError):
            r.problems.append(f"{where}.cached_accuracy.{j}: expected window index -> number")
    if None in (index, dist, stale, profiles_raw):
        return None
    return WindowTrace(sid, index, tuple(float(x) for x in dist), float(stale), profiles, cached)


def parse_workload(data: Any, source: str = "<workload>") -> Workload:
    """Build a validated :class:`Workload` from parsed JSON."""
    r = _Reader()
    if not isinstance(data, dict):
        raise WorkloadError(f"{source}: top level must be an object")
    version = data.get("version")
    if version != SCHEMA_VERSION:
        raise WorkloadError(f"{source}: unsupported schema version {version!r} "
                            f"(expected {SCHEMA_VERSION})")
    duration = r.get(data, "window_duration_s", "$", NUM)
    streams_raw = r.get(data, "streams", "$", list)
    infer_raw = r.get(data, "inference_configs", "$", list)
    if streams_raw is not None and not streams_raw:
        raise WorkloadError(f"{source}: no streams")
    inference = []
    for i, c in enumerate(infer_raw or []):
        w = f"$.inference_configs[{i}]"
        cfg = r.build(InferenceConfig, w, id=r.get(c, "id", w, str),
                      gpu_demand=r.get(c, "gpu_demand", w, NUM),
                      accuracy_factor=r.get(c, "accuracy_factor", w, NUM))
        if cfg is not None:
            inference.append(cfg)
    streams: Dict[str, List[WindowTrace]] = {}
    for i, s in enumerate(streams_raw or []):
        w = f"$.streams[{i}]"
        sid = r.get(s, "id", w, str)
        wins = r.get(s, "windows", w, list)
        if sid is None or wins is None:
            continue
        if sid in streams:
            r.problems.append(f"{w}.id: duplicate stream {sid!r}")
            continue
        traces = [_parse_window(r, sid, win, f"{w}.windows[{j}]") for j, win in enumerate(wins)]
        streams[sid] = [t for t in traces if t is not None]
    if r.problems:
        raise WorkloadError([f"{source}: {p}" for p in r.problems])
    workload = Workload(float(duration), streams, inference)
    problems = validate_workload(workload)
    if problems:
        raise WorkloadError([f"{source}: {p}" for p in problems])
    return workload


def load_workload(path) -> Workload:
    """Load a workload file, or a shipped one named ``builtin:<name>``."""
    path_s = str(path)
    if path_s.startswith(BUILTIN_PREFIX):
        name = path_s[len(BUILTIN_PREFIX):]
        if name not in BUILTINS:
            raise WorkloadError(f"unknown builtin workload {name!r}; choose from {sorted(BUILTINS)}")
        text = resources.files(__package__).joinpath("data", BUILTINS[name]).read_text()
    else:
        p = Path(path)
        if not p.is_file():
            raise WorkloadError(f"{p}: no such file")
        text = p.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WorkloadError(f"{path_s}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_workload(data, path_s)


# -- synthetic workloads ---------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Knobs for :func:`generate_synthetic`.

    Every (epochs, data fraction, layer variant) combination becomes one
    retraining config; the big-layer variant costs ``heavy_cost`` times more
    per epoch. ``drift`` scales the random walk of class distributions.
    """

    streams: int = 10
    windows: int = 4
    classes: int = 6
    window_duration_s: float = 200.0
    epochs: Tuple[int, ...] = (5, 15, 30)
    data_fractions: Tuple[float, ...] = (0.1, 0.5, 1.0)
    heavy_cost: float = 4.0
    gpu_s_per_epoch: Tuple[float, float] = (1.5, 3.0)
    beta0: Tuple[float, float] = (0.15, 0.6)
    start_accuracy: Tuple[float, float] = (0.2, 0.4)
    ceiling: Tuple[float, float] = (0.78, 0.92)
    stale_accuracy: Tuple[float, float] = (0.35, 0.55)
    drift: float = 0.3
    drift_penalty: float = 0.3
    cached_gap: Tuple[float, float] = (0.15, 0.3)
    inference_configs: Tuple[Tuple[str, float, float], ...] = (
        ("low", 0.02, 0.6), ("mid", 0.045, 0.8), ("full", 0.095, 1.0))
    seed: int = 0

    def __post_init__(self):
        if self.streams < 1 or self.windows < 1 or self.classes < 1:
            raise ValueError("streams, windows and classes must be positive")
        for name in ("gpu_s_per_epoch", "beta0", "start_accuracy", "ceiling", "stale_accuracy",
                     "cached_gap"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name}: need 0 <= low <= high")
        if self.ceiling[1] > 1 or self.start_accuracy[1] >= self.ceiling[0] - 0.2:
            raise ValueError("ceiling must stay within 1 and well above start_accuracy")
        if self.drift < 0 or self.heavy_cost < 1:
            raise ValueError("drift must be >= 0 and heavy_cost >= 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        kw = {}
        for k, v in raw.items():
            if isinstance(v, list):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            kw[k] = v
        return cls(**kw)


def synthetic_configs(spec: SyntheticSpec) -> List[Tuple[RetrainConfig, float]]:
    """Config grid with each config's per-epoch cost multiplier."""
    out = []
    for heavy in (False, True):
        neurons = 256 if heavy else 64
        frozen = 0 if heavy else 2
        for e in spec.epochs:
            for f in spec.data_fractions:
                cid = f"e{e}-d{int(round(f * 100))}-{'big' if heavy else 'small'}"
                out.append((RetrainConfig(cid, e, 32, neurons, frozen, f),
                            spec.heavy_cost if heavy else 1.0))
    return out


def _walk(rng, p: np.ndarray, drift: float) -> np.ndarray:
    if drift == 0:
        return p
    logits = np.log(np.clip(p, 1e-12, None)) + rng.normal(0.0, drift * 2.0, size=len(p))
    q = np.exp(logits - logits.max())
    return q / q.sum()


def generate_synthetic(spec: SyntheticSpec) -> Workload:
    """Deterministic synthetic workload.

    Per-epoch accuracies follow ``1 - (1/(b0*k + b1) + b2)``; larger data
    fractions and the big layer variant reach a higher ceiling. Class
    distributions drift between windows and older models lose accuracy in
    proportion to the drift.
    """
    rng = np.random.default_rng(spec.seed)
    grid = synthetic_configs(spec)
    streams: Dict[str, List[WindowTrace]] = {}
    for s in range(spec.streams):
        sid = f"cam{s:02d}"
        dist = rng.dirichlet(np.ones(spec.classes))
        base_cost = rng.uniform(*spec.gpu_s_per_epoch)
        traces, dists, bests = [], [], []
        prev = None
        for w in range(spec.windows):
            if w:
                dist = _walk(rng, dist, spec.drift)
            dist = np.round(dist, 12)
            dist = dist / math.fsum(dist)
            shift = distribution_distance(dist, prev) if prev is not None else 0.0
            ceiling = rng.uniform(*spec.ceiling)
            a0 = rng.uniform(*spec.start_accuracy)
            speed = rng.uniform(*spec.beta0)
            profiles = {}
            for cfg, mult in grid:
                top = ceiling - 0.12 * (1.0 - cfg.data_fraction) - (0.0 if mult > 1 else 0.05)
                top = max(top, a0 + 0.1)
                model = CurveModel(speed * math.sqrt(cfg.data_fraction) * (1.0 if mult > 1 else 1.3),
                                   1.0 / (top - a0), 1.0 - top)
                curve = tuple((k, round(float(model.accuracy(k)), 6)) for k in range(1, cfg.epochs + 1))
                profiles[cfg.id] = ConfigProfile(sid, w, cfg, curve, round(base_cost * mult, 6),
                                                 curve[-1][1])
            best = max(p.post_retrain_accuracy for p in profiles.values())
            stale = rng.uniform(*spec.stale_accuracy) - spec.drift_penalty * shift
            stale = round(min(max(stale, 0.05), best), 6)
            cached = {}
            for j in range(w):
                gap = rng.uniform(*spec.cached_gap)
                d = distribution_distance(dist, dists[j])
                cached[j] = round(min(max(best - gap - spec.drift_penalty * d, 0.0), 1.0), 6)
            traces.append(WindowTrace(sid, w, tuple(float(x) for x in dist), stale, profiles, cached))
            dists.append(dist)
            bests.append(best)
            prev = dist
        streams[sid] = traces
    inference = [InferenceConfig(i, d, a) for i, d, a in spec.inference_configs]
    return Workload(float(spec.window_duration_s), streams, inference)


# -- hand-encoded two-camera scenario ---------------------------------------------

TOY_WINDOW_S = 120.0
TOY_GPUS = 3
TOY_A_MIN = 0.4
TOY_EPOCHS = 5
# (config id, end accuracy, total GPU-seconds) per window
TOY_CONFIGS = {
    "A": [[("Cfg1A", 0.75, 85.0), ("Cfg2A", 0.70, 65.0)],
          [("Cfg1A", 0.95, 90.0), ("Cfg2A", 0.90, 40.0)]],
    "B": [[("Cfg1B", 0.90, 80.0), ("Cfg2B", 0.85, 50.0)],
          [("Cfg1B", 0.98, 80.0), ("Cfg2B", 0.90, 70.0)]],
}
TOY_STALE = {"A": (0.65, 0.60), "B": (0.50, 0.45)}
TOY_DIST = {"A": ((0.5, 0.3, 0.2), (0.3, 0.4, 0.3)), "B": ((0.2, 0.3, 0.5), (0.4, 0.4, 0.2))}
TOY_INFERENCE = (("full", 0.9, 1.0), ("mid", 0.7, 0.8), ("half", 0.45, 0.75), ("low", 0.2, 0.5))


def _toy_curve(end: float, epochs: int = TOY_EPOCHS) -> Tuple[Tuple[int, float], ...]:
    # beta1 = 1, beta2 = (1 - end) / 2 and beta0 set so the curve hits ``end`` at the last epoch.
    b2 = (1.0 - end) / 2
    b0 = (1.0 / b2 - 1.0) / epochs
    model = CurveModel(b0, 1.0, b2)
    pts = [(k, round(float(model.accuracy(k)), 9)) for k in range(1, epochs + 1)]
    pts[-1] = (epochs, end)
    return tuple(pts)


def toy_scenario() -> Workload:
    """Two cameras, two 120 s windows, two retraining configs each."""
    streams = {}
    for sid, windows in TOY_CONFIGS.items():
        traces = []
        for w, configs in enumerate(windows):
            profiles = {}
            for cid, end, gpu_s in configs:
                cfg = RetrainConfig(cid, TOY_EPOCHS)
                profiles[cid] = ConfigProfile(sid, w, cfg, _toy_curve(end),
                                              gpu_s / TOY_EPOCHS, end)
            traces.append(WindowTrace(sid, w, TOY_DIST[sid][w], TOY_STALE[sid][w], profiles))
        streams[sid] = traces
    return Workload(TOY_WINDOW_S, streams,
                    [InferenceConfig(i, d, a) for i, d, a in TOY_INFERENCE])


DEFAULT_SYNTHETIC = SyntheticSpec()


def write_builtin_data(directory) -> None:
    """Regenerate the shipped workload files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_workload(toy_scenario(), directory / BUILTINS["toy"])
    save_workload(generate_synthetic(DEFAULT_SYNTHETIC), directory / BUILTINS["synthetic10"])
