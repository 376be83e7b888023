"""Trace-driven simulation of retraining windows.

A window is simulated event by event: the scheduler runs at the window
start and, for the thief scheduler, again whenever a retraining job
finishes (and optionally when in-flight estimates are revised). Inference
accuracy is piecewise constant between events, so window means are exact
sums of rectangles.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import (INFERENCE, RETRAIN, Allocation, ClusterSpec, ConfigProfile, InferenceConfig,
                   JobId, RetrainConfig, WindowTrace, Workload)
from .placement import CheckpointParams, place_allocation, should_checkpoint
from .profiler import (ProfileEstimate, distribution_distance, extrapolate, fit_curve,
                       ground_truth_estimates, history_estimate, microprofile, microprofile_cost,
                       perturb_estimates, prune_configs, seeded_rng)
from .scheduler import (ScheduleResult, StreamJobs, inference_only_schedule, thief_schedule,
                        uniform_schedule)

log = logging.getLogger(__name__)

EVENT_KINDS = ("window_start", "retrain_complete", "checkpoint", "estimate_update",
               "reallocation", "window_end")
EVENT_RANK = {k: i for i, k in enumerate(EVENT_KINDS)}
SCHEDULERS = ("thief", "uniform", "none", "cached")
ESTIMATORS = ("ground_truth", "microprofile", "history")
TIME_EPS = 1e-9


class SimulationError(RuntimeError):
    pass


@dataclass
class Event:
    time_s: float
    kind: str
    stream: Optional[str] = None
    payload: dict = field(default_factory=dict)

    def sort_key(self):
        return (self.time_s, EVENT_RANK[self.kind], self.stream or "")


@dataclass
class Timeline:
    window: int
    duration_s: float
    events: List[Event] = field(default_factory=list)
    # stream -> [(start, end, accuracy)], covering [0, duration_s]
    accuracy: Dict[str, List[Tuple[float, float, float]]] = field(default_factory=dict)

    def mean_accuracy(self, stream: str) -> float:
        return math.fsum((e - s) * a for s, e, a in self.accuracy[stream]) / self.duration_s

    def min_accuracy(self, stream: str) -> float:
        return min(a for s, e, a in self.accuracy[stream] if e > s)

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "duration_s": self.duration_s,
            "events": [asdict(e) for e in sorted(self.events, key=Event.sort_key)],
            "accuracy": {s: [list(p) for p in pieces] for s, pieces in sorted(self.accuracy.items())},
        }


@dataclass
class StreamMetrics:
    window: int
    stream: str
    mean_acc: float
    min_acc: float
    retrain_gpu_s: float
    infer_gpu_s: float
    profiling_gpu_s: float
    sched_wall_ms: float
    retrained: Optional[str] = None
    completed: bool = False


@dataclass
class Metrics:
    window: int
    streams: Dict[str, StreamMetrics]
    sched_wall_ms: float = 0.0
    violations: List[str] = field(default_factory=list)

    @property
    def mean_acc(self) -> float:
        return math.fsum(m.mean_acc for m in self.streams.values()) / len(self.streams)

    @property
    def min_acc(self) -> float:
        return min(m.min_acc for m in self.streams.values())

    def total(self, attr: str) -> float:
        return math.fsum(getattr(m, attr) for m in self.streams.values())


@dataclass
class NetworkSpec:
    uplink_mbps: float
    downlink_mbps: float
    model_size_mb: float
    per_camera_data_mb: float
    cameras: int

    def __post_init__(self):
        if min(self.uplink_mbps, self.downlink_mbps) <= 0 or self.cameras < 1:
            raise ValueError("bandwidths and camera count must be positive")
        if min(self.model_size_mb, self.per_camera_data_mb) < 0:
            raise ValueError("sizes must be non-negative")


def cloud_offload_time(net: NetworkSpec, training_gpu_s: float = 0.0,
                       speedup: Optional[float] = None) -> float:
    """Seconds to ship every camera's training data up and its model back.

    Transfers share one link and are serialized. Cloud training is taken as
    instantaneous unless a ``speedup`` over one edge GPU is given.
    """
    upload = net.cameras * net.per_camera_data_mb / net.uplink_mbps
    download = net.cameras * net.model_size_mb / net.downlink_mbps
    train = training_gpu_s / speedup if speedup else 0.0
    return upload + download + train


def cloud_window_accuracy(stale_accuracy: float, retrained_accuracy: float,
                          arrival_s: float, window_s: float) -> float:
    """Window mean when the retrained model arrives from the cloud at ``arrival_s``."""
    t = min(max(arrival_s, 0.0), window_s)
    return (t * stale_accuracy + (window_s - t) * retrained_accuracy) / window_s


CacheEntry = Tuple[Sequence[float], float]


def cached_model_baseline(current: WindowTrace, cache: Sequence[CacheEntry],
                          threshold: Optional[float] = None) -> float:
    """Accuracy of the cached model whose training class mix is nearest ``current``'s.

    ``cache`` holds (class distribution, accuracy on the current window)
    pairs. When ``threshold`` is set and even the nearest entry is farther
    away, the current model is kept.
    """
    if not cache:
        raise SimulationError("model cache is empty")
    dists = [distribution_distance(current.class_distribution, d) for d, _ in cache]
    best = min(range(len(cache)), key=lambda i: (dists[i], i))
    if threshold is not None and dists[best] > threshold:
        return current.stale_accuracy
    return cache[best][1]


def adapt_estimates(config: RetrainConfig, profile: ConfigProfile, epochs_done: int,
                    estimate: ProfileEstimate, adapt_every: Optional[int]
                    ) -> Tuple[ProfileEstimate, bool]:
    """Refit the accuracy curve on the epochs observed so far.

    Fires only on multiples of ``adapt_every`` with at least two observed
    epochs. Returns the (possibly) revised estimate and whether it changed,
    which is the cue to rerun the scheduler with ``config`` held fixed.
    """
    if not adapt_every or epochs_done < 2 or epochs_done % adapt_every or epochs_done >= config.epochs:
        return estimate, False
    observed = [(k, a) for k, a in profile.accuracy_by_epoch if k <= epochs_done]
    if len(observed) < 2:
        return estimate, False
    predicted = extrapolate(fit_curve(observed), config.epochs)
    if abs(predicted - estimate.predicted_accuracy) <= 1e-6:
        return estimate, False
    return ProfileEstimate(estimate.config, predicted, estimate.gpu_seconds_per_epoch_full,
                           "microprofile"), True


@dataclass
class SchedulerChoice:
    name: str = "thief"
    fixed_configs: object = None  # None, one config id, or {stream: config id}
    inference_weight: float = 0.5
    cache_threshold: Optional[float] = None

    def __post_init__(self):
        if self.name not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.name!r}; expected one of {SCHEDULERS}")

    @property
    def label(self) -> str:
        if self.name == "uniform":
            cfg = self.fixed_configs if isinstance(self.fixed_configs, str) else \
                ("best" if self.fixed_configs is None else "fixed")
            return f"uniform({cfg},{self.inference_weight:g})"
        return self.name


@dataclass
class SimOptions:
    reallocate: bool = True
    checkpoint: bool = False
    checkpoint_cost_s: float = 0.0
    adapt_every: Optional[int] = None
    estimator: str = "ground_truth"
    sample_fraction: float = 0.1
    profile_epochs: int = 5
    profile_sigma: float = 0.02
    estimate_noise: float = 0.0
    prune_margin: Optional[float] = None
    history_threshold: float = 0.2
    labeling_overhead: float = 0.03
    seed: int = 0
    timing: bool = True

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")


@dataclass
class _Stream:
    trace: WindowTrace
    base: float
    estimates: Dict[str, ProfileEstimate]
    candidates: List[RetrainConfig]
    lam: Optional[InferenceConfig] = None
    infer_units: int = 0
    retrain_units: int = 0
    config: Optional[RetrainConfig] = None
    profile: Optional[ConfigProfile] = None
    work: float = 0.0
    done: bool = False
    stall_until: float = 0.0
    pieces: List[Tuple[float, float, float]] = field(default_factory=list)
    infer_gpu_s: float = 0.0
    retrain_gpu_s: float = 0.0

    @property
    def total_work(self) -> float:
        return self.config.gpu_seconds(self.profile.gpu_seconds_per_epoch_full)

    @property
    def epoch_work(self) -> float:
        return self.profile.gpu_seconds_per_epoch_full * self.config.data_fraction

    @property
    def active(self) -> bool:
        return self.config is not None and not self.done

    def accuracy(self) -> float:
        return self.lam.accuracy(self.base)


class _WindowSim:
    def __init__(self, traces, scheduler, spec, window_s, inference_configs, options,
                 stale, estimates, candidates, cached):
        self.scheduler = scheduler
        self.spec = spec
        self.T = float(window_s)
        self.inference_configs = list(inference_configs)
        self.opt = options
        self.window = next(iter(traces.values())).window
        self.streams: Dict[str, _Stream] = {}
        for sid in sorted(traces):
            tr = traces[sid]
            base = stale.get(sid, tr.stale_accuracy) if stale else tr.stale_accuracy
            if scheduler.name == "cached" and cached and sid in cached:
                base = cached[sid]
            est = estimates.get(sid) if estimates else None
            cand = candidates.get(sid) if candidates else None
            self.streams[sid] = _Stream(
                tr, base,
                est if est is not None else ground_truth_estimates(tr),
                list(cand) if cand is not None else tr.configs())
        self.t = 0.0
        self.events: List[Event] = []
        self.violations: List[str] = []
        self.wall_ms = 0.0
        self.delta = spec.delta

    # -- scheduling -----------------------------------------------------------
    def _jobs(self) -> List[StreamJobs]:
        jobs = []
        for sid, st in self.streams.items():
            if st.done or self.scheduler.name in ("none", "cached"):
                jobs.append(StreamJobs(sid, st.base))
            elif st.config is not None:
                jobs.append(StreamJobs(sid, st.base, estimates=st.estimates, fixed_config=st.config,
                                       progress=min(1.0, st.work / st.total_work)))
            else:
                jobs.append(StreamJobs(sid, st.base, list(st.candidates), st.estimates))
        return jobs

    def schedule(self, reason: str):
        jobs = self._jobs()
        remaining = self.T - self.t
        start = time.perf_counter()
        name = self.scheduler.name
        if name == "thief":
            result = thief_schedule(jobs, self.spec, remaining, self.inference_configs)
        elif name == "uniform":
            result = uniform_schedule(jobs, self.spec, remaining, self.inference_configs,
                                      self.scheduler.fixed_configs, self.scheduler.inference_weight)
        else:
            result = inference_only_schedule(jobs, self.spec, remaining, self.inference_configs)
        if self.opt.timing:
            self.wall_ms += (time.perf_counter() - start) * 1000.0
        self._apply(result, reason)

    def _apply(self, result: ScheduleResult, reason: str):
        alloc = result.allocation
        for problem in alloc.violations(self.spec.gpus):
            self.violations.append(f"t={self.t:.6g} {reason}: {problem}")
        for sid, st in self.streams.items():
            choice = result.decision[sid]
            st.lam = choice.infer_config
            st.infer_units = alloc.units.get(JobId(sid, INFERENCE), 0)
            st.retrain_units = alloc.units.get(JobId(sid, RETRAIN), 0)
            if st.config is None and not st.done and choice.retrain_config is not None:
                prof = st.trace.profiles.get(choice.retrain_config.id)
                if prof is None:
                    raise SimulationError(f"{sid}: trace has no profile for scheduled config "
                                          f"{choice.retrain_config.id!r}")
                st.config, st.profile, st.work = choice.retrain_config, prof, 0.0
        placement = place_allocation({str(j): s for j, s in alloc.shares().items() if s > 0},
                                     self.spec.gpus)
        self.events.append(Event(self.t, "reallocation", None, {
            "reason": reason,
            "shares": {str(j): str(s) for j, s in sorted(alloc.shares().items())},
            "configs": {sid: {"retrain": c.retrain_config.id if c.retrain_config else None,
                              "inference": c.infer_config.id}
                        for sid, c in sorted(result.decision.items())},
            "estimated_accuracy": result.estimated_mean_accuracy,
            "placement_slack": float(placement.slack),
            "unplaced": len(placement.unplaced),
        }))

    # -- time stepping --------------------------------------------------------
    def _rate(self, st: _Stream) -> float:
        return float(st.retrain_units * self.delta)

    def _needs_epoch_events(self) -> bool:
        return self.opt.checkpoint or bool(self.opt.adapt_every)

    def _next_event(self, st: _Stream) -> Optional[Tuple[float, float]]:
        if not st.active or st.retrain_units == 0:
            return None
        if self._needs_epoch_events():
            nxt = math.floor(st.work / st.epoch_work + 1e-9) + 1
            target = min(nxt * st.epoch_work, st.total_work)
        else:
            target = st.total_work
        begin = max(self.t, st.stall_until)
        return begin + (target - st.work) / self._rate(st), target

    def _advance(self, t_new: float):
        dt = t_new - self.t
        if dt <= 0:
            return
        for st in self.streams.values():
            acc = st.accuracy()
            if st.pieces and st.pieces[-1][2] == acc and st.pieces[-1][1] == self.t:
                s0, _, _ = st.pieces[-1]
                st.pieces[-1] = (s0, t_new, acc)
            else:
                st.pieces.append((self.t, t_new, acc))
            st.infer_gpu_s += float(st.infer_units * self.delta) * dt
            if st.active:
                rate = self._rate(st)
                st.retrain_gpu_s += rate * dt
                busy = t_new - max(self.t, st.stall_until)
                if busy > 0:
                    st.work += rate * busy
        self.t = t_new

    def _on_epoch(self, sid: str, st: _Stream) -> bool:
        """Handle an epoch boundary; return True if the scheduler should rerun."""
        if st.work >= st.total_work - 1e-9 * max(1.0, st.total_work):
            st.done = True
            st.base = st.profile.post_retrain_accuracy
            self.events.append(Event(self.t, "retrain_complete", sid, {"config": st.config.id}))
            return self.opt.reallocate and self.scheduler.name == "thief"
        epoch = int(round(st.work / st.epoch_work))
        resched = False
        if self.opt.adapt_every:
            est = st.estimates[st.config.id]
            new, changed = adapt_estimates(st.config, st.profile, epoch, est, self.opt.adapt_every)
            if changed:
                st.estimates = dict(st.estimates)
                st.estimates[st.config.id] = new
                self.events.append(Event(self.t, "estimate_update", sid, {
                    "config": st.config.id, "epoch": epoch,
                    "old": est.predicted_accuracy, "new": new.predicted_accuracy}))
                resched = self.scheduler.name == "thief"
        if self.opt.checkpoint:
            self._maybe_checkpoint(sid, st, epoch)
        return resched

    def _maybe_checkpoint(self, sid: str, st: _Stream, epoch: int):
        a_star = st.profile.accuracy_at(epoch)
        if a_star is None:
            a_star = extrapolate(fit_curve(list(st.profile.accuracy_by_epoch)), epoch) \
                if len(st.profile.accuracy_by_epoch) >= 2 else None
        if a_star is None or a_star <= st.base:
            return
        rate = self._rate(st)
        tau = self.t + (st.total_work - st.work) / rate if rate > 0 else self.T
        params = CheckpointParams(
            tau=min(tau, self.T), t=self.t, T=self.T,
            a=st.lam.accuracy(st.base), a_star=st.lam.accuracy(a_star),
            A=st.lam.accuracy(st.estimates[st.config.id].predicted_accuracy),
            delta_ckpt=self.opt.checkpoint_cost_s)
        if should_checkpoint(params):
            st.base = a_star
            st.stall_until = self.t + self.opt.checkpoint_cost_s
            self.events.append(Event(self.t, "checkpoint", sid, {"epoch": epoch, "accuracy": a_star}))

    def run(self) -> Tuple[Timeline, Dict[str, _Stream]]:
        self.events.append(Event(0.0, "window_start"))
        self.schedule("window_start")
        guard = 0
        while True:
            guard += 1
            if guard > 1_000_000:
                raise SimulationError("event loop did not terminate")
            upcoming = {}
            for sid, st in self.streams.items():
                nxt = self._next_event(st)
                if nxt is not None:
                    upcoming[sid] = nxt
            if not upcoming:
                break
            t_next = min(t for t, _ in upcoming.values())
            if t_next > self.T + TIME_EPS:
                break
            t_next = min(t_next, self.T)
            self._advance(t_next)
            resched = False
            for sid in sorted(upcoming):
                t_ev, target = upcoming[sid]
                if t_ev > t_next + TIME_EPS:
                    continue
                st = self.streams[sid]
                st.work = target
                resched |= self._on_epoch(sid, st)
            if resched and self.t < self.T:
                self.schedule("retrain_complete")
        self._advance(self.T)
        self.events.append(Event(self.T, "window_end"))
        timeline = Timeline(self.window, self.T, sorted(self.events, key=Event.sort_key),
                            {sid: st.pieces for sid, st in self.streams.items()})
        return timeline, self.streams


def run_window(traces: Mapping[str, WindowTrace], scheduler: SchedulerChoice, spec: ClusterSpec,
               window_s: float, inference_configs: Sequence[InferenceConfig],
               options: Optional[SimOptions] = None, stale: Optional[Mapping[str, float]] = None,
               estimates: Optional[Mapping[str, Dict[str, ProfileEstimate]]] = None,
               candidates: Optional[Mapping[str, Sequence[RetrainConfig]]] = None,
               cached: Optional[Mapping[str, float]] = None,
               profiling_gpu_s: Optional[Mapping[str, float]] = None) -> Tuple[Timeline, Metrics]:
    """Simulate one retraining window for all streams.

    ``stale`` overrides each stream's starting model accuracy, ``estimates``
    the scheduler's view of each config (ground truth by default) and
    ``cached`` the model accuracy used by the cached-model baseline.
    """
    if not traces:
        raise SimulationError("no streams")
    options = options or SimOptions()
    sim = _WindowSim(traces, scheduler, spec, window_s, inference_configs, options,
                     stale, estimates, candidates, cached)
    timeline, streams = sim.run()
    per = {}
    for sid, st in streams.items():
        per[sid] = StreamMetrics(
            window=sim.window, stream=sid,
            mean_acc=timeline.mean_accuracy(sid), min_acc=timeline.min_accuracy(sid),
            retrain_gpu_s=st.retrain_gpu_s * (1.0 + options.labeling_overhead),
            infer_gpu_s=st.infer_gpu_s,
            profiling_gpu_s=(profiling_gpu_s or {}).get(sid, 0.0),
            sched_wall_ms=sim.wall_ms,
            retrained=st.config.id if st.config else None,
            completed=st.done)
    return timeline, Metrics(sim.window, per, sim.wall_ms, sim.violations)


@dataclass
class ExperimentResult:
    scheduler: str
    gpus: int
    metrics: List[Metrics]
    timelines: List[Timeline]

    @property
    def mean_acc(self) -> float:
        return math.fsum(m.mean_acc for m in self.metrics) / len(self.metrics)

    @property
    def violations(self) -> List[str]:
        return [v for m in self.metrics for v in m.violations]


def _estimates_for(trace: WindowTrace, configs: Sequence[RetrainConfig], options: SimOptions,
                   history: List[Tuple[Sequence[float], str, float]]
                   ) -> Tuple[Dict[str, ProfileEstimate], float]:
    if options.estimator == "ground_truth":
        est = ground_truth_estimates(trace)
        cost = 0.0
    else:
        todo = list(configs)
        est = {}
        if options.estimator == "history":
            todo = []
            for cfg in configs:
                acc = history_estimate(trace.class_distribution, history, cfg, options.history_threshold)
                prof = trace.profiles.get(cfg.id)
                if acc is None or prof is None:
                    todo.append(cfg)
                else:
                    est[cfg.id] = ProfileEstimate(cfg.id, acc, prof.gpu_seconds_per_epoch_full, "history")
        for e in microprofile(trace, todo, options.sample_fraction, options.profile_epochs,
                              options.seed, options.profile_sigma):
            est[e.config] = e
        cost = microprofile_cost(trace, todo, options.sample_fraction, options.profile_epochs)
    if options.estimate_noise > 0:
        est = perturb_estimates(est, options.estimate_noise,
                                seeded_rng(options.seed, "noise", trace.stream, trace.window))
    return est, cost


def run_experiment(workload: Workload, scheduler: SchedulerChoice, spec: ClusterSpec,
                   options: Optional[SimOptions] = None, n_windows: Optional[int] = None,
                   window_s: Optional[float] = None) -> ExperimentResult:
    """Simulate consecutive windows, carrying retrained models forward.

    A model retrained to completion in window ``w`` serves as the starting
    model of window ``w + 1`` with its ground-truth post-retraining
    accuracy; otherwise the next window starts from the trace's stale
    accuracy.
    """
    options = options or SimOptions()
    n = workload.n_windows if n_windows is None else n_windows
    if n < 1 or n > workload.n_windows:
        raise SimulationError(f"workload has {workload.n_windows} windows, asked for {n}")
    T = window_s or workload.window_duration_s
    stale: Dict[str, float] = {}
    history: Dict[str, list] = {sid: [] for sid in workload.streams}
    past_estimates: Dict[str, list] = {sid: [] for sid in workload.streams}
    metrics, timelines = [], []
    for w in range(n):
        traces = workload.window(w)
        estimates, candidates, cost, cached = {}, {}, {}, {}
        for sid, tr in traces.items():
            configs = tr.configs()
            if options.prune_margin is not None:
                configs = prune_configs(configs, past_estimates[sid], options.prune_margin)
            candidates[sid] = configs
            if scheduler.name in ("thief", "uniform"):
                estimates[sid], c = _estimates_for(tr, configs, options, history[sid])
                cost[sid] = c if scheduler.name == "thief" else 0.0
                past_estimates[sid].append(list(estimates[sid].values()))
            if scheduler.name == "cached":
                entries = [(workload.streams[sid][j].class_distribution, tr.cached_accuracy[j])
                           for j in range(w) if j in tr.cached_accuracy]
                cached[sid] = (cached_model_baseline(tr, entries, scheduler.cache_threshold)
                               if entries else stale.get(sid, tr.stale_accuracy))
        timeline, m = run_window(traces, scheduler, spec, T, workload.inference_configs, options,
                                 stale=stale, estimates=estimates or None,
                                 candidates=candidates, cached=cached or None, profiling_gpu_s=cost)
        metrics.append(m)
        timelines.append(timeline)
        stale = {}
        for sid, sm in m.streams.items():
            if sm.completed and sm.retrained:
                post = traces[sid].profiles[sm.retrained].post_retrain_accuracy
                stale[sid] = post
                history[sid].append((traces[sid].class_distribution, sm.retrained, post))
        if w + 1 < n:
            nxt = workload.window(w + 1)
            for sid in nxt:
                stale.setdefault(sid, nxt[sid].stale_accuracy)
    return ExperimentResult(scheduler.label, spec.gpus, metrics, timelines)


def audit(timeline: Timeline, metrics: Metrics, tol: float = 1e-9) -> List[str]:
    """Invariant violations in one simulated window (empty when all hold)."""
    problems = list(metrics.violations)
    T = timeline.duration_s
    times = [e.time_s for e in timeline.events]
    if any(t < -tol or t > T + tol for t in times):
        problems.append("event outside the window")
    if times != sorted(times):
        problems.append("events out of time order")
    for sid, pieces in timeline.accuracy.items():
        if not pieces or abs(pieces[0][0]) > tol or abs(pieces[-1][1] - T) > tol:
            problems.append(f"{sid}: accuracy pieces do not span the window")
        if any(abs(a[1] - b[0]) > tol for a, b in zip(pieces, pieces[1:])):
            problems.append(f"{sid}: gap between accuracy pieces")
        if any(not 0 <= acc <= 1 for _, _, acc in pieces):
            problems.append(f"{sid}: accuracy outside [0, 1]")
        m = metrics.streams.get(sid)
        if m is None or abs(m.mean_acc - timeline.mean_accuracy(sid)) > tol:
            problems.append(f"{sid}: metrics mean differs from the timeline integral")
    return problems
