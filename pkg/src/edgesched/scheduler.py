"""Joint retraining/inference schedulers.

``thief_schedule`` starts from a fair split and lets every job repeatedly
steal a quantum of GPU from every other job, keeping a steal only when the
estimated window-averaged accuracy strictly improves. ``pick_configs``
chooses, for a fixed allocation, each stream's inference and retraining
configuration. ``uniform_schedule`` is the static baseline and
``brute_force_schedule`` enumerates the whole decision space of tiny
instances to serve as an optimality oracle.

Allocations are handled as integer multiples of ``ClusterSpec.delta``.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .core import (INFERENCE, RETRAIN, Allocation, ClusterSpec, Decision, InferenceConfig,
                   JobId, RetrainConfig, StreamChoice)
from .profiler import ProfileEstimate

log = logging.getLogger(__name__)

INFEASIBLE = -math.inf
# Steals must beat the incumbent by more than float noise.
IMPROVEMENT_EPS = 1e-12


class SchedulerError(ValueError):
    pass


class InfeasibleStreamWarning(UserWarning):
    pass


@dataclass
class StreamJobs:
    """Inference job plus optional retraining job of one stream.

    ``candidates`` is the (pruned) retraining config set. A retraining run
    already in flight is described by ``fixed_config`` and ``progress`` (the
    fraction of its GPU work already done); its config cannot change.
    """

    stream: str
    stale_accuracy: float
    candidates: List[RetrainConfig] = field(default_factory=list)
    estimates: Dict[str, ProfileEstimate] = field(default_factory=dict)
    fixed_config: Optional[RetrainConfig] = None
    progress: float = 0.0

    @property
    def has_retraining(self) -> bool:
        return self.fixed_config is not None or bool(self.candidates)

    def job_ids(self) -> List[JobId]:
        ids = [JobId(self.stream, INFERENCE)]
        if self.has_retraining:
            ids.append(JobId(self.stream, RETRAIN))
        return ids


@dataclass
class ScheduleResult:
    allocation: Allocation
    decision: Decision
    estimated_mean_accuracy: float
    accepted: List[float] = field(default_factory=list)
    steal_attempts: int = 0


def retrain_duration(config: Optional[RetrainConfig], share: float,
                     estimate: Optional[ProfileEstimate] = None, progress: float = 0.0,
                     gpu_seconds_per_epoch_full: Optional[float] = None) -> float:
    """Wall-clock seconds to finish retraining at a constant GPU ``share``.

    Time scales linearly with epochs and data fraction and inversely with
    share. ``progress`` is the fraction of work already done. Returns
    ``inf`` for a zero share; ``0`` when there is nothing to retrain.
    """
    if config is None:
        return 0.0
    per_epoch = gpu_seconds_per_epoch_full
    if per_epoch is None:
        if estimate is None:
            raise SchedulerError(f"no cost estimate for {config.id}")
        per_epoch = estimate.gpu_seconds_per_epoch_full
    if share <= 0:
        return math.inf
    return config.gpu_seconds(per_epoch) * (1.0 - progress) / float(share)


def estimate_window_accuracy(stale_accuracy: float, config: Optional[RetrainConfig],
                             infer_config: InferenceConfig, retrain_share, window_s: float,
                             estimate: Optional[ProfileEstimate] = None,
                             progress: float = 0.0) -> float:
    """Inference accuracy averaged over a window of ``window_s`` seconds.

    The old model serves until retraining finishes at ``t_r``; the retrained
    model serves the rest of the window. Returns ``-inf`` when retraining
    cannot finish inside the window.
    """
    a_old = infer_config.accuracy(stale_accuracy)
    if config is None:
        return a_old
    if estimate is None:
        raise SchedulerError(f"missing estimate for {config.id}")
    if not estimate.available:
        return INFEASIBLE
    t_r = retrain_duration(config, retrain_share, estimate, progress)
    if t_r > window_s:
        return INFEASIBLE
    a_new = infer_config.accuracy(estimate.predicted_accuracy)
    return (t_r * a_old + (window_s - t_r) * a_new) / window_s


def _retrain_cost(config: Optional[RetrainConfig], estimates: Mapping[str, ProfileEstimate]) -> float:
    if config is None:
        return 0.0
    est = estimates.get(config.id)
    return config.gpu_seconds(est.gpu_seconds_per_epoch_full) if est else math.inf


def choose_inference(infer_share, model_accuracy: float,
                     inference_configs: Sequence[InferenceConfig],
                     a_min: float) -> Tuple[InferenceConfig, bool]:
    """Most accurate inference config that keeps up and meets ``a_min``.

    Returns ``(config, feasible)``. When nothing passes both filters the
    fallback is the most accurate config that keeps up, or else the
    cheapest one, and ``feasible`` is False.
    """
    share = float(infer_share)
    key = lambda c: (-c.accuracy_factor, c.gpu_demand, c.id)
    keeps_up = [c for c in inference_configs if c.gpu_demand < share]
    pool = [c for c in keeps_up if c.accuracy(model_accuracy) >= a_min]
    if pool:
        return min(pool, key=key), True
    if keeps_up:
        return min(keeps_up, key=key), False
    return min(inference_configs, key=lambda c: (c.gpu_demand, -c.accuracy_factor, c.id)), False


def _stream_choice(job: StreamJobs, infer_units: int, retrain_units: int, spec: ClusterSpec,
                   window_s: float, inference_configs: Sequence[InferenceConfig],
                   configs: Optional[Sequence[Optional[RetrainConfig]]] = None) -> StreamChoice:
    infer_share = infer_units * spec.delta
    retrain_share = retrain_units * spec.delta
    lam, feasible = choose_inference(infer_share, job.stale_accuracy, inference_configs, spec.a_min)

    if job.fixed_config is not None:
        cfg = job.fixed_config
        acc = estimate_window_accuracy(job.stale_accuracy, cfg, lam, retrain_share, window_s,
                                       job.estimates.get(cfg.id), job.progress)
        if acc == INFEASIBLE:
            # An in-flight run that cannot finish just keeps the old model serving.
            acc = lam.accuracy(job.stale_accuracy)
        best_cfg, best_acc = cfg, acc
    else:
        pool = configs if configs is not None else [None, *job.candidates]
        best_cfg, best_acc, best_key = None, INFEASIBLE, None
        for cfg in pool:
            if cfg is not None and retrain_units == 0:
                continue
            acc = estimate_window_accuracy(job.stale_accuracy, cfg, lam, retrain_share, window_s,
                                           job.estimates.get(cfg.id) if cfg else None)
            if acc == INFEASIBLE:
                continue
            key = (-acc, _retrain_cost(cfg, job.estimates), cfg.id if cfg else "")
            if best_key is None or key < best_key:
                best_cfg, best_acc, best_key = cfg, acc, key
        if best_key is None:
            best_cfg, best_acc = None, lam.accuracy(job.stale_accuracy)
    return StreamChoice(best_cfg, lam, retrain_share, infer_share,
                        best_acc if feasible else 0.0, feasible)


class _Evaluator:
    """PickConfigs with a per-stream cache keyed by that stream's shares."""

    def __init__(self, jobs: Sequence[StreamJobs], spec: ClusterSpec, window_s: float,
                 inference_configs: Sequence[InferenceConfig]):
        self.jobs = list(jobs)
        self.spec = spec
        self.window_s = window_s
        self.inference_configs = list(inference_configs)
        self._cache: Dict[Tuple[int, int, int], StreamChoice] = {}
        self.calls = 0

    def stream(self, i: int, infer_units: int, retrain_units: int) -> StreamChoice:
        key = (i, infer_units, retrain_units)
        hit = self._cache.get(key)
        if hit is None:
            hit = _stream_choice(self.jobs[i], infer_units, retrain_units, self.spec,
                                 self.window_s, self.inference_configs)
            self._cache[key] = hit
        return hit

    def __call__(self, units: Mapping[JobId, int]) -> Tuple[Decision, float]:
        self.calls += 1
        decision = {}
        for i, job in enumerate(self.jobs):
            decision[job.stream] = self.stream(i, units.get(JobId(job.stream, INFERENCE), 0),
                                               units.get(JobId(job.stream, RETRAIN), 0))
        return decision, _mean(c.accuracy for c in decision.values())


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


def _warn_infeasible(decision: Decision):
    bad = sorted(s for s, c in decision.items() if not c.feasible)
    if bad:
        warnings.warn(f"no inference config meets a_min at the allocated share for {bad}",
                      InfeasibleStreamWarning, stacklevel=3)


def pick_configs(alloc: Allocation, jobs: Sequence[StreamJobs], window_s: float,
                 inference_configs: Sequence[InferenceConfig], spec: ClusterSpec
                 ) -> Tuple[Decision, float]:
    """Best configs per stream under a fixed allocation, and their mean accuracy.

    Streams with no admissible inference config contribute zero accuracy.
    """
    units = {job: int(share / spec.delta) for job, share in alloc.shares().items()}
    decision, mean = _Evaluator(jobs, spec, window_s, inference_configs)(units)
    _warn_infeasible(decision)
    return decision, mean


def fair_allocation(jobs: Sequence[StreamJobs], spec: ClusterSpec) -> Dict[JobId, int]:
    """Equal split across streams, then 50/50 between a stream's two jobs.

    Rounded down to ``delta``; leftover units go to inference jobs in
    stream order.
    """
    return _static_split(jobs, spec, inference_weight=Fraction(1, 2))


def _static_split(jobs: Sequence[StreamJobs], spec: ClusterSpec, inference_weight) -> Dict[JobId, int]:
    if not jobs:
        raise SchedulerError("no jobs to schedule")
    n = len(jobs)
    per_stream, leftover = divmod(spec.units, n)
    w = Fraction(inference_weight) if not isinstance(inference_weight, float) \
        else Fraction(str(inference_weight))
    units = {}
    for i, job in enumerate(jobs):
        mine = per_stream + (1 if i < leftover else 0)
        inf_id = JobId(job.stream, INFERENCE)
        if job.has_retraining:
            retrain = math.floor(per_stream * (1 - w))
            units[JobId(job.stream, RETRAIN)] = retrain
            units[inf_id] = mine - retrain
        else:
            units[inf_id] = mine
    return units


def _job_order(jobs: Sequence[StreamJobs]) -> List[JobId]:
    return sorted(j for job in jobs for j in job.job_ids())


def thief_schedule(jobs: Sequence[StreamJobs], spec: ClusterSpec, window_s: float,
                   inference_configs: Sequence[InferenceConfig]) -> ScheduleResult:
    """Greedy resource stealing over all (thief, victim) job pairs.

    Every job takes a turn as thief against every other job as victim,
    moving ``spec.steal_quantum`` at a time while the mean estimated
    accuracy strictly improves. Jobs are visited in ascending id order.
    """
    if not jobs:
        raise SchedulerError("no jobs to schedule")
    evaluate = _Evaluator(jobs, spec, window_s, inference_configs)
    order = _job_order(jobs)
    q = spec.quantum_units

    best = fair_allocation(jobs, spec)
    best_decision, best_acc = evaluate(best)
    accepted = [best_acc]
    attempts = 0
    for thief in order:
        for victim in order:
            if thief == victim:
                continue
            temp = dict(best)
            while True:
                temp[victim] -= q
                temp[thief] += q
                if temp[victim] < 0:
                    break
                attempts += 1
                decision, acc = evaluate(temp)
                if acc > best_acc + IMPROVEMENT_EPS:
                    best, best_acc, best_decision = dict(temp), acc, decision
                    accepted.append(acc)
                else:
                    break
    _warn_infeasible(best_decision)
    log.debug("thief: %d steal attempts, %d accepted, accuracy %.4f",
              attempts, len(accepted) - 1, best_acc)
    return ScheduleResult(Allocation(best, spec.delta), best_decision, best_acc, accepted, attempts)


FixedConfigs = Union[None, str, Mapping[str, str]]


def _fixed_config_for(job: StreamJobs, fixed: FixedConfigs) -> Optional[RetrainConfig]:
    if job.fixed_config is not None:
        return job.fixed_config
    if not job.candidates:
        return None
    if fixed is None:
        # Highest estimated accuracy first, the usual hyperparameter-tuning habit.
        avail = [c for c in job.candidates if c.id in job.estimates and job.estimates[c.id].available]
        if not avail:
            return None
        return min(avail, key=lambda c: (-job.estimates[c.id].predicted_accuracy,
                                         _retrain_cost(c, job.estimates), c.id))
    cid = fixed if isinstance(fixed, str) else fixed.get(job.stream)
    if cid is None:
        return None
    for c in job.candidates:
        if c.id == cid:
            return c
    raise SchedulerError(f"{job.stream}: fixed retraining config {cid!r} not among candidates")


def uniform_schedule(jobs: Sequence[StreamJobs], spec: ClusterSpec, window_s: float,
                     inference_configs: Sequence[InferenceConfig], fixed_configs: FixedConfigs = None,
                     inference_weight: float = 0.5) -> ScheduleResult:
    """Static baseline: equal share per stream, fixed inference/retraining split.

    Every stream retrains with its fixed config (``None`` picks the most
    accurate candidate). A config that cannot finish in the window still
    runs but leaves the old model serving all window.
    """
    if not 0 < inference_weight < 1:
        raise SchedulerError("inference_weight must be in (0, 1)")
    units = _static_split(jobs, spec, inference_weight)
    decision = {}
    for job in jobs:
        cfg = _fixed_config_for(job, fixed_configs)
        iu = units.get(JobId(job.stream, INFERENCE), 0)
        ru = units.get(JobId(job.stream, RETRAIN), 0)
        choice = _stream_choice(job, iu, ru, spec, window_s, inference_configs, configs=[cfg])
        if choice.retrain_config is None and cfg is not None:
            # Could not finish in the window: it still runs, at stale accuracy.
            acc = choice.infer_config.accuracy(job.stale_accuracy) if choice.feasible else 0.0
            choice = StreamChoice(cfg, choice.infer_config, choice.retrain_share,
                                  choice.infer_share, acc, choice.feasible)
        decision[job.stream] = choice
    mean = _mean(c.accuracy for c in decision.values())
    return ScheduleResult(Allocation(units, spec.delta), decision, mean, [mean], 0)


def inference_only_schedule(jobs: Sequence[StreamJobs], spec: ClusterSpec, window_s: float,
                            inference_configs: Sequence[InferenceConfig]) -> ScheduleResult:
    """No retraining: GPUs split evenly across inference jobs."""
    bare = [StreamJobs(j.stream, j.stale_accuracy) for j in jobs]
    units = _static_split(bare, spec, 1)
    evaluate = _Evaluator(bare, spec, window_s, inference_configs)
    decision, mean = evaluate(units)
    return ScheduleResult(Allocation(units, spec.delta), decision, mean, [mean], 0)


BRUTE_FORCE_LIMITS = dict(streams=3, retrain_configs=4, inference_configs=4, units=12)


def brute_force_schedule(jobs: Sequence[StreamJobs], spec: ClusterSpec, window_s: float,
                         inference_configs: Sequence[InferenceConfig]) -> ScheduleResult:
    """Exhaustive optimum over per-stream (retrain cfg, infer cfg, R, I) choices.

    Enumerates every admissible choice per stream and every combination of
    per-stream (R, I) unit counts whose total fits the cluster. A stream
    with no admissible choice contributes zero. Only for tiny instances.
    """
    lim = BRUTE_FORCE_LIMITS
    if (len(jobs) > lim["streams"] or spec.units > lim["units"]
            or len(inference_configs) > lim["inference_configs"]
            or any(len(j.candidates) > lim["retrain_configs"] for j in jobs)):
        raise SchedulerError("instance too large for brute-force enumeration")
    if not jobs:
        raise SchedulerError("no jobs to schedule")

    U = spec.units
    tables = []
    for job in jobs:
        table = {}
        retrain_opts = ([job.fixed_config] if job.fixed_config is not None
                        else [None, *job.candidates])
        for r in range(U + 1 if job.has_retraining else 1):
            for i in range(U + 1 - r):
                best = None
                for cfg in retrain_opts:
                    for lam in inference_configs:
                        infer_share = i * spec.delta
                        if not lam.gpu_demand < infer_share:
                            continue
                        if lam.accuracy(job.stale_accuracy) < spec.a_min:
                            continue
                        if cfg is not None and r == 0 and job.fixed_config is None:
                            continue
                        acc = estimate_window_accuracy(job.stale_accuracy, cfg, lam, r * spec.delta,
                                                       window_s, job.estimates.get(cfg.id) if cfg else None,
                                                       job.progress)
                        if acc == INFEASIBLE:
                            if job.fixed_config is None:
                                continue
                            acc = lam.accuracy(job.stale_accuracy)
                        if best is None or acc > best[0]:
                            best = (acc, cfg, lam)
                table[(r, i)] = best
        tables.append(table)

    best_total, best_pick = -math.inf, None
    for combo in itertools.product(*(sorted(t) for t in tables)):
        if sum(r + i for r, i in combo) > U:
            continue
        total = math.fsum(t[c][0] if t[c] else 0.0 for t, c in zip(tables, combo))
        if total > best_total:
            best_total, best_pick = total, combo

    units, decision = {}, {}
    for job, table, (r, i) in zip(jobs, tables, best_pick):
        if job.has_retraining:
            units[JobId(job.stream, RETRAIN)] = r
        units[JobId(job.stream, INFERENCE)] = i
        entry = table[(r, i)]
        if entry is None:
            lam, _ = choose_inference(i * spec.delta, job.stale_accuracy, inference_configs, spec.a_min)
            decision[job.stream] = StreamChoice(None, lam, r * spec.delta, i * spec.delta, 0.0, False)
        else:
            acc, cfg, lam = entry
            decision[job.stream] = StreamChoice(cfg, lam, r * spec.delta, i * spec.delta, acc, True)
    mean = best_total / len(jobs)
    return ScheduleResult(Allocation(units, spec.delta), decision, mean, [mean], 0)
