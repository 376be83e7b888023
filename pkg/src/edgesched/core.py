"""Domain types shared by the profiler, schedulers and simulator.

GPU shares are kept as exact multiples of the allocation unit ``delta``:
schedulers work on integer unit counts and :class:`Allocation` converts
them to :class:`fractions.Fraction` shares on demand, so capacity checks
never suffer from floating-point drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

INFERENCE = "inference"
RETRAIN = "retrain"

DIST_TOL = 1e-9


def as_fraction(value) -> Fraction:
    """Exact conversion that treats floats by their shortest repr (0.1 -> 1/10)."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    return Fraction(str(value))


@dataclass(frozen=True)
class RetrainWindow:
    index: int
    duration_s: float

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError(f"window duration must be positive, got {self.duration_s}")


@dataclass(frozen=True)
class RetrainConfig:
    """One retraining hyperparameter point. ``None`` stands for "do not retrain"."""

    id: str
    epochs: int
    batch_size: int = 32
    last_layer_neurons: int = 64
    frozen_layers: int = 0
    data_fraction: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"{self.id}: epochs must be >= 1")
        if not 0 < self.data_fraction <= 1:
            raise ValueError(f"{self.id}: data_fraction must be in (0, 1]")
        if self.batch_size < 1 or self.last_layer_neurons < 1 or self.frozen_layers < 0:
            raise ValueError(f"{self.id}: invalid layer/batch settings")

    def gpu_seconds(self, gpu_seconds_per_epoch_full: float) -> float:
        """GPU-time of a full retraining run at 100% of one GPU."""
        return self.epochs * gpu_seconds_per_epoch_full * self.data_fraction


@dataclass(frozen=True)
class InferenceConfig:
    id: str
    gpu_demand: float
    accuracy_factor: float

    def __post_init__(self):
        if not 0 < self.gpu_demand <= 1:
            raise ValueError(f"{self.id}: gpu_demand must be in (0, 1]")
        if not 0 < self.accuracy_factor <= 1:
            raise ValueError(f"{self.id}: accuracy_factor must be in (0, 1]")

    def accuracy(self, model_accuracy: float) -> float:
        return model_accuracy * self.accuracy_factor


@dataclass(frozen=True)
class ClusterSpec:
    """Cluster size and the scheduler's allocation granularity.

    ``delta`` is the smallest unit of GPU allocation and ``steal_quantum``
    the amount moved per steal; both are stored as exact fractions.
    """

    gpus: int
    delta: Fraction = Fraction(1, 10)
    steal_quantum: Optional[Fraction] = None  # defaults to delta
    a_min: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "delta", as_fraction(self.delta))
        quantum = self.delta if self.steal_quantum is None else as_fraction(self.steal_quantum)
        object.__setattr__(self, "steal_quantum", quantum)
        if self.gpus < 1:
            raise ValueError("gpus must be a positive integer")
        if not 0 < self.delta <= 1 or (1 / self.delta).denominator != 1:
            raise ValueError(f"delta must be in (0, 1] with 1/delta integral, got {self.delta}")
        ratio = self.steal_quantum / self.delta
        if self.steal_quantum <= 0 or ratio.denominator != 1:
            raise ValueError("steal_quantum must be a positive multiple of delta")
        if not 0 <= self.a_min <= 1:
            raise ValueError("a_min must be in [0, 1]")

    @property
    def units(self) -> int:
        """Total capacity in delta units."""
        return int(self.gpus / self.delta)

    @property
    def quantum_units(self) -> int:
        return int(self.steal_quantum / self.delta)

    def replace(self, **changes) -> "ClusterSpec":
        kw = dict(gpus=self.gpus, delta=self.delta, steal_quantum=self.steal_quantum, a_min=self.a_min)
        kw.update(changes)
        return ClusterSpec(**kw)


class JobId(NamedTuple):
    stream: str
    kind: str  # INFERENCE or RETRAIN

    def __str__(self):
        return f"{self.stream}/{self.kind}"


@dataclass
class Allocation:
    """GPU shares per job, held as integer counts of ``delta``."""

    units: Dict[JobId, int]
    delta: Fraction

    def share(self, job: JobId) -> Fraction:
        return self.units.get(job, 0) * self.delta

    def shares(self) -> Dict[JobId, Fraction]:
        return {job: u * self.delta for job, u in self.units.items()}

    def total(self) -> Fraction:
        return sum(self.units.values()) * self.delta

    def violations(self, gpus: int) -> List[str]:
        out = []
        for job, u in self.units.items():
            if not isinstance(u, int):
                out.append(f"{job}: share is not a multiple of delta")
            elif u < 0:
                out.append(f"{job}: negative share {u * self.delta}")
        if self.total() > gpus:
            out.append(f"total share {float(self.total()):g} exceeds {gpus} GPUs")
        return out


@dataclass(frozen=True)
class StreamChoice:
    """The (retrain config, inference config, shares) picked for one stream."""

    retrain_config: Optional[RetrainConfig]
    infer_config: InferenceConfig
    retrain_share: Fraction
    infer_share: Fraction
    accuracy: float
    feasible: bool = True


Decision = Dict[str, StreamChoice]


@dataclass(frozen=True)
class ConfigProfile:
    stream: str
    window: int
    config: RetrainConfig
    accuracy_by_epoch: Tuple[Tuple[int, float], ...]
    gpu_seconds_per_epoch_full: float
    post_retrain_accuracy: float

    @property
    def retrain_gpu_seconds(self) -> float:
        return self.config.gpu_seconds(self.gpu_seconds_per_epoch_full)

    def accuracy_at(self, epoch: int) -> Optional[float]:
        for k, a in self.accuracy_by_epoch:
            if k == epoch:
                return a
        return None


@dataclass
class WindowTrace:
    """Ground truth for one retraining window of one stream.

    ``cached_accuracy`` optionally maps an earlier window index ``j`` to the
    accuracy, on this window's data, of the model retrained in window ``j``;
    only the cached-model baseline reads it.
    """

    stream: str
    window: int
    class_distribution: Tuple[float, ...]
    stale_accuracy: float
    profiles: Dict[str, ConfigProfile] = field(default_factory=dict)
    cached_accuracy: Dict[int, float] = field(default_factory=dict)

    def configs(self) -> List[RetrainConfig]:
        return [p.config for p in self.profiles.values()]


@dataclass
class Workload:
    window_duration_s: float
    streams: Dict[str, List[WindowTrace]]
    inference_configs: List[InferenceConfig]

    @property
    def n_windows(self) -> int:
        return min((len(w) for w in self.streams.values()), default=0)

    def window(self, index: int) -> Dict[str, WindowTrace]:
        return {sid: traces[index] for sid, traces in self.streams.items()}

    def subset(self, stream_ids: Sequence[str]) -> "Workload":
        return Workload(self.window_duration_s, {s: self.streams[s] for s in stream_ids},
                        list(self.inference_configs))


def validate_trace(trace: WindowTrace) -> List[str]:
    """Return human-readable invariant violations; empty when the trace is well formed."""
    problems = []
    dist = trace.class_distribution
    if any(p < 0 for p in dist):
        problems.append("distribution has negative entries")
    total = math.fsum(dist)
    if abs(total - 1.0) > DIST_TOL:
        problems.append(f"distribution sums to {total:.6g}")
    if not 0 <= trace.stale_accuracy <= 1:
        problems.append(f"stale accuracy {trace.stale_accuracy} outside [0, 1]")
    for cid, prof in trace.profiles.items():
        where = f"{cid}: " if len(trace.profiles) > 1 else ""
        if cid != prof.config.id:
            problems.append(f"{where}profile keyed as {cid!r} but config id is {prof.config.id!r}")
        epochs = [k for k, _ in prof.accuracy_by_epoch]
        if any(k < 1 for k in epochs):
            problems.append(f"{where}epochs must be >= 1")
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            problems.append(f"{where}epochs not increasing")
        if any(not 0 <= a <= 1 for _, a in prof.accuracy_by_epoch):
            problems.append(f"{where}epoch accuracy outside [0, 1]")
        if not 0 <= prof.post_retrain_accuracy <= 1:
            problems.append(f"{where}post-retrain accuracy outside [0, 1]")
        if not prof.gpu_seconds_per_epoch_full > 0:
            problems.append(f"{where}gpu_seconds_per_epoch_full must be positive")
    for j, a in trace.cached_accuracy.items():
        if not 0 <= a <= 1:
            problems.append(f"cached accuracy for window {j} outside [0, 1]")
    return problems


def validate_workload(workload: Workload) -> List[str]:
    problems = []
    if not workload.streams:
        problems.append("no streams")
    if not workload.window_duration_s > 0:
        problems.append("window_duration_s must be positive")
    if not workload.inference_configs:
        problems.append("no inference configs")
    for sid, traces in workload.streams.items():
        indices = [t.window for t in traces]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            problems.append(f"{sid}: window indices not strictly increasing")
        for t in traces:
            problems.extend(f"{sid}[{t.window}]: {p}" for p in validate_trace(t))
    return problems


def check_decision(decision: Mapping[str, StreamChoice], streams: Sequence[str]) -> List[str]:
    """Exactly one (retrain, inference) pair per stream."""
    problems = []
    missing = set(streams) - set(decision)
    extra = set(decision) - set(streams)
    if missing:
        problems.append(f"no decision for {sorted(missing)}")
    if extra:
        problems.append(f"decision for unknown streams {sorted(extra)}")
    return problems
