import math
import random
import warnings

import numpy as np
import pytest
from hypothesis import settings

from edgesched.core import (ClusterSpec, ConfigProfile, InferenceConfig, RetrainConfig,
                            WindowTrace, Workload)
from edgesched.profiler import CurveModel, ProfileEstimate
from edgesched.scheduler import InfeasibleStreamWarning, StreamJobs

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _quiet_infeasible():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InfeasibleStreamWarning)
        yield


def random_curve(rng: random.Random) -> CurveModel:
    """Curve drawn from the ranges the tests share; rejects near-useless curves."""
    while True:
        m = CurveModel(rng.uniform(0.1, 1.0), rng.uniform(0.5, 3.0), rng.uniform(0.0, 0.3))
        if m.accuracy(1) >= 0.05:
            return m


def random_jobs(rng: random.Random, n_streams=2, n_configs=3, n_inference=2, window_s=100.0):
    """Tiny scheduling instance: (jobs, inference configs)."""
    inference = [InferenceConfig(f"i{j}", round(rng.uniform(0.05, 0.9), 3),
                                 round(rng.uniform(0.4, 1.0), 3)) for j in range(n_inference)]
    jobs = []
    for s in range(n_streams):
        stale = round(rng.uniform(0.2, 0.7), 3)
        cands, est = [], {}
        for c in range(rng.randint(0, n_configs)):
            cfg = RetrainConfig(f"s{s}c{c}", rng.randint(1, 8),
                                data_fraction=rng.choice([0.25, 0.5, 1.0]))
            cands.append(cfg)
            est[cfg.id] = ProfileEstimate(cfg.id, round(rng.uniform(stale, 1.0), 3),
                                          round(rng.uniform(1.0, 20.0), 3), "ground_truth")
        jobs.append(StreamJobs(f"s{s}", stale, cands, est))
    return jobs, inference


def random_trace(rng: random.Random, stream="s0", window=0, n_configs=3, epochs_max=10,
                 cost_max=20.0, classes=3) -> WindowTrace:
    dist = [rng.random() + 0.01 for _ in range(classes)]
    total = math.fsum(dist)
    dist = tuple(x / total for x in dist)
    stale = round(rng.uniform(0.2, 0.7), 4)
    profiles = {}
    for c in range(n_configs):
        cfg = RetrainConfig(f"c{c}", rng.randint(1, epochs_max),
                            data_fraction=rng.choice([0.25, 0.5, 1.0]))
        curve = random_curve(rng)
        pts = tuple((k, float(np.clip(curve.accuracy(k), 0, 1))) for k in range(1, cfg.epochs + 1))
        profiles[cfg.id] = ConfigProfile(stream, window, cfg, pts, round(rng.uniform(1, cost_max), 3),
                                         pts[-1][1])
    return WindowTrace(stream, window, dist, stale, profiles)


def random_workload(rng: random.Random, n_streams=2, n_windows=2, n_configs=3,
                    window_s=100.0, n_inference=2) -> Workload:
    streams = {f"s{s}": [random_trace(rng, f"s{s}", w, n_configs) for w in range(n_windows)]
               for s in range(n_streams)}
    inference = [InferenceConfig(f"i{j}", round(rng.uniform(0.02, 0.5), 3),
                                 round(rng.uniform(0.5, 1.0), 3)) for j in range(n_inference)]
    return Workload(window_s, streams, inference)


ACCEPTANCE_LINES = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    """Log one acceptance line (echoed in the terminal summary) and fail the test if needed."""
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
