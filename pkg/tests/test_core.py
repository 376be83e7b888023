from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from edgesched.core import (INFERENCE, RETRAIN, Allocation, ClusterSpec, ConfigProfile,
                            InferenceConfig, JobId, RetrainConfig, RetrainWindow, StreamChoice,
                            WindowTrace, Workload, as_fraction, check_decision, validate_trace,
                            validate_workload)


def _trace(dist=(0.5, 0.5), curve=((1, 0.5), (2, 0.6)), n_profiles=1):
    profiles = {}
    for i in range(n_profiles):
        cfg = RetrainConfig(f"c{i}", 2)
        profiles[cfg.id] = ConfigProfile("s", 0, cfg, curve, 3.0, 0.6)
    return WindowTrace("s", 0, dist, 0.5, profiles)


def test_well_formed_trace_has_no_violations():
    assert validate_trace(_trace()) == []


def test_distribution_sum_violation():
    assert validate_trace(_trace(dist=(0.5, 0.6))) == ["distribution sums to 1.1"]


def test_epoch_order_violation():
    assert validate_trace(_trace(curve=((2, 0.5), (1, 0.6)))) == ["epochs not increasing"]


def test_violations_name_the_config_when_ambiguous():
    problems = validate_trace(_trace(curve=((2, 0.5), (1, 0.6)), n_profiles=2))
    assert problems == ["c0: epochs not increasing", "c1: epochs not increasing"]


def test_out_of_range_values_reported():
    tr = _trace(curve=((1, 1.5),))
    tr.stale_accuracy = -0.1
    problems = validate_trace(tr)
    assert any("stale accuracy" in p for p in problems)
    assert any("outside [0, 1]" in p for p in problems)


def test_distribution_tolerance():
    assert validate_trace(_trace(dist=(0.5, 0.5 + 5e-10))) == []
    assert validate_trace(_trace(dist=(0.5, 0.5 + 5e-9))) != []


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(data_fraction=0.0), dict(data_fraction=1.5),
                                dict(batch_size=0), dict(frozen_layers=-1)])
def test_retrain_config_rejects_bad_fields(kw):
    args = dict(id="x", epochs=3)
    args.update(kw)
    with pytest.raises(ValueError):
        RetrainConfig(**args)


@pytest.mark.parametrize("demand,factor", [(0, 0.5), (1.1, 0.5), (0.5, 0), (0.5, 1.2)])
def test_inference_config_ranges(demand, factor):
    with pytest.raises(ValueError):
        InferenceConfig("x", demand, factor)


def test_inference_accuracy_is_multiplicative():
    assert InferenceConfig("x", 0.5, 0.75).accuracy(0.8) == pytest.approx(0.6)


def test_window_duration_positive():
    with pytest.raises(ValueError):
        RetrainWindow(0, 0.0)


def test_cluster_spec_exact_fractions():
    spec = ClusterSpec(3, delta=0.1, steal_quantum=0.3)
    assert spec.delta == Fraction(1, 10)
    assert spec.units == 30 and spec.quantum_units == 3


@pytest.mark.parametrize("kw", [dict(gpus=0), dict(delta=0.3), dict(delta=0), dict(steal_quantum=0.15),
                                dict(a_min=1.5)])
def test_cluster_spec_invariants(kw):
    args = dict(gpus=2, delta=0.1, steal_quantum=0.1)
    args.update(kw)
    with pytest.raises(ValueError):
        ClusterSpec(**args)


def test_as_fraction_uses_decimal_repr():
    assert as_fraction(0.1) == Fraction(1, 10)
    assert as_fraction(3) == 3


def test_allocation_capacity_and_negatives():
    d = Fraction(1, 4)
    ok = Allocation({JobId("a", INFERENCE): 4, JobId("a", RETRAIN): 4}, d)
    assert ok.violations(2) == [] and ok.total() == 2
    over = Allocation({JobId("a", INFERENCE): 5, JobId("a", RETRAIN): 4}, d)
    assert any("exceeds" in p for p in over.violations(2))
    neg = Allocation({JobId("a", INFERENCE): -1}, d)
    assert any("negative" in p for p in neg.violations(2))


def test_job_id_order_puts_inference_first():
    assert sorted([JobId("b", RETRAIN), JobId("a", RETRAIN), JobId("a", INFERENCE)]) == [
        JobId("a", INFERENCE), JobId("a", RETRAIN), JobId("b", RETRAIN)]


def test_check_decision_exactly_one_per_stream():
    lam = InferenceConfig("x", 0.5, 1.0)
    choice = StreamChoice(None, lam, Fraction(0), Fraction(1), 0.5)
    assert check_decision({"a": choice}, ["a"]) == []
    assert check_decision({"a": choice}, ["a", "b"]) != []
    assert check_decision({"a": choice, "z": choice}, ["a"]) != []


def test_validate_workload_no_streams():
    assert "no streams" in validate_workload(Workload(10.0, {}, [InferenceConfig("x", 0.5, 1)]))


def test_validate_workload_window_order():
    a, b = _trace(), _trace()
    wl = Workload(10.0, {"s": [a, b]}, [InferenceConfig("x", 0.5, 1)])
    assert any("strictly increasing" in p for p in validate_workload(wl))


def test_profile_gpu_seconds_scale_with_data():
    cfg = RetrainConfig("c", 4, data_fraction=0.5)
    prof = ConfigProfile("s", 0, cfg, ((1, 0.5),), 10.0, 0.6)
    assert prof.retrain_gpu_seconds == 20.0
    assert prof.accuracy_at(1) == 0.5 and prof.accuracy_at(3) is None


@given(st.lists(st.integers(0, 40), min_size=1, max_size=8), st.integers(1, 10))
def test_allocation_total_is_exact(units, inv_delta):
    d = Fraction(1, inv_delta)
    alloc = Allocation({JobId(f"s{i}", INFERENCE): u for i, u in enumerate(units)}, d)
    assert alloc.total() == Fraction(sum(units), inv_delta)
    assert (alloc.total() <= 4) == (alloc.violations(4) == [])
