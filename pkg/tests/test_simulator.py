import math
import random
from fractions import Fraction

import pytest

from conftest import random_trace, random_workload
from edgesched.core import (ClusterSpec, ConfigProfile, InferenceConfig, RetrainConfig, WindowTrace,
                            Workload)
from edgesched.profiler import CurveModel, ground_truth_estimates
from edgesched.scheduler import estimate_window_accuracy
from edgesched.simulator import (Event, NetworkSpec, SchedulerChoice, SimOptions, SimulationError,
                                 adapt_estimates, audit, cached_model_baseline, cloud_offload_time,
                                 cloud_window_accuracy, run_experiment, run_window)
from edgesched.workload import TOY_A_MIN, TOY_GPUS, generate_synthetic, SyntheticSpec, toy_scenario

LAM = [InferenceConfig("full", 0.1, 1.0)]
THIEF, NONE = SchedulerChoice("thief"), SchedulerChoice("none")


def _profile(cid, epochs, per_epoch, curve, stream="s", window=0, data_fraction=1.0):
    cfg = RetrainConfig(cid, epochs, data_fraction=data_fraction)
    pts = tuple((k, float(curve.accuracy(k))) for k in range(1, epochs + 1))
    return ConfigProfile(stream, window, cfg, pts, per_epoch, pts[-1][1])


def _toy_spec():
    return ClusterSpec(TOY_GPUS, delta=0.25, steal_quantum=0.25, a_min=TOY_A_MIN)


def test_none_scheduler_is_flat_at_stale():
    wl = random_workload(random.Random(1), n_streams=3, n_windows=1)
    tl, m = run_window(wl.window(0), NONE, ClusterSpec(1), wl.window_duration_s, LAM)
    for sid, tr in wl.window(0).items():
        assert tl.accuracy[sid] == [(0.0, wl.window_duration_s, tr.stale_accuracy)]
    assert m.mean_acc == pytest.approx(sum(t.stale_accuracy for t in wl.window(0).values()) / 3)
    assert audit(tl, m) == []


def test_all_none_experiment_reads_stale_from_trace():
    wl = random_workload(random.Random(2), n_streams=2, n_windows=3)
    wl.inference_configs = LAM
    res = run_experiment(wl, NONE, ClusterSpec(1))
    for w, m in enumerate(res.metrics):
        for sid, sm in m.streams.items():
            assert sm.mean_acc == pytest.approx(wl.streams[sid][w].stale_accuracy)


def test_single_stream_matches_closed_form():
    curve = CurveModel(0.4, 1.5, 0.05)
    prof = _profile("c", 6, 10.0, curve)
    trace = WindowTrace("s", 0, (1.0,), 0.4, {"c": prof})
    spec = ClusterSpec(1, delta=0.5, steal_quantum=0.5)
    tl, m = run_window({"s": trace}, THIEF, spec, 200.0, LAM)
    realloc = tl.events[1]
    assert realloc.kind == "reallocation"
    share = Fraction(realloc.payload["shares"]["s/retrain"])
    expected = estimate_window_accuracy(0.4, prof.config, LAM[0], share, 200.0,
                                        ground_truth_estimates(trace)["c"])
    assert m.streams["s"].mean_acc == pytest.approx(expected, abs=1e-12)
    assert m.streams["s"].completed


def test_events_are_ordered_and_in_window():
    wl = random_workload(random.Random(3), n_streams=3, n_windows=1)
    tl, m = run_window(wl.window(0), THIEF, ClusterSpec(2), 100.0, wl.inference_configs)
    keys = [e.sort_key() for e in tl.events]
    assert keys == sorted(keys)
    assert tl.events[0].kind == "window_start" and tl.events[-1].kind == "window_end"
    assert audit(tl, m) == []


def test_reallocates_after_each_completion():
    tl, _ = run_window(toy_scenario().window(0), THIEF, _toy_spec(), 120.0,
                       toy_scenario().inference_configs)
    kinds = [e.kind for e in tl.events]
    completions = kinds.count("retrain_complete")
    assert completions >= 1
    assert kinds.count("reallocation") == completions + 1


def test_missing_profile_for_scheduled_config():
    trace = random_trace(random.Random(4))
    cfg = RetrainConfig("ghost", 1)
    est = {"ghost": ground_truth_estimates(trace)["c0"].__class__("ghost", 0.99, 0.1, "ground_truth")}
    with pytest.raises(SimulationError):
        run_window({"s0": trace}, THIEF, ClusterSpec(1), 100.0, LAM,
                   estimates={"s0": est}, candidates={"s0": [cfg]})


def test_no_streams():
    with pytest.raises(SimulationError):
        run_window({}, THIEF, ClusterSpec(1), 10.0, LAM)


def test_carry_over_two_windows():
    # window 0: retraining finishes; window 1's starting accuracy is window 0's post accuracy
    curve = CurveModel(1.0, 2.0, 0.05)
    w0 = WindowTrace("s", 0, (1.0,), 0.3, {"c": _profile("c", 2, 5.0, curve)})
    w1 = WindowTrace("s", 1, (1.0,), 0.2, {})
    wl = Workload(100.0, {"s": [w0, w1]}, LAM)
    res = run_experiment(wl, THIEF, ClusterSpec(1, delta=0.5))
    post = w0.profiles["c"].post_retrain_accuracy
    assert res.metrics[0].streams["s"].completed
    assert res.metrics[1].streams["s"].mean_acc == pytest.approx(post)
    res_none = run_experiment(wl, NONE, ClusterSpec(1, delta=0.5))
    assert res_none.metrics[1].streams["s"].mean_acc == pytest.approx(0.2)


def test_deterministic_metrics():
    wl = random_workload(random.Random(5), n_streams=3, n_windows=2)
    opts = SimOptions(estimator="microprofile", timing=False, seed=3)
    a = run_experiment(wl, THIEF, ClusterSpec(2), opts)
    b = run_experiment(wl, THIEF, ClusterSpec(2), opts)
    assert a.metrics == b.metrics
    assert [t.to_dict() for t in a.timelines] == [t.to_dict() for t in b.timelines]


def test_labeling_surcharge():
    wl = random_workload(random.Random(6), n_streams=1, n_windows=1)
    spec = ClusterSpec(1, delta=0.5)
    base = run_experiment(wl, SchedulerChoice("uniform"), spec, SimOptions(labeling_overhead=0.0))
    extra = run_experiment(wl, SchedulerChoice("uniform"), spec)
    assert extra.metrics[0].total("retrain_gpu_s") == pytest.approx(
        1.03 * base.metrics[0].total("retrain_gpu_s"))


def test_toy_a_min_never_violated_by_thief():
    wl = toy_scenario()
    res = run_experiment(wl, THIEF, _toy_spec())
    for tl in res.timelines:
        for pieces in tl.accuracy.values():
            assert min(a for _, _, a in pieces) >= TOY_A_MIN


def test_toy_camera_b_retrains_first():
    wl = toy_scenario()
    tl = run_experiment(wl, THIEF, _toy_spec()).timelines[0]
    first = tl.events[1].payload
    assert Fraction(first["shares"]["B/retrain"]) > Fraction(first["shares"].get("A/retrain", "0"))
    done = [e.stream for e in tl.events if e.kind == "retrain_complete"]
    assert done[0] == "B"


def test_profiling_cost_charged_to_thief_only():
    wl = random_workload(random.Random(7), n_streams=2, n_windows=1)
    opts = SimOptions(estimator="microprofile")
    th = run_experiment(wl, THIEF, ClusterSpec(1), opts)
    un = run_experiment(wl, SchedulerChoice("uniform"), ClusterSpec(1), opts)
    assert th.metrics[0].total("profiling_gpu_s") > 0
    assert un.metrics[0].total("profiling_gpu_s") == 0


def test_history_estimator_runs_and_reuses():
    wl = generate_synthetic(SyntheticSpec(streams=2, windows=3, drift=0.0))
    res = run_experiment(wl, THIEF, ClusterSpec(1, delta=0.05), SimOptions(estimator="history"))
    costs = [m.total("profiling_gpu_s") for m in res.metrics]
    assert costs[0] > 0 and costs[-1] < costs[0]


# -- checkpointing -------------------------------------------------------------------------

def _slow_trace():
    curve = CurveModel(0.3, 1.2, 0.05)
    return {"s": WindowTrace("s", 0, (1.0,), 0.3, {"c": _profile("c", 10, 8.0, curve)})}


def test_checkpoint_free_raises_accuracy_early():
    spec = ClusterSpec(1, delta=0.5, steal_quantum=0.5)
    tl0, m0 = run_window(_slow_trace(), THIEF, spec, 200.0, LAM)
    tl1, m1 = run_window(_slow_trace(), THIEF, spec, 200.0, LAM, SimOptions(checkpoint=True))
    assert any(e.kind == "checkpoint" for e in tl1.events)
    assert m1.mean_acc >= m0.mean_acc
    assert audit(tl1, m1) == []


def test_costly_checkpoint_delays_completion():
    spec = ClusterSpec(1, delta=0.5, steal_quantum=0.5)
    opts = SimOptions(checkpoint=True, checkpoint_cost_s=1.0)
    tl, _ = run_window(_slow_trace(), THIEF, spec, 200.0, LAM, opts)
    tl0, _ = run_window(_slow_trace(), THIEF, spec, 200.0, LAM)
    n_ckpt = sum(e.kind == "checkpoint" for e in tl.events)
    done = [e.time_s for e in tl.events if e.kind == "retrain_complete"]
    done0 = [e.time_s for e in tl0.events if e.kind == "retrain_complete"]
    assert n_ckpt > 0
    assert done[0] == pytest.approx(done0[0] + n_ckpt * 1.0)


# -- adaptation -----------------------------------------------------------------------------

def test_adapt_no_change_when_prediction_matches():
    curve = CurveModel(0.4, 1.5, 0.05)
    prof = _profile("c", 10, 1.0, curve)
    est = ground_truth_estimates(WindowTrace("s", 0, (1.0,), 0.3, {"c": prof}))["c"]
    new, changed = adapt_estimates(prof.config, prof, 4, est, 2)
    assert not changed and new == est


def test_adapt_lowers_overoptimistic_estimate():
    curve = CurveModel(0.4, 1.5, 0.05)
    prof = _profile("c", 10, 1.0, curve)
    est = ground_truth_estimates(WindowTrace("s", 0, (1.0,), 0.3, {"c": prof}))["c"]
    optimistic = est.__class__("c", min(1.0, est.predicted_accuracy * 1.2), 1.0, "microprofile")
    new, changed = adapt_estimates(prof.config, prof, 4, optimistic, 2)
    assert changed and new.predicted_accuracy < optimistic.predicted_accuracy


def test_adapt_every_beyond_epochs_never_fires():
    curve = CurveModel(0.4, 1.5, 0.05)
    prof = _profile("c", 5, 1.0, curve)
    est = ground_truth_estimates(WindowTrace("s", 0, (1.0,), 0.3, {"c": prof}))["c"]
    wrong = est.__class__("c", 0.99, 1.0, "microprofile")
    for k in range(1, 6):
        assert adapt_estimates(prof.config, prof, k, wrong, 10) == (wrong, False)


def test_adaptation_in_simulation_emits_updates():
    curve = CurveModel(0.4, 1.5, 0.05)
    trace = WindowTrace("s", 0, (1.0,), 0.3, {"c": _profile("c", 10, 2.0, curve)})
    wrong = {"c": ground_truth_estimates(trace)["c"].__class__("c", 0.99, 2.0, "microprofile")}
    tl, m = run_window({"s": trace}, THIEF, ClusterSpec(1, delta=0.5), 200.0, LAM,
                       SimOptions(adapt_every=2), estimates={"s": wrong})
    updates = [e for e in tl.events if e.kind == "estimate_update"]
    assert updates and updates[0].payload["new"] < 0.99
    assert audit(tl, m) == []


# -- cached model / cloud -----------------------------------------------------------------------

def test_cached_exact_current_model():
    tr = random_trace(random.Random(8))
    assert cached_model_baseline(tr, [(tr.class_distribution, tr.stale_accuracy)]) == tr.stale_accuracy


def test_cached_nearest_entry():
    tr = WindowTrace("s", 0, (0.5, 0.5), 0.4, {})
    near = ((0.5 + 0.1 / math.sqrt(2), 0.5 - 0.1 / math.sqrt(2)), 0.7)
    far = ((0.5 + 0.3 / math.sqrt(2), 0.5 - 0.3 / math.sqrt(2)), 0.9)
    assert cached_model_baseline(tr, [far, near]) == 0.7
    assert cached_model_baseline(tr, [far, near], threshold=0.05) == 0.4


def test_cached_empty_cache():
    with pytest.raises(SimulationError):
        cached_model_baseline(WindowTrace("s", 0, (1.0,), 0.4, {}), [])


def test_cached_below_thief_on_synthetic():
    wl = generate_synthetic(SyntheticSpec())
    spec = ClusterSpec(4, delta=0.05, steal_quantum=0.1)
    cached = run_experiment(wl, SchedulerChoice("cached"), spec)
    thief = run_experiment(wl, THIEF, spec)
    assert cached.mean_acc < thief.mean_acc
    # all GPUs go to inference
    assert cached.metrics[0].total("retrain_gpu_s") == 0


def test_cloud_offload_examples():
    assert cloud_offload_time(NetworkSpec(5.1, 17.5, 398, 160, 8)) == pytest.approx(432, abs=2)
    assert cloud_offload_time(NetworkSpec(5.1, 17.3, 398, 320, 5)) == pytest.approx(428, abs=2)
    assert cloud_offload_time(NetworkSpec(5.1, 17.3, 0, 0, 5)) == 0


def test_cloud_speedup_knob_and_accuracy():
    net = NetworkSpec(5.1, 17.5, 398, 160, 8)
    assert cloud_offload_time(net, 100.0, speedup=10) == pytest.approx(cloud_offload_time(net) + 10)
    assert cloud_window_accuracy(0.5, 0.9, 60, 120) == pytest.approx(0.7)
    assert cloud_window_accuracy(0.5, 0.9, 500, 120) == 0.5


def test_network_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(0, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        NetworkSpec(1, 1, 1, 1, 0)


def _gap(wl, n, spec):
    sub = wl.subset(sorted(wl.streams)[:n])
    return (run_experiment(sub, THIEF, spec).mean_acc
            - run_experiment(sub, SchedulerChoice("uniform"), spec).mean_acc)


def test_thief_beats_uniform_at_one_gpu():
    wl = generate_synthetic(SyntheticSpec())
    assert _gap(wl, 10, ClusterSpec(1, delta=0.05, steal_quantum=0.1)) >= 0.10


@pytest.mark.xfail(strict=True, reason="on this synthetic workload the gap shrinks as streams are added")
def test_gap_grows_with_streams_at_fixed_gpus():
    wl = generate_synthetic(SyntheticSpec())
    spec = ClusterSpec(1, delta=0.05, steal_quantum=0.1)
    gaps = [_gap(wl, n, spec) for n in (2, 4, 6, 8, 10)]
    assert all(b > a for a, b in zip(gaps, gaps[1:]))
