"""Scheduling joint retraining and inference of video models on shared edge GPUs.

The library estimates how accurate each stream's model will be over a
retraining window, splits GPUs between inference and retraining jobs with a
greedy resource-stealing scheduler, and replays schedules against recorded
or synthetic accuracy traces.
"""

from .core import (ClusterSpec, InferenceConfig, RetrainConfig, WindowTrace, Workload)
from .scheduler import (StreamJobs, brute_force_schedule, estimate_window_accuracy,
                        thief_schedule, uniform_schedule)
from .simulator import (NetworkSpec, SchedulerChoice, SimOptions, cloud_offload_time,
                        run_experiment, run_window)
from .workload import generate_synthetic, load_workload, save_workload, toy_scenario

__version__ = "0.1.0"
