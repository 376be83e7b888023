"""Accuracy and cost estimation for retraining configurations.

Two estimators live here. Micro-profiling trains each candidate briefly on a
subsample, fits a loss curve to the accuracy-by-epoch points and
extrapolates to the configuration's full epoch count. The history estimator
averages accuracies achieved in earlier windows whose class distributions
are close to the current one.

The curve family is

    accuracy(k) = 1 - (1 / (beta0 * k + beta1) + beta2),   beta >= 0

fitted by Levenberg-Marquardt steps in which every linearised subproblem is
a non-negative least squares solve.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import RetrainConfig, WindowTrace

NNLS_TOL = 1e-9
NNLS_MAX_ITER = 10_000
# beta1 floor keeps the curve finite at k = 1; beta1 cap encodes "zero loss".
BETA1_MIN = 1e-9
BETA1_MAX = 1e12

DEFAULT_SIGMA = 0.02
DEFAULT_PRUNE_MARGIN = 0.25
DEFAULT_HISTORY_THRESHOLD = 0.2


class ProfilerError(ValueError):
    pass


def nnls(A, b, tol: float = NNLS_TOL, max_iter: int = NNLS_MAX_ITER):
    """Solve ``argmin ||Ax - b||`` subject to ``x >= 0``.

    Lawson-Hanson active-set method. Returns ``(x, residual_norm)``.
    Deterministic: ties in the dual vector resolve to the lowest index.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.shape[0]:
        raise ProfilerError("incompatible dimensions")
    m, n = A.shape
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    scale = max(1.0, float(np.abs(A.T @ b).max(initial=0.0)))
    thresh = tol * scale
    w = A.T @ b
    iterations = 0
    while not passive.all():
        w_active = np.where(passive, -np.inf, w)
        j = int(np.argmax(w_active))
        if w_active[j] <= thresh:
            break
        passive[j] = True
        while True:
            iterations += 1
            if iterations > max_iter:
                raise ProfilerError("nnls did not converge")
            s = np.zeros(n)
            s[passive] = np.linalg.lstsq(A[:, passive], b, rcond=None)[0]
            if (s[passive] > 0).all():
                break
            blocking = passive & (s <= 0)
            alpha = np.min(x[blocking] / (x[blocking] - s[blocking]))
            x = x + alpha * (s - x)
            passive &= x > tol
            x[~passive] = 0.0
        x = s
        w = A.T @ (b - A @ x)
    return x, float(np.linalg.norm(A @ x - b))


@dataclass(frozen=True)
class CurveModel:
    beta0: float
    beta1: float
    beta2: float

    def __post_init__(self):
        if min(self.beta0, self.beta1, self.beta2) < 0:
            raise ProfilerError("curve parameters must be non-negative")
        if self.beta1 <= 0:
            raise ProfilerError("beta1 must be positive")

    def loss(self, k):
        k = np.asarray(k, dtype=float)
        return 1.0 / (self.beta0 * k + self.beta1) + self.beta2

    def accuracy(self, k):
        """Unclamped model accuracy at epoch ``k``."""
        return 1.0 - self.loss(k)


def extrapolate(model: CurveModel, epochs: float) -> float:
    """Predicted accuracy after ``epochs`` epochs, clamped to [0, 1]."""
    if epochs < 1:
        raise ProfilerError("epochs must be >= 1")
    if math.isinf(epochs):
        return min(1.0, max(0.0, 1.0 - model.beta2)) if model.beta0 > 0 else \
            min(1.0, max(0.0, float(model.accuracy(1.0))))
    return min(1.0, max(0.0, float(model.accuracy(epochs))))


def _constant_curve(accuracy: float) -> CurveModel:
    loss = 1.0 - accuracy
    beta1 = BETA1_MAX if loss <= 1.0 / BETA1_MAX else 1.0 / loss
    return CurveModel(0.0, beta1, 0.0)


def _sse(beta, k, loss) -> float:
    u = beta[0] * k + beta[1]
    r = 1.0 / u + beta[2] - loss
    return float(r @ r)


def _initial_guess(k, loss):
    """Grid over the loss floor; each slice is a weighted linear NNLS."""
    floor = max(float(loss.min()), 1e-6)
    best, best_sse = None, math.inf
    for q in np.concatenate([np.linspace(0.0, 0.98, 50), [0.995, 0.999]]):
        beta2 = q * floor
        gap = np.maximum(loss - beta2, 1e-6)
        y = 1.0 / gap
        weight = gap ** 2  # d(loss)/dy, so residuals are measured in loss units
        A = np.column_stack([k, np.ones_like(k)]) * weight[:, None]
        (b0, b1), _ = nnls(A, y * weight)
        b1 = min(max(b1, BETA1_MIN), BETA1_MAX)
        beta = np.array([b0, b1, beta2])
        sse = _sse(beta, k, loss)
        if sse < best_sse:
            best, best_sse = beta, sse
    return best, best_sse


def fit_curve(samples: Sequence[Tuple[float, float]], max_iter: int = 200) -> CurveModel:
    """Least-squares fit of the loss-curve family to (epoch, accuracy) samples."""
    if len(samples) < 2:
        raise ProfilerError("need at least two (epoch, accuracy) samples")
    k = np.array([s[0] for s in samples], dtype=float)
    acc = np.array([s[1] for s in samples], dtype=float)
    if (k < 1).any():
        raise ProfilerError("epochs must be >= 1")
    if ((acc < 0) | (acc > 1)).any():
        raise ProfilerError("accuracies must be in [0, 1]")
    if np.ptp(acc) <= 1e-12:
        return _constant_curve(float(acc.mean()))

    loss = 1.0 - acc
    beta, sse = _initial_guess(k, loss)
    mu = 1e-3
    for _ in range(max_iter):
        if sse <= 1e-30:
            break
        u = beta[0] * k + beta[1]
        r = 1.0 / u + beta[2] - loss
        J = np.column_stack([-k / u ** 2, -1.0 / u ** 2, np.ones_like(k)])
        lam = mu * max(1.0, float(np.trace(J.T @ J)) / 3)
        A = np.vstack([J, math.sqrt(lam) * np.eye(3)])
        rhs = np.concatenate([J @ beta - r, math.sqrt(lam) * beta])
        cand, _ = nnls(A, rhs)
        cand[1] = min(max(cand[1], BETA1_MIN), BETA1_MAX)
        cand_sse = _sse(cand, k, loss)
        if cand_sse < sse:
            gain = sse - cand_sse
            beta, sse = cand, cand_sse
            mu = max(mu / 3, 1e-12)
            if gain <= 1e-15 + 1e-12 * sse:
                break
        else:
            mu *= 4
            if mu > 1e10:
                break
    return CurveModel(float(beta[0]), float(beta[1]), float(beta[2]))


def pareto_frontier(points: Sequence[Tuple[float, float]]) -> set:
    """Indices of (cost, accuracy) points that no other point dominates.

    A point dominates another when it is no more expensive and no less
    accurate, and strictly better in at least one of the two.
    """
    if not points:
        raise ProfilerError("pareto_frontier needs at least one point")
    order = sorted(range(len(points)), key=lambda i: (points[i][0], -points[i][1], i))
    keep = set()
    best_cheaper = -math.inf
    i = 0
    while i < len(order):
        cost = points[order[i]][0]
        group = []
        while i < len(order) and points[order[i]][0] == cost:
            group.append(order[i])
            i += 1
        group_max = max(points[j][1] for j in group)
        for j in group:
            acc = points[j][1]
            if acc >= group_max and best_cheaper < acc:
                keep.add(j)
        best_cheaper = max(best_cheaper, group_max)
    return keep


@dataclass(frozen=True)
class ProfileEstimate:
    config: str
    predicted_accuracy: float
    gpu_seconds_per_epoch_full: float
    source: str  # "microprofile", "history" or "ground_truth"
    available: bool = True


def _frontier_distance(costs: Dict[str, float], accs: Dict[str, float]) -> Dict[str, float]:
    ids = list(costs)
    front = pareto_frontier([(costs[c], accs[c]) for c in ids])
    front_pts = [(costs[ids[i]], accs[ids[i]]) for i in front]
    out = {}
    for c in ids:
        reach = [fc for fc, fa in front_pts if fa >= accs[c]]
        if not reach:
            out[c] = 0.0
            continue
        cheapest = min(reach)
        if cheapest <= 0:
            out[c] = 0.0 if costs[c] <= 0 else math.inf
        else:
            out[c] = max(0.0, costs[c] / cheapest - 1.0)
    return out


def prune_configs(candidates: Sequence[RetrainConfig],
                  history_estimates: Sequence[Sequence[ProfileEstimate]],
                  margin: float = DEFAULT_PRUNE_MARGIN) -> List[RetrainConfig]:
    """Drop candidates that usually sit far from the historical Pareto frontier.

    ``history_estimates`` holds one list of estimates per past window. In each
    window a config's distance is how much more it costs, relatively, than
    the cheapest frontier config at least as accurate. A config is dropped
    when that distance exceeds ``margin`` in a strict majority of the windows
    it appears in. Configs never seen in history are kept.
    """
    if margin < 0:
        raise ProfilerError("margin must be non-negative")
    if not history_estimates:
        return list(candidates)
    by_id = {c.id: c for c in candidates}
    far = {c.id: 0 for c in candidates}
    seen = {c.id: 0 for c in candidates}
    for window in history_estimates:
        costs, accs = {}, {}
        for est in window:
            cfg = by_id.get(est.config)
            if cfg is None or not est.available:
                continue
            costs[cfg.id] = cfg.gpu_seconds(est.gpu_seconds_per_epoch_full)
            accs[cfg.id] = est.predicted_accuracy
        if not costs:
            continue
        for cid, dist in _frontier_distance(costs, accs).items():
            seen[cid] += 1
            if dist > margin:
                far[cid] += 1
    return [c for c in candidates if not (seen[c.id] and far[c.id] * 2 > seen[c.id])]


def seeded_rng(seed, *keys) -> np.random.Generator:
    salt = zlib.crc32("/".join(str(k) for k in keys).encode())
    return np.random.default_rng([int(seed), salt])


def microprofile(window: WindowTrace, configs: Sequence[RetrainConfig],
                 sample_fraction: float = 0.1, profile_epochs: int = 5,
                 noise_seed: int = 0, sigma: float = DEFAULT_SIGMA) -> List[ProfileEstimate]:
    """Estimate each config's final accuracy from its first few epochs.

    The first ``profile_epochs`` points of the trace's accuracy curve stand in
    for a short run on a ``sample_fraction`` subsample; subsampling noise is
    modelled as seeded zero-mean Gaussian noise of width ``sigma``.
    """
    if not 0 < sample_fraction <= 1:
        raise ProfilerError("sample_fraction must be in (0, 1]")
    if profile_epochs < 1:
        raise ProfilerError("profile_epochs must be >= 1")
    out = []
    for cfg in configs:
        prof = window.profiles.get(cfg.id)
        if prof is None:
            out.append(ProfileEstimate(cfg.id, 0.0, 0.0, "microprofile", available=False))
            continue
        pts = [(k, a) for k, a in prof.accuracy_by_epoch if k <= profile_epochs]
        if len(pts) < 2:
            out.append(ProfileEstimate(cfg.id, 0.0, prof.gpu_seconds_per_epoch_full,
                                       "microprofile", available=False))
            continue
        if sigma > 0:
            rng = seeded_rng(noise_seed, window.stream, window.window, cfg.id)
            noise = rng.normal(0.0, sigma, size=len(pts))
            pts = [(k, min(1.0, max(0.0, a + e))) for (k, a), e in zip(pts, noise)]
        model = fit_curve(pts)
        out.append(ProfileEstimate(cfg.id, extrapolate(model, cfg.epochs),
                                   prof.gpu_seconds_per_epoch_full, "microprofile"))
    return out


def microprofile_cost(window: WindowTrace, configs: Sequence[RetrainConfig],
                      sample_fraction: float = 0.1, profile_epochs: int = 5) -> float:
    """GPU-seconds spent micro-profiling ``configs`` in this window."""
    total = 0.0
    for cfg in configs:
        prof = window.profiles.get(cfg.id)
        if prof is not None:
            total += min(profile_epochs, cfg.epochs) * prof.gpu_seconds_per_epoch_full * sample_fraction
    return total


def exhaustive_profile_cost(window: WindowTrace, configs: Sequence[RetrainConfig]) -> float:
    """GPU-seconds to train every config to completion on all of the window's data."""
    total = 0.0
    for cfg in configs:
        prof = window.profiles.get(cfg.id)
        if prof is not None:
            total += cfg.epochs * prof.gpu_seconds_per_epoch_full
    return total


def ground_truth_estimates(window: WindowTrace) -> Dict[str, ProfileEstimate]:
    return {cid: ProfileEstimate(cid, p.post_retrain_accuracy, p.gpu_seconds_per_epoch_full,
                                 "ground_truth")
            for cid, p in window.profiles.items()}


def perturb_estimates(estimates: Dict[str, ProfileEstimate], relative_error: float,
                      rng: np.random.Generator) -> Dict[str, ProfileEstimate]:
    """Multiply each predicted accuracy by ``1 + U(-e, e)`` and clamp to [0, 1]."""
    out = {}
    for cid in sorted(estimates):
        est = estimates[cid]
        factor = 1.0 + rng.uniform(-relative_error, relative_error)
        out[cid] = replace(est, predicted_accuracy=min(1.0, max(0.0, est.predicted_accuracy * factor)))
    return out


def distribution_distance(p: Sequence[float], q: Sequence[float]) -> float:
    """Euclidean distance between two class distributions."""
    if len(p) != len(q):
        raise ProfilerError(f"distribution dimensions differ: {len(p)} vs {len(q)}")
    return math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(p, q)))


HistoryEntry = Tuple[Sequence[float], str, float]


def history_estimate(current: Sequence[float], history: Iterable[HistoryEntry],
                     config: Union[RetrainConfig, str],
                     threshold: float = DEFAULT_HISTORY_THRESHOLD) -> Optional[float]:
    """Mean accuracy achieved by ``config`` in past windows with a similar class mix.

    Returns ``None`` when no past window used this config within ``threshold``
    Euclidean distance; the caller then falls back to micro-profiling.
    """
    cid = config.id if isinstance(config, RetrainConfig) else config
    hits = [acc for dist, hid, acc in history
            if distribution_distance(current, dist) <= threshold and hid == cid]
    if not hits:
        return None
    return math.fsum(hits) / len(hits)
