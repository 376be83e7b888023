"""Placement of fractional GPU shares onto whole GPUs, and the checkpoint rule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Hashable, List, Sequence, Tuple

__all__ = ["CheckpointParams", "Placement", "pack", "place_allocation", "quantize",
           "should_checkpoint"]


class PlacementError(ValueError):
    pass


def quantize(share) -> Fraction:
    """Largest inverse power of two (1, 1/2, 1/4, ...) not above ``share``."""
    share = Fraction(share) if not isinstance(share, float) else Fraction(str(share))
    if share <= 0:
        raise PlacementError(f"share must be positive, got {share}")
    share = min(share, Fraction(1))
    q = Fraction(1)
    while q > share:
        q /= 2
    return q


def _is_inverse_power_of_two(x: Fraction) -> bool:
    return x.numerator == 1 and x.denominator & (x.denominator - 1) == 0


@dataclass
class Placement:
    gpus: List[List[Tuple[Hashable, Fraction]]]
    unplaced: List[Hashable] = field(default_factory=list)

    def load(self, gpu: int) -> Fraction:
        return sum((s for _, s in self.gpus[gpu]), Fraction(0))

    def placed_jobs(self) -> List[Hashable]:
        return [job for g in self.gpus for job, _ in g]

    @property
    def slack(self) -> Fraction:
        """Idle capacity left on the GPUs after packing."""
        return sum((1 - self.load(g) for g in range(len(self.gpus))), Fraction(0))


def pack(demands: Sequence[Tuple[Hashable, Fraction]], gpus: int) -> Placement:
    """First-fit decreasing: biggest demands first, each onto the first GPU with room.

    Ties are broken by job id. Jobs that fit nowhere are reported as unplaced.
    """
    placement = Placement([[] for _ in range(gpus)])
    loads = [Fraction(0)] * gpus
    items = []
    for job, share in demands:
        share = Fraction(share) if not isinstance(share, float) else Fraction(str(share))
        if not _is_inverse_power_of_two(share):
            raise PlacementError(f"{job}: {share} is not an inverse power of two")
        items.append((job, share))
    items.sort(key=lambda js: (-js[1], str(js[0])))
    for job, share in items:
        for g in range(gpus):
            if loads[g] + share <= 1:
                loads[g] += share
                placement.gpus[g].append((job, share))
                break
        else:
            placement.unplaced.append(job)
    return placement


def place_allocation(shares: Dict[Hashable, Fraction], gpus: int) -> Placement:
    """Quantize every positive share, then pack.

    Shares above one GPU are split into whole-GPU pieces plus a quantized
    remainder; each piece is packed under the same job id.
    """
    demands = []
    for job, share in shares.items():
        share = Fraction(share)
        whole = math.floor(share)
        demands.extend((job, Fraction(1)) for _ in range(whole))
        rest = share - whole
        if rest > 0:
            demands.append((job, quantize(rest)))
    return pack(demands, gpus)


@dataclass(frozen=True)
class CheckpointParams:
    """Inputs to the checkpoint decision, all measured from the window start.

    ``tau`` is when retraining will finish, ``t`` now, ``T`` the window
    length; ``a`` the current inference accuracy, ``a_star`` the accuracy if
    the partially trained model were loaded now, ``A`` the final retrained
    accuracy and ``delta_ckpt`` the checkpoint-and-reload cost in seconds.
    """

    tau: float
    t: float
    T: float
    a: float
    a_star: float
    A: float
    delta_ckpt: float

    def __post_init__(self):
        if not 0 <= self.t <= self.tau <= self.T:
            raise PlacementError("need 0 <= t <= tau <= T")
        if self.delta_ckpt < 0:
            raise PlacementError("delta_ckpt must be non-negative")


def should_checkpoint(p: CheckpointParams) -> bool:
    """True when loading the current checkpoint raises mean window accuracy.

    Evaluated in exact rational arithmetic so the decision never flips on
    float rounding near the break-even point.
    """
    tau, t, a, a_star, A, d = (Fraction(x) for x in (p.tau, p.t, p.a, p.a_star, p.A, p.delta_ckpt))
    return (tau - t) * (a_star - a) > d * A
