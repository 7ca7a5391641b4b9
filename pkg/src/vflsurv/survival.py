"""Discrete-time survival machinery.

The time axis [0, t_max] is split into p equal intervals with cut points
t_j = j * t_max / p.  A model emits per-interval hazards h in (0,1); the
survival curve is the cumulative product of (1 - h).  The training loss is
the negative Bernoulli log-likelihood over each subject's exposed
intervals, averaged over subjects so magnitudes are batch-size free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["HAZARD_EPS", "TimeGrid", "TargetMask", "discretize",
           "build_targets", "hazards_to_survival", "nll", "nll_taped"]

# sigmoid-saturation protection before taking logs
HAZARD_EPS = 1e-7


@dataclass(frozen=True)
class TimeGrid:
    """p equal-length intervals covering (0, t_max]."""

    intervals: int
    t_max: float

    def __post_init__(self):
        if self.intervals < 1:
            raise ValueError("need at least one interval")
        if not np.isfinite(self.t_max) or self.t_max <= 0:
            raise ValueError("t_max must be positive and finite")

    @property
    def cut_points(self) -> np.ndarray:
        p = self.intervals
        return self.t_max * np.arange(1, p + 1) / p


def discretize(time: float, grid: TimeGrid) -> int:
    """0-based interval index; time 0 maps to interval 0, times beyond
    t_max clamp to the last interval."""
    if time < 0:
        raise ValueError("negative time")
    cuts = grid.cut_points
    j = int(np.searchsorted(cuts, time, side="left"))
    return min(j, grid.intervals - 1)


@dataclass(frozen=True)
class TargetMask:
    """Event indicators and exposure per (subject, interval).

    exposure[i, l] = 1 for l <= j_i (the subject's observed interval);
    event[i, l] = 1 only at l = j_i and only when the event was observed.
    """

    event: np.ndarray
    exposure: np.ndarray

    def __post_init__(self):
        if self.event.shape != self.exposure.shape:
            raise ValueError("mask shapes disagree")


def build_targets(times, events, grid: TimeGrid) -> TargetMask:
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    n = times.shape[0]
    p = grid.intervals
    event = np.zeros((n, p))
    exposure = np.zeros((n, p))
    for i in range(n):
        j = discretize(min(times[i], grid.t_max), grid)
        exposure[i, : j + 1] = 1.0
        if events[i]:
            event[i, j] = 1.0
    return TargetMask(event=event, exposure=exposure)


def hazards_to_survival(h: np.ndarray) -> np.ndarray:
    """S[i, j] = prod_{l<=j} (1 - h[i, l]); rows are non-increasing."""
    h = np.asarray(h, dtype=np.float64)
    if np.any(h <= 0.0) or np.any(h >= 1.0):
        h = np.clip(h, HAZARD_EPS, 1.0 - HAZARD_EPS)
    return np.cumprod(1.0 - h, axis=1)


def nll(h: np.ndarray, targets: TargetMask) -> float:
    """Mean negative log-likelihood over subjects."""
    h = np.clip(np.asarray(h, dtype=np.float64), HAZARD_EPS, 1.0 - HAZARD_EPS)
    if h.shape != targets.event.shape:
        raise ValueError("hazard / target shapes disagree")
    ll = targets.exposure * (targets.event * np.log(h)
                             + (1.0 - targets.event) * np.log(1.0 - h))
    return float(-ll.sum() / h.shape[0])


def nll_taped(h: Tensor, targets: TargetMask) -> Tensor:
    """Taped version of :func:`nll` for training."""
    if h.shape != targets.event.shape:
        raise ad.DimensionError("hazard / target shapes disagree")
    hc = ad.clamp(h, HAZARD_EPS, 1.0 - HAZARD_EPS)
    w_event = Tensor(targets.exposure * targets.event)
    w_surv = Tensor(targets.exposure * (1.0 - targets.event))
    ll = ad.add(ad.multiply(w_event, ad.log(hc)),
                ad.multiply(w_surv, ad.log(ad.add_const(ad.neg(hc), 1.0))))
    return ad.scale(ad.tsum(ll), -1.0 / h.shape[0])
