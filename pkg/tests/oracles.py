"""Independent brute-force reference implementations for the metrics.

Everything here is written as plain double loops over pairs and grid
points, deliberately mirroring the metric definitions rather than the
vectorized production code, so the two paths can be compared.
"""

import numpy as np

from vflsurv.survival import TimeGrid, discretize


def km_value(times, events, t, left=False):
    """Product-limit survival at t (or its left limit) via direct loops."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    surv = 1.0
    for u in sorted(set(times[events == 1])):
        if (u < t) if left else (u <= t):
            deaths = int(np.sum((times == u) & (events == 1)))
            at_risk = int(np.sum(times >= u))
            surv *= 1.0 - deaths / at_risk
    return surv


def curve_at(surv_row, t, grid: TimeGrid):
    return surv_row[discretize(min(t, grid.t_max), grid)]


def cindex_oracle(risks, times, events):
    num = 0.0
    den = 0
    n = len(times)
    for i in range(n):
        for j in range(n):
            if times[i] < times[j] and events[i] == 1:
                den += 1
                if risks[i] > risks[j]:
                    num += 1.0
                elif risks[i] == risks[j]:
                    num += 0.5
    return num / den if den else None


def ctd_oracle(surv, times, events, grid: TimeGrid):
    num = 0.0
    den = 0
    n = len(times)
    for i in range(n):
        for j in range(n):
            if times[i] < times[j] and events[i] == 1:
                den += 1
                si = curve_at(surv[i], times[i], grid)
                sj = curve_at(surv[j], times[i], grid)
                if si < sj:
                    num += 1.0
                elif si == sj:
                    num += 0.5
    return num / den if den else None


def _ipcw_curve_oracle(surv, times, events, grid: TimeGrid, squared: bool):
    n = len(times)
    pts = grid.cut_points[:-1]
    flipped = 1 - np.asarray(events, dtype=int)
    scores = []
    for t in pts:
        total = 0.0
        for i in range(n):
            s = curve_at(surv[i], t, grid)
            if not squared:
                s = min(max(s, 1e-7), 1.0 - 1e-7)
            if times[i] <= t and events[i] == 1:
                g = km_value(times, flipped, times[i], left=True)
                if g > 0:
                    total += (s ** 2 if squared else np.log(1.0 - s)) / g
            elif times[i] > t:
                g = km_value(times, flipped, t)
                if g > 0:
                    total += ((1.0 - s) ** 2 if squared else np.log(s)) / g
        scores.append(total / n)
    return pts, np.array(scores)


def trapezoid(ys, xs):
    total = 0.0
    for k in range(len(xs) - 1):
        total += 0.5 * (ys[k] + ys[k + 1]) * (xs[k + 1] - xs[k])
    return total


def ibs_oracle(surv, times, events, grid: TimeGrid):
    pts, scores = _ipcw_curve_oracle(surv, times, events, grid, squared=True)
    return trapezoid(scores, pts) / (pts[-1] - pts[0])


def inbll_oracle(surv, times, events, grid: TimeGrid):
    pts, scores = _ipcw_curve_oracle(surv, times, events, grid, squared=False)
    return -trapezoid(scores, pts) / (pts[-1] - pts[0])


def random_cohort(rng, max_n=30, p_min=3, p_max=8):
    """Random survival cohort + random monotone survival curves."""
    n = int(rng.integers(4, max_n + 1))
    p = int(rng.integers(p_min, p_max + 1))
    t_max = float(rng.uniform(5.0, 50.0))
    grid = TimeGrid(intervals=p, t_max=t_max)
    times = rng.uniform(0.1, t_max * 1.1, size=n)
    events = rng.integers(0, 2, size=n)
    if events.sum() == 0:
        events[int(rng.integers(0, n))] = 1
    hazards = rng.uniform(0.02, 0.6, size=(n, p))
    surv = np.cumprod(1.0 - hazards, axis=1)
    return surv, times, events, grid
