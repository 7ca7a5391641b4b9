"""Survival evaluation metrics.

Implements the four reported scores (concordance index, time-dependent
concordance, integrated Brier score, integrated negative binomial
log-likelihood) with Kaplan-Meier inverse-probability-of-censoring
weights.  Conventions, since the choices matter for comparability:

* the censoring distribution G is the Kaplan-Meier estimate with event
  indicators flipped, evaluated with left limits at subject event times;
* the integration grid is the interior interval cut points, excluding
  t = 0 and t = t_max where G can vanish;
* pairs whose required G value is zero are dropped and counted in the
  diagnostics mapping rather than poisoning the score;
* the default scalar risk for the plain C-index is one minus the mean of
  the subject's survival curve over the grid.
"""

from __future__ import annotations

import numpy as np

from .survival import TimeGrid, discretize

__all__ = ["MetricUndefinedError", "StepFunction", "kaplan_meier",
           "risk_from_survival", "concordance", "td_concordance",
           "brier_curve", "integrated_brier", "nbll_curve", "inbll",
           "metrics_report", "report_text"]

PROB_EPS = 1e-7


class MetricUndefinedError(ValueError):
    """No comparable pairs / empty integration grid."""


class StepFunction:
    """Right-continuous step function starting at 1.0.

    ``knots`` are increasing jump times; ``values[k]`` is the function value
    from knots[k] (inclusive) until the next knot.  ``left(t)`` gives the
    left limit, i.e. the value just before t.
    """

    def __init__(self, knots, values):
        self.knots = np.asarray(knots, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.knots.shape != self.values.shape:
            raise ValueError("knots/values length mismatch")
        if self.knots.size and np.any(np.diff(self.knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise ValueError("step values must lie in [0, 1]")

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.knots, t, side="right")
        padded = np.concatenate(([1.0], self.values))
        return padded[idx]

    def left(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.knots, t, side="left")
        padded = np.concatenate(([1.0], self.values))
        return padded[idx]


def kaplan_meier(times, events) -> StepFunction:
    """Product-limit estimator.  For the censoring distribution, call with
    flipped indicators (censoring is the "event")."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    if times.size == 0:
        raise ValueError("empty sample")
    if np.any(times < 0):
        raise ValueError("negative times")
    order = np.argsort(times, kind="stable")
    t_sorted = times[order]
    e_sorted = events[order]
    knots = []
    values = []
    surv = 1.0
    n = times.size
    i = 0
    while i < n:
        t = t_sorted[i]
        j = i
        deaths = 0
        while j < n and t_sorted[j] == t:
            deaths += int(e_sorted[j])
            j += 1
        at_risk = n - i
        if deaths > 0:
            surv *= 1.0 - deaths / at_risk
            knots.append(t)
            values.append(surv)
        i = j
    return StepFunction(knots, values)


def risk_from_survival(surv: np.ndarray) -> np.ndarray:
    """Mean survival deficit over the grid: higher = earlier expected event."""
    return 1.0 - np.asarray(surv, dtype=np.float64).mean(axis=1)


def _comparable(times, events):
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    return (times[:, None] < times[None, :]) & (events[:, None] == 1)


def concordance(risks, times, events) -> float:
    """(concordant + 0.5 * risk-ties) / comparable, pair (i, j) comparable
    iff t_i < t_j and subject i's event was observed."""
    risks = np.asarray(risks, dtype=np.float64)
    comp = _comparable(times, events)
    n_comp = int(comp.sum())
    if n_comp == 0:
        raise MetricUndefinedError("no comparable pairs")
    conc = comp & (risks[:, None] > risks[None, :])
    tied = comp & (risks[:, None] == risks[None, :])
    return (conc.sum() + 0.5 * tied.sum()) / n_comp


def _curve_values_at(surv: np.ndarray, eval_times, grid: TimeGrid) -> np.ndarray:
    """S[j, k] for every subject j at every requested time k (step rule)."""
    idx = np.array([discretize(min(float(t), grid.t_max), grid) for t in eval_times])
    return np.asarray(surv, dtype=np.float64)[:, idx]


def td_concordance(surv, times, events, grid: TimeGrid) -> float:
    """Antolini's time-dependent concordance: pair (i, j) counts as
    concordant when S(t_i | x_i) < S(t_i | x_j); ties contribute 0.5."""
    comp = _comparable(times, events)
    n_comp = int(comp.sum())
    if n_comp == 0:
        raise MetricUndefinedError("no comparable pairs")
    at_ti = _curve_values_at(surv, times, grid).T  # [i, j] = S(t_i | x_j)
    own = np.diagonal(at_ti)
    conc = comp & (own[:, None] < at_ti)
    tied = comp & (own[:, None] == at_ti)
    return (conc.sum() + 0.5 * tied.sum()) / n_comp


def _eval_grid(grid: TimeGrid) -> np.ndarray:
    pts = grid.cut_points[:-1]
    if pts.size < 2:
        raise MetricUndefinedError("integration grid needs at least 2 points")
    return pts


def _ipcw_scores(surv, times, events, grid, transform, diagnostics, key):
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    surv = np.asarray(surv, dtype=np.float64)
    n = times.size
    pts = _eval_grid(grid)
    g_hat = kaplan_meier(times, 1 - events)
    g_left_ti = g_hat.left(times)
    g_at = g_hat(pts)
    s_at = surv[:, : pts.size]  # grid points are the leading cut points
    dropped = 0
    scores = np.zeros(pts.size)
    for k, t in enumerate(pts):
        dead = (times <= t) & (events == 1)
        alive = times > t
        total = 0.0
        term_dead, term_alive = transform(s_at[:, k])
        for i in np.nonzero(dead)[0]:
            if g_left_ti[i] <= 0.0:
                dropped += 1
                continue
            total += term_dead[i] / g_left_ti[i]
        if np.any(alive):
            if g_at[k] <= 0.0:
                dropped += int(alive.sum())
            else:
                total += term_alive[alive].sum() / g_at[k]
        scores[k] = total / n
    if diagnostics is not None:
        diagnostics[key] = diagnostics.get(key, 0) + dropped
    return pts, scores


def brier_curve(surv, times, events, grid: TimeGrid,
                diagnostics: dict | None = None):
    """(grid points, IPCW Brier score at each point)."""

    def transform(s_t):
        return s_t ** 2, (1.0 - s_t) ** 2

    return _ipcw_scores(surv, times, events, grid, transform,
                        diagnostics, "ibs_dropped_terms")


def integrated_brier(surv, times, events, grid: TimeGrid,
                     diagnostics: dict | None = None) -> float:
    """IPCW Brier score integrated over the interior grid (trapezoid rule,
    normalized by the grid span)."""
    pts, scores = brier_curve(surv, times, events, grid, diagnostics)
    return float(np.trapezoid(scores, pts) / (pts[-1] - pts[0]))


def nbll_curve(surv, times, events, grid: TimeGrid,
               diagnostics: dict | None = None):
    """(grid points, binomial log-likelihood at each point, un-negated)."""

    def transform(s_t):
        s_c = np.clip(s_t, PROB_EPS, 1.0 - PROB_EPS)
        return np.log(1.0 - s_c), np.log(s_c)

    return _ipcw_scores(surv, times, events, grid, transform,
                        diagnostics, "inbll_dropped_terms")


def inbll(surv, times, events, grid: TimeGrid,
          diagnostics: dict | None = None) -> float:
    """Integrated negative binomial log-likelihood (log-loss analogue of the
    Brier score), with probabilities clipped away from {0, 1}."""
    pts, scores = nbll_curve(surv, times, events, grid, diagnostics)
    return float(-np.trapezoid(scores, pts) / (pts[-1] - pts[0]))


def metrics_report(surv, times, events, grid: TimeGrid) -> dict:
    """All four metrics plus drop diagnostics, as a flat mapping."""
    diagnostics: dict = {}
    report = {
        "cindex": concordance(risk_from_survival(surv), times, events),
        "ctd": td_concordance(surv, times, events, grid),
        "ibs": integrated_brier(surv, times, events, grid, diagnostics),
        "inbll": inbll(surv, times, events, grid, diagnostics),
    }
    report.update(diagnostics)
    return report


def report_text(report: dict) -> str:
    return "\n".join(f"{k} = {v}" for k, v in report.items()) + "\n"
