"""Cox partial likelihood, discrimination/calibration metrics and nonparametric estimators.

Times are in months. ``event`` is boolean (True = death observed). Scores are
log-risks: a larger score means a higher hazard and an earlier expected death.
All functions are pure and never modify their inputs.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


class SurvivalError(ValueError):
    pass


def _as_arrays(scores, time, event):
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(time, dtype=np.float64).ravel()
    e = np.asarray(event, dtype=bool).ravel()
    if not (len(s) == len(t) == len(e)):
        raise SurvivalError(f"length mismatch: scores {len(s)}, time {len(t)}, event {len(e)}")
    return s, t, e


def _risk_set_logsumexp(s: np.ndarray, t: np.ndarray):
    """log sum_{j: t_j >= t_i} exp(s_j) for every i (Breslow: ties share a risk set)."""
    order = np.argsort(-t, kind="stable")
    ts = t[order]
    shift = s.max()
    cum = np.cumsum(np.exp(s[order] - shift))
    # last index of each block of tied times in descending order
    last = np.searchsorted(-ts, -ts, side="right") - 1
    log_risk = np.empty_like(s)
    log_risk[order] = np.log(cum[last]) + shift
    return log_risk, order, last


def cox_nll(scores, time, event) -> float:
    """Negative log Cox partial likelihood with Breslow ties (summed over events)."""
    s, t, e = _as_arrays(scores, time, event)
    if not e.any():
        raise SurvivalError("Cox partial likelihood undefined without events")
    log_risk, _, _ = _risk_set_logsumexp(s, t)
    return float(-np.sum(s[e] - log_risk[e]))


def cox_nll_grad(scores, time, event) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the scores.

    d/ds_k = -event_k + exp(s_k) * sum_{i: event_i, t_i <= t_k} 1 / R_i,
    where R_i is the risk-set sum of exp(s) at t_i.
    """
    s, t, e = _as_arrays(scores, time, event)
    if not e.any():
        raise SurvivalError("Cox partial likelihood undefined without events")
    log_risk, order, _ = _risk_set_logsumexp(s, t)
    loss = float(-np.sum(s[e] - log_risk[e]))
    # accumulate 1/R_i over events with t_i <= t_k, in ascending time
    asc = order[::-1]
    t_asc = t[asc]
    inv = np.where(e[asc], np.exp(-log_risk[asc]), 0.0)
    cum = np.cumsum(inv)
    last = np.searchsorted(t_asc, t_asc, side="right") - 1
    acc = np.empty_like(s)
    acc[asc] = cum[last]
    grad = np.exp(s) * acc - e
    return loss, grad


def concordance_index(scores, time, event) -> float:
    """Harrell's C.

    A pair (i, j) is comparable when t_i < t_j and i had the event, or when
    t_i == t_j with exactly one event (the event patient is treated as
    failing first). Concordant means the earlier failure has the higher
    score; tied scores count one half.
    """
    s, t, e = _as_arrays(scores, time, event)
    ti, tj = t[:, None], t[None, :]
    ei, ej = e[:, None], e[None, :]
    comparable = ei & ((ti < tj) | ((ti == tj) & ~ej))
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise SurvivalError("no comparable pairs")
    si, sj = s[:, None], s[None, :]
    conc = np.sum(comparable & (si > sj)) + 0.5 * np.sum(comparable & (si == sj))
    return float(conc / n_pairs)


@dataclass(frozen=True)
class BaselineSurvival:
    """Breslow baseline cumulative hazard on the ascending unique event times."""

    times: np.ndarray
    cumhaz: np.ndarray

    def cumulative_hazard(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")
        padded = np.concatenate([[0.0], self.cumhaz])
        return padded[idx]

    def survival(self, t: float, scores) -> np.ndarray:
        """S(t | x) = exp(-H0(t) * exp(score)) for each score."""
        h0 = float(self.cumulative_hazard(t))
        return np.exp(-h0 * np.exp(np.asarray(scores, dtype=np.float64)))


def breslow_baseline(scores, time, event) -> BaselineSurvival:
    s, t, e = _as_arrays(scores, time, event)
    if not e.any():
        raise SurvivalError("Breslow estimator needs at least one event")
    ev_times, inverse = np.unique(t[e], return_inverse=True)
    d = np.bincount(inverse, minlength=len(ev_times)).astype(np.float64)
    order = np.argsort(t, kind="stable")
    tail = np.cumsum(np.exp(s[order])[::-1])[::-1]   # sum over t_j >= t_(k)
    denom = tail[np.searchsorted(t[order], ev_times, side="left")]
    return BaselineSurvival(ev_times, np.cumsum(d / denom))


@dataclass(frozen=True)
class KaplanMeier:
    """Right-continuous product-limit step function."""

    times: np.ndarray      # distinct observed times, ascending
    survival: np.ndarray   # S just after each time
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")
        return np.concatenate([[1.0], self.survival])[idx]

    def left_limit(self, t) -> np.ndarray:
        """S(t-), the value just before ``t``."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="left")
        return np.concatenate([[1.0], self.survival])[idx]

    @property
    def median(self) -> float | None:
        hit = np.nonzero(self.survival <= 0.5)[0]
        return float(self.times[hit[0]]) if len(hit) else None


def kaplan_meier(time, event) -> KaplanMeier:
    t = np.asarray(time, dtype=np.float64).ravel()
    e = np.asarray(event, dtype=bool).ravel()
    if len(t) == 0:
        raise SurvivalError("Kaplan-Meier needs at least one observation")
    uniq, inverse = np.unique(t, return_inverse=True)
    removed = np.bincount(inverse, minlength=len(uniq))
    deaths = np.bincount(inverse, weights=e.astype(np.float64), minlength=len(uniq))
    at_risk = len(t) - np.concatenate([[0], np.cumsum(removed)[:-1]])
    surv = np.cumprod(1.0 - deaths / at_risk)
    return KaplanMeier(uniq, surv, at_risk.astype(np.int64), deaths.astype(np.int64))


def brier_score(scores, time, event, baseline: BaselineSurvival, t: float) -> float:
    """IPCW Brier score at horizon ``t``.

    Patients who died by ``t`` are weighted by 1/G(t_i-), those still at risk
    after ``t`` by 1/G(t); censored-before-``t`` patients contribute zero.
    G is the Kaplan-Meier estimate of the censoring distribution. Patients
    whose weight would divide by zero are dropped with a warning.
    """
    s, tt, e = _as_arrays(scores, time, event)
    if not (0 < t <= tt.max()):
        raise SurvivalError(f"horizon {t} outside follow-up (0, {tt.max()}]")
    cens = kaplan_meier(tt, ~e)
    pred = baseline.survival(t, s)
    died = (tt <= t) & e
    alive = tt > t
    g_died = cens.left_limit(tt)
    g_t = float(cens(t))
    w = np.zeros_like(s)
    bad = (died & (g_died <= 0)) | (alive & (g_t <= 0))
    ok_died = died & ~bad
    ok_alive = alive & ~bad
    w[ok_died] = pred[ok_died] ** 2 / g_died[ok_died]
    if g_t > 0:
        w[ok_alive] = (1.0 - pred[ok_alive]) ** 2 / g_t
    n_bad = int(bad.sum())
    if n_bad:
        warnings.warn(f"brier_score: dropped {n_bad} patient(s) with zero censoring weight")
    n = len(s) - n_bad
    if n == 0:
        raise SurvivalError("every patient has zero censoring weight")
    return float(w[~bad].sum() / n)


def trapezoid_mean(grid, values) -> float:
    """Trapezoidal integral of ``values`` over ``grid`` divided by the grid span."""
    x = np.asarray(grid, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if len(x) == 1:
        return float(y[0])
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0) / (x[-1] - x[0]))


def integrated_brier(scores, time, event, baseline: BaselineSurvival, tau: float) -> float:
    """Time-averaged Brier score over the event-time grid up to ``tau``."""
    _, tt, e = _as_arrays(scores, time, event)
    if tau > tt.max():
        raise SurvivalError(f"tau {tau} beyond max follow-up {tt.max()}")
    grid = np.unique(tt[e & (tt <= tau)])
    if len(grid) == 0 or grid[-1] < tau:
        grid = np.append(grid, tau)
    bs = [brier_score(scores, time, event, baseline, g) for g in grid]
    return trapezoid_mean(grid, bs)


def chi2_sf_1df(x: float) -> float:
    """Upper tail of chi-square with one degree of freedom."""
    if x <= 0:
        return 1.0
    return math.erfc(math.sqrt(x / 2.0))


@dataclass(frozen=True)
class LogRankResult:
    statistic: float
    p_value: float
    observed_a: float
    expected_a: float


def log_rank(time_a, event_a, time_b, event_b) -> LogRankResult:
    ta = np.asarray(time_a, dtype=np.float64).ravel()
    tb = np.asarray(time_b, dtype=np.float64).ravel()
    ea = np.asarray(event_a, dtype=bool).ravel()
    eb = np.asarray(event_b, dtype=bool).ravel()
    if not ea.any() or not eb.any():
        raise SurvivalError("log-rank needs at least one event in each group")
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    in_a = np.concatenate([np.ones(len(ta), bool), np.zeros(len(tb), bool)])
    obs = exp = var = 0.0
    for u in np.unique(t[e]):
        at_risk = t >= u
        n = at_risk.sum()
        n_a = (at_risk & in_a).sum()
        d = (e & (t == u)).sum()
        d_a = (e & (t == u) & in_a).sum()
        obs += d_a
        exp += d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    stat = 0.0 if var == 0 else (obs - exp) ** 2 / var
    return LogRankResult(float(stat), chi2_sf_1df(stat), float(obs), float(exp))
