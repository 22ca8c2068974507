"""Paired bootstrap of global InterSHAP, rank correlation and risk-stratified survival."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import rng_stream
from .survival import KaplanMeier, LogRankResult, kaplan_meier, log_rank

DEGENERATE_EPS = 1e-12


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class BootstrapResult:
    estimate: float
    ci_low: float
    ci_high: float
    p_value: float
    iterations: int
    seed: int
    dropped: int = 0     # replicates where one model had no usable mass

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "ci": [self.ci_low, self.ci_high],
                "p_value": self.p_value, "iterations": self.iterations,
                "seed": self.seed, "dropped_replicates": self.dropped}


def _usable(num, den):
    num = np.asarray(num, dtype=np.float64).ravel()
    den = np.asarray(den, dtype=np.float64).ravel()
    if num.shape != den.shape:
        raise StatsError(f"numerators ({len(num)}) and denominators ({len(den)}) differ in length")
    ok = den >= DEGENERATE_EPS
    return np.where(ok, num, 0.0), np.where(ok, den, 0.0)


def _percent(num, den):
    total = den.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, 100.0 * num.sum(axis=-1) / total, np.nan)


def bootstrap_diff(num_a, den_a, num_b, den_b, iterations: int = 1000,
                   seed: int = 0) -> BootstrapResult:
    """Paired patient bootstrap of global InterSHAP(A) - InterSHAP(B).

    Inputs are per-patient interaction mass and total mass, aligned to the
    same patients. Each replicate draws its indices from its own stream, so
    results do not depend on evaluation order.
    """
    na, da = _usable(num_a, den_a)
    nb, db = _usable(num_b, den_b)
    if len(na) != len(nb):
        raise StatsError(f"length mismatch: {len(na)} vs {len(nb)} patients")
    if iterations < 100:
        raise StatsError(f"iterations must be >= 100, got {iterations}")
    n = len(na)
    if n == 0:
        raise StatsError("no patients")
    estimate = float(_percent(na, da) - _percent(nb, db))
    if not np.isfinite(estimate):
        raise StatsError("global InterSHAP undefined for one of the inputs")
    idx = np.stack([rng_stream(seed, 0xB007, r).integers(0, n, n) for r in range(iterations)])
    diffs = _percent(na[idx], da[idx]) - _percent(nb[idx], db[idx])
    diffs = diffs[np.isfinite(diffs)]
    if len(diffs) == 0:
        raise StatsError("every bootstrap replicate was degenerate")
    lo, hi = np.percentile(diffs, [2.5, 97.5])
    p = min(1.0, 2.0 * min(np.mean(diffs <= 0), np.mean(diffs >= 0)))
    return BootstrapResult(estimate, float(lo), float(hi), float(p), iterations, seed,
                           iterations - len(diffs))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="stable")
    xs = x[order]
    starts = np.r_[0, np.nonzero(np.diff(xs))[0] + 1]
    ends = np.r_[starts[1:], len(xs)]
    ranks = np.empty(len(x))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    return ranks


def spearman(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise StatsError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise StatsError("spearman needs at least 3 pairs")
    rx, ry = average_ranks(x), average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    sxx, syy = float(rx @ rx), float(ry @ ry)
    if sxx == 0 or syy == 0:
        raise StatsError("spearman undefined for constant input")
    return float(rx @ ry / np.sqrt(sxx * syy))


@dataclass(frozen=True)
class MedianSplit:
    threshold: float
    low: KaplanMeier
    high: KaplanMeier
    n_low: int
    n_high: int
    median_low: float | None
    median_high: float | None
    log_rank: LogRankResult

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "n_low": self.n_low, "n_high": self.n_high,
                "median_survival_low": self.median_low,
                "median_survival_high": self.median_high,
                "log_rank_statistic": self.log_rank.statistic,
                "log_rank_p": self.log_rank.p_value}


def _outcomes(values, time, event):
    v = np.asarray(values, dtype=np.float64).ravel()
    t = np.asarray(time, dtype=np.float64).ravel()
    e = np.asarray(event, dtype=bool).ravel()
    if not (len(v) == len(t) == len(e)):
        raise StatsError(f"length mismatch: values {len(v)}, time {len(t)}, event {len(e)}")
    if not np.all(np.isfinite(v)):
        raise StatsError("values must be finite")
    return v, t, e


def median_split_survival(values, time, event) -> MedianSplit:
    """Split at the median value (ties go to the lower group) and compare survival."""
    v, t, e = _outcomes(values, time, event)
    if len(v) < 4:
        raise StatsError(f"median split needs n >= 4, got {len(v)}")
    thr = float(np.median(v))
    high = v > thr
    if not high.any():
        raise StatsError("degenerate split: no value lies above the median")
    km_lo, km_hi = kaplan_meier(t[~high], e[~high]), kaplan_meier(t[high], e[high])
    lr = log_rank(t[~high], e[~high], t[high], e[high])
    return MedianSplit(thr, km_lo, km_hi, int((~high).sum()), int(high.sum()),
                       km_lo.median, km_hi.median, lr)


@dataclass(frozen=True)
class QuartileTrend:
    cuts: tuple[float, float, float]
    sizes: tuple[int, ...]
    medians: tuple[float | None, ...]
    monotone_non_increasing: bool

    def to_dict(self) -> dict:
        return {"cuts": list(self.cuts), "sizes": list(self.sizes),
                "median_survival": list(self.medians),
                "monotone_non_increasing": self.monotone_non_increasing}


def quartile_trend(values, time, event) -> QuartileTrend:
    """KM median survival per value quartile, lowest quartile first.

    Undefined medians (curve never reaches 0.5) are reported as None and
    skipped by the monotonicity flag.
    """
    v, t, e = _outcomes(values, time, event)
    if len(v) < 8:
        raise StatsError(f"quartile trend needs n >= 8, got {len(v)}")
    if np.all(v == v[0]):
        raise StatsError("constant values fall into a single quartile bucket")
    cuts = np.quantile(v, [0.25, 0.5, 0.75])
    bucket = np.searchsorted(cuts, v, side="left")
    sizes = np.bincount(bucket, minlength=4)
    if np.any(sizes == 0):
        raise StatsError(f"degenerate quartiles: bucket sizes {sizes.tolist()}")
    medians = tuple(kaplan_meier(t[bucket == q], e[bucket == q]).median for q in range(4))
    defined = [m for m in medians if m is not None]
    mono = all(b <= a for a, b in zip(defined, defined[1:]))
    return QuartileTrend(tuple(float(c) for c in cuts), tuple(int(s) for s in sizes),
                         medians, mono)
