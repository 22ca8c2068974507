"""Synthetic two-modality survival data with known interaction structure.

Every generator draws standard-normal embeddings for both modalities and puts
the survival signal in column 0:

* uniqueness   -- risk = beta * a0; modality B is pure noise.
* xor-synergy  -- risk = +beta when exactly one of a0 > 0, b0 > 0 holds, else -beta.
* redundancy   -- a0 and b0 are noisy copies of a shared z; risk = beta * z.

Event times are exponential with rate ``base_rate * exp(risk)``; censoring
times are exponential with a rate found by bisection so that the realised
event fraction hits the target.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataio import MultimodalDataset, SplitSpec, make_split
from .intershap import MaskingStrategy, audit
from .models import ArchitectureSpec, Hyperparams, TrainedModel, preset, train
from .numcore import rng_stream
from .survival import concordance_index

log = logging.getLogger(__name__)

PATTERNS = ("uniqueness", "xor-synergy", "redundancy")


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    pattern: str = "uniqueness"
    n: int = 2000
    dims: tuple[int, int] = (16, 16)
    beta: float = 2.0
    event_fraction: float = 0.65
    noise: float = 0.3
    seed: int = 42
    base_rate: float = math.log(2) / 30.0   # baseline median survival 30 months
    offset: float = 0.0                     # location shift added to every embedding entry

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise SynthError(f"unknown pattern {self.pattern!r}; choose from {PATTERNS}")
        if self.n < 50:
            raise SynthError(f"n must be >= 50, got {self.n}")
        if self.beta <= 0:
            raise SynthError("beta must be > 0")
        if not 0.1 < self.event_fraction < 0.95:
            raise SynthError("event fraction must lie in (0.1, 0.95)")
        if min(self.dims) < 1:
            raise SynthError("dims must be >= 1")


@dataclass(frozen=True)
class GroundTruth:
    pattern: str
    low: float
    high: float
    nominal: tuple[float, float]


# desk-scale acceptance ranges (percent, moebius convention)
GROUND_TRUTH = {
    "uniqueness": GroundTruth("uniqueness", 0.0, 2.0, (0.0, 1.0)),
    "xor-synergy": GroundTruth("xor-synergy", 90.0, 100.0, (99.0, 100.0)),
    "redundancy": GroundTruth("redundancy", 25.0, 55.0, (30.0, 50.0)),
}


def latent_risk(pattern: str, a0: np.ndarray, b0: np.ndarray, z: np.ndarray | None,
                beta: float) -> np.ndarray:
    if pattern == "uniqueness":
        return beta * a0
    if pattern == "xor-synergy":
        xor = (a0 > 0) != (b0 > 0)
        return beta * (xor - 0.5) * 2.0
    return beta * z


def _censor_rate(t_event: np.ndarray, e_cens: np.ndarray, target: float, tol: float = 0.02):
    """Bisect the censoring rate on a log scale; returns (rate, achieved fraction)."""
    def frac(rate):
        return float(np.mean(t_event <= e_cens / rate))

    lo, hi = math.log(1e-12), math.log(1e6)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f = frac(math.exp(mid))
        if abs(f - target) <= tol / 4:
            return math.exp(mid), f
        if f > target:
            lo = mid
        else:
            hi = mid
    rate = math.exp(0.5 * (lo + hi))
    return rate, frac(rate)


def generate(spec: SynthSpec) -> tuple[MultimodalDataset, GroundTruth]:
    rng = rng_stream(spec.seed, 100)
    da, db = spec.dims
    xa = rng.standard_normal((spec.n, da))
    xb = rng.standard_normal((spec.n, db))
    z = None
    if spec.pattern == "redundancy":
        z = rng.standard_normal(spec.n)
        xa[:, 0] = z + spec.noise * rng.standard_normal(spec.n)
        xb[:, 0] = z + spec.noise * rng.standard_normal(spec.n)
    risk = latent_risk(spec.pattern, xa[:, 0], xb[:, 0], z, spec.beta)
    t_event = rng_stream(spec.seed, 101).standard_exponential(spec.n) / (spec.base_rate * np.exp(risk))
    e_cens = rng_stream(spec.seed, 102).standard_exponential(spec.n)
    rate, achieved = _censor_rate(t_event, e_cens, spec.event_fraction)
    if abs(achieved - spec.event_fraction) > 0.02:
        raise SynthError(f"censoring bisection reached event fraction {achieved:.4f}, "
                         f"target {spec.event_fraction}")
    t_cens = e_cens / rate
    time_ = np.minimum(t_event, t_cens)
    event = t_event <= t_cens
    prov = {"source": "synthbench", **dataclasses.asdict(spec),
            "censoring_rate": rate, "achieved_event_fraction": achieved}
    prov["dims"] = list(spec.dims)
    ds = MultimodalDataset({"A": xa + spec.offset, "B": xb + spec.offset},
                           [f"P{i:05d}" for i in range(spec.n)], time_, event, prov)
    return ds, GROUND_TRUTH[spec.pattern]


def true_risk(ds: MultimodalDataset, spec: SynthSpec) -> np.ndarray:
    """Latent log-rate recomputed from the stored embeddings.

    z is not stored for redundancy data, so its conditional mean
    (a0 + b0) / (2 + noise**2) stands in.
    """
    a0 = ds.modalities["A"][:, 0] - spec.offset
    b0 = ds.modalities["B"][:, 0] - spec.offset
    return latent_risk(spec.pattern, a0, b0, (a0 + b0) / (2.0 + spec.noise ** 2), spec.beta)


# -- training protocol shared by the suite and CV --------------------------

def train_val_test(ds: MultimodalDataset, seed: int, test_fraction: float = 0.2):
    """Stratified test holdout, then a stratified validation holdout of the rest."""
    rest, test = make_split(ds.event, SplitSpec("holdout", test_fraction, seed=seed))
    tr_rel, va_rel = make_split(ds.event[rest], SplitSpec("holdout", 0.2, seed=seed + 1))
    return rest[tr_rel], rest[va_rel], test


# desk defaults: lr 1e-3 so every pattern converges well inside the time budget,
# patience 50 so the XOR early-mlp gets past its initial plateau
SUITE_HYPERPARAMS = Hyperparams(lr=1e-3, weight_decay=1e-5, batch_size=128,
                                patience=50, max_epochs=500)


@dataclass
class SuiteConfig:
    n: int = 2000
    seed: int = 42
    dims: tuple[int, int] = (16, 16)
    beta: float = 2.0
    noise: float = 0.3
    event_fraction: float = 0.65
    train_seed: int = 0
    hyperparams: Hyperparams = field(default_factory=lambda: SUITE_HYPERPARAMS)
    only: tuple[str, ...] | None = None
    threads: int = 1


CHECKS = ("uniqueness", "xor-synergy", "redundancy", "modality-bounds", "late-fusion-zero")


@dataclass
class CheckResult:
    name: str
    low: float | None
    high: float | None
    observed: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def fit_and_audit(ds: MultimodalDataset, kind: str, cfg: SuiteConfig, masking: str = "mean",
                  conventions=("moebius",)):
    tr, va, te = train_val_test(ds, cfg.seed)
    spec = preset(kind, ds.modalities["A"].shape[1:] + ds.modalities["B"].shape[1:])
    model = train(spec, ds, tr, va, cfg.hyperparams, seed=cfg.train_seed)
    test = ds.subset(te)
    ref = [m[tr] for m in ds.matrices()]
    cidx = concordance_index(model.predict(*test.matrices()), test.time, test.event)
    reports = {c: audit(model, test, MaskingStrategy(masking, ref, seed=cfg.seed), c)
               for c in conventions}
    return model, cidx, reports


def _pattern_data(pattern: str, cfg: SuiteConfig) -> MultimodalDataset:
    spec = SynthSpec(pattern, cfg.n, tuple(cfg.dims), cfg.beta, cfg.event_fraction,
                     cfg.noise, cfg.seed)
    return generate(spec)[0]


def _job_uniqueness(cfg):
    ds = _pattern_data("uniqueness", cfg)
    model, cidx, rep = fit_and_audit(ds, "early-mlp", cfg)
    r = rep["moebius"]
    gt = GROUND_TRUTH["uniqueness"]
    noise = r.summary.contributions["B"]
    info = {"test_cindex": cidx, "epochs": model.epochs_run,
            "contributions_percent": r.summary.contributions}
    return [CheckResult("uniqueness", gt.low, gt.high, r.interaction_percent,
                        r.interaction_percent < gt.high, info),
            CheckResult("uniqueness-noise-modality", None, 15.0, noise, noise < 15.0, info)]


def _job_xor(cfg):
    ds = _pattern_data("xor-synergy", cfg)
    gt = GROUND_TRUTH["xor-synergy"]
    out = []
    for kind, name in (("early-mlp", "xor-synergy"), ("bilinear", "xor-synergy-bilinear")):
        model, cidx, rep = fit_and_audit(ds, kind, cfg)
        pct = rep["moebius"].interaction_percent
        out.append(CheckResult(name, gt.low, gt.high, pct, pct > gt.low,
                               {"test_cindex": cidx, "epochs": model.epochs_run}))
    return out


def _job_redundancy(cfg):
    ds = _pattern_data("redundancy", cfg)
    model, cidx, rep = fit_and_audit(ds, "early-mlp", cfg)
    r = rep["moebius"]
    gt = GROUND_TRUTH["redundancy"]
    info = {"test_cindex": cidx, "epochs": model.epochs_run,
            "contributions_percent": r.summary.contributions}
    lowest = min(r.summary.contributions.values())
    return [CheckResult("redundancy", gt.low, gt.high, r.interaction_percent,
                        gt.low <= r.interaction_percent <= gt.high, info),
            CheckResult("modality-bounds", 15.0, None, lowest, lowest > 15.0, info)]


def late_fusion_zero_check(model: TrainedModel, ds: MultimodalDataset, reference, seed: int):
    """Worst per-patient |interaction| and global percent over every masking and convention."""
    worst_patient = worst_global = 0.0
    per_setting = {}
    for masking in ("mean", "shuffle", "zero"):
        for conv in ("moebius", "paper-eqs"):
            rep = audit(model, ds, MaskingStrategy(masking, reference, seed=seed), conv)
            wp = float(np.abs(rep.decomposition.interactions).max())
            worst_patient = max(worst_patient, wp)
            worst_global = max(worst_global, rep.interaction_percent)
            per_setting[f"{masking}/{conv}"] = {"max_abs_interaction": wp,
                                                "interaction_percent": rep.interaction_percent}
    return worst_patient, worst_global, per_setting


def _job_late_fusion(cfg):
    ds = _pattern_data("redundancy", cfg)
    tr, va, te = train_val_test(ds, cfg.seed)
    spec = preset("late-linear", (cfg.dims[0], cfg.dims[1]))
    model = train(spec, ds, tr, va, cfg.hyperparams, seed=cfg.train_seed)
    ref = [m[tr] for m in ds.matrices()]
    wp, wg, per = late_fusion_zero_check(model, ds.subset(te), ref, cfg.seed)
    ok = wp < 1e-12 and wg < 1e-10
    return [CheckResult("late-fusion-zero", None, 1e-10, wg, ok,
                        {"max_abs_patient_interaction": wp, "settings": per})]


_JOBS = {
    "uniqueness": _job_uniqueness,
    "xor-synergy": _job_xor,
    "redundancy": _job_redundancy,
    "modality-bounds": _job_redundancy,
    "late-fusion-zero": _job_late_fusion,
}


@dataclass
class SuiteReport:
    checks: list[CheckResult]
    config: dict
    seconds: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"schema": "coxplain.suite/1", "passed": self.passed, "config": self.config,
                "checks": [c.to_dict() for c in self.checks]}

    def table(self) -> str:
        lines = [f"{'check':<28} {'expected':<18} {'observed':>14}  result"]
        for c in self.checks:
            lo = "-inf" if c.low is None else f"{c.low:g}"
            hi = "inf" if c.high is None else f"{c.high:g}"
            lines.append(f"{c.name:<28} {'[' + lo + ', ' + hi + ']':<18} {c.observed:>14.6g}  "
                         f"{'PASS' if c.passed else 'FAIL'}")
        return "\n".join(lines)


def run_validation_suite(cfg: SuiteConfig | None = None) -> SuiteReport:
    cfg = cfg or SuiteConfig()
    wanted = cfg.only or CHECKS
    unknown = set(wanted) - set(CHECKS)
    if unknown:
        raise SynthError(f"unknown checks {sorted(unknown)}; choose from {CHECKS}")
    jobs = []
    for name in wanted:
        fn = _JOBS[name]
        if fn not in jobs:
            jobs.append(fn)
    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        results = list(pool.map(lambda f: f(cfg), jobs))
    checks = [c for group in results for c in group]
    keep = set(wanted) | {"uniqueness-noise-modality" if "uniqueness" in wanted else "",
                          "xor-synergy-bilinear" if "xor-synergy" in wanted else ""}
    checks = [c for c in checks if c.name in keep]
    conf = dataclasses.asdict(cfg)
    conf["dims"] = list(cfg.dims)
    conf["only"] = list(wanted)
    conf.pop("threads")
    return SuiteReport(checks, conf, time.perf_counter() - start)


# -- cross-validation stability --------------------------------------------

@dataclass
class CVStability:
    values: list[float]
    mean: float
    sd: float
    cv: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def cv_stability(ds: MultimodalDataset, spec: ArchitectureSpec | None = None, k: int = 10,
                 hyperparams: Hyperparams | None = None, seed: int = 0, masking: str = "mean",
                 convention: str = "moebius", fit=None, threads: int = 1) -> CVStability:
    """Global InterSHAP on each held-out fold of a stratified k-fold split.

    ``fit(train_ds, val_ds, fold)`` may be supplied to replace training; by
    default ``spec`` is trained on k-1 folds with an inner validation holdout.
    """
    if k < 2:
        raise SynthError("k must be >= 2")
    if ds.n < 10 * k:
        raise SynthError(f"need at least {10 * k} patients for {k}-fold CV, got {ds.n}")
    folds = make_split(ds.event, SplitSpec("kfold", k=k, seed=seed))
    for i, f in enumerate(folds):
        if not ds.event[f].any():
            raise SynthError(f"fold {i} has no events")
    hp = hyperparams or SUITE_HYPERPARAMS
    if spec is None and fit is None:
        spec = preset("early-mlp", tuple(m.shape[1] for m in ds.matrices()))

    def run(i):
        test = folds[i]
        rest = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        tr_rel, va_rel = make_split(ds.event[rest], SplitSpec("holdout", 0.2, seed=seed + i + 1))
        tr, va = rest[tr_rel], rest[va_rel]
        if fit is not None:
            model = fit(ds.subset(tr), ds.subset(va), i)
        else:
            model = train(spec, ds, tr, va, hp, seed=seed)
        ref = [m[tr] for m in ds.matrices()]
        rep = audit(model, ds.subset(test), MaskingStrategy(masking, ref, seed=seed), convention)
        return rep.interaction_percent

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        values = list(pool.map(run, range(k)))
    arr = np.array(values)
    mean = float(arr.mean())
    sd = float(arr.std(ddof=1))
    cv = sd / abs(mean) if mean != 0 else (0.0 if sd == 0 else math.inf)
    return CVStability(values, mean, sd, cv)
