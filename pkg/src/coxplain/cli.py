"""Command-line entry point.

Every command writes its outputs under ``--out`` together with a
``config.json`` echo of the resolved settings. Exit codes: 0 success,
1 validation-suite failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (DataError, MultimodalDataset, load_dataset, read_json,
                     save_dataset, write_json)
from .intershap import CONVENTIONS, MASKINGS, InterSHAPError, MaskingStrategy, audit
from .models import (KINDS, Hyperparams, ModelError, load_model, preset,
                     save_model, train)
from .numcore import GraphError
from .stats import StatsError, bootstrap_diff, median_split_survival, quartile_trend, spearman
from .survival import (SurvivalError, breslow_baseline, brier_score, concordance_index,
                       integrated_brier)
from .synthbench import (CHECKS, PATTERNS, SUITE_HYPERPARAMS, SuiteConfig, SynthError,
                         SynthSpec, cv_stability, generate, run_validation_suite,
                         train_val_test)

log = logging.getLogger("coxplain")

USER_ERRORS = (DataError, ModelError, SynthError, StatsError, SurvivalError, InterSHAPError,
               GraphError, FileNotFoundError, NotADirectoryError)
PATTERN_ALIASES = {"xor": "xor-synergy"}


class UsageError(ValueError):
    pass


def _threads(value) -> int:
    if value is None:
        value = os.environ.get("COXPLAIN_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"--threads / COXPLAIN_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"--threads must be >= 1, got {n}")
    return n


def _echo_config(out: Path, args, **resolved) -> None:
    cfg = {k: str(v) if isinstance(v, Path) else v
           for k, v in vars(args).items() if k != "func" and v is not None}
    cfg.update(resolved)
    cfg["version"] = __version__
    write_json(out / "config.json", cfg)


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _write_csv(path: Path, rows) -> None:
    buf = io.StringIO(newline="")
    csv.writer(buf, lineterminator="\n").writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    pattern = PATTERN_ALIASES.get(args.pattern, args.pattern)
    spec = SynthSpec(pattern, args.n, tuple(args.dims), args.beta, args.event_fraction,
                     args.noise, args.seed, offset=args.offset)
    ds, truth = generate(spec)
    save_dataset(ds, args.out)
    _echo_config(args.out, args, pattern=pattern,
                 expected_interaction_percent=[truth.low, truth.high])
    print(f"wrote {ds.n} patients to {args.out}; event fraction "
          f"{ds.provenance['achieved_event_fraction']:.4f}")
    return 0


def _split_indices(ds: MultimodalDataset, split: dict):
    pos = {pid: i for i, pid in enumerate(ds.patient_ids)}
    try:
        return {k: np.array([pos[p] for p in split[k]], dtype=np.int64)
                for k in ("train", "val", "test")}
    except KeyError as exc:
        raise DataError(f"split references patient {exc.args[0]!r} absent from the dataset") from None


def _survival_metrics(scores_train, scores_test, train_ds, test_ds, months: float) -> dict:
    baseline = breslow_baseline(scores_train, train_ds.time, train_ds.event)
    out = {"brier_months": months}
    try:
        out["test_brier"] = brier_score(scores_test, test_ds.time, test_ds.event, baseline, months)
        out["test_ibs"] = integrated_brier(scores_test, test_ds.time, test_ds.event, baseline,
                                           months)
    except SurvivalError as exc:
        out["test_brier"] = out["test_ibs"] = None
        out["brier_note"] = str(exc)
    return out


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    dims = tuple(m.shape[1] for m in ds.matrices())
    if len(dims) != 2:
        raise UsageError(f"models take exactly two modalities, dataset has {len(dims)}")
    spec = preset(args.arch, dims, name=args.preset)
    if spec.dims != dims:
        raise UsageError(f"preset {args.preset!r} expects dims {spec.dims}, dataset has {dims}")
    if args.dropout is not None:
        spec = dataclasses.replace(spec, dropout=args.dropout)
    hp = Hyperparams(args.lr, args.weight_decay, args.batch_size, args.patience, args.max_epochs)
    tr, va, te = train_val_test(ds, args.split_seed, args.test_fraction)
    model = train(spec, ds, tr, va, hp, seed=args.seed)
    out = args.out
    save_model(model, out)
    split = {"split_seed": args.split_seed, "test_fraction": args.test_fraction,
             "train": [ds.patient_ids[i] for i in tr],
             "val": [ds.patient_ids[i] for i in va],
             "test": [ds.patient_ids[i] for i in te]}
    write_json(out / "split.json", split)
    parts = {k: ds.subset(v) for k, v in (("train", tr), ("val", va), ("test", te))}
    scores = {k: model.predict(*p.matrices()) for k, p in parts.items()}
    metrics = {"architecture": spec.kind, "preset": args.preset, "seed": args.seed,
               "parameter_count": model.parameter_count, "epochs_run": model.epochs_run,
               "best_val_cindex": model.best_val_cindex}
    for k, p in parts.items():
        metrics[f"{k}_cindex"] = concordance_index(scores[k], p.time, p.event)
    metrics.update(_survival_metrics(scores["train"], scores["test"], parts["train"],
                                     parts["test"], args.brier_months))
    write_json(out / "metrics.json", metrics)
    _echo_config(out, args, spec=spec.to_dict(), hyperparams=hp.to_dict())
    print(f"{spec.kind}: {model.parameter_count} parameters, {model.epochs_run} epochs, "
          f"test C-index {metrics['test_cindex']:.4f}")
    return 0


def cmd_audit(args) -> int:
    model_dir = Path(args.model)
    model = load_model(model_dir)
    ds = load_dataset(args.data)
    split_path = model_dir / "split.json"
    if not split_path.is_file():
        raise DataError(f"{model_dir}: missing split.json (written by `coxplain train`)")
    idx = _split_indices(ds, read_json(split_path))
    reference = [m[idx["train"]] for m in ds.matrices()]
    target = ds if args.split == "all" else ds.subset(idx[args.split])
    meta = {"model": {"architecture": model.spec.kind, "seed": model.seed,
                      "parameter_count": model.parameter_count},
            "split": args.split}
    if (model_dir / "metrics.json").is_file():
        meta["model"]["metrics"] = read_json(model_dir / "metrics.json")
    masking = MaskingStrategy(args.masking, reference, args.replicates, args.seed)
    report = audit(model, target, masking, args.convention, meta)
    write_json(args.out / "audit.json", report.to_dict())
    _write_csv(args.out / "audit.csv", report.csv_rows())
    _echo_config(args.out, args)
    s = report.summary
    shares = ", ".join(f"{k} {v:.2f}%" for k, v in s.contributions.items())
    print(f"global InterSHAP {s.interaction_percent:.4f}% ({shares}); "
          f"{s.degenerate} degenerate patient(s)")
    return 0


def cmd_validate(args) -> int:
    only = tuple(args.only) if args.only else None
    cfg = SuiteConfig(n=args.n, seed=args.seed, train_seed=args.train_seed, only=only,
                      threads=args.threads)
    report = run_validation_suite(cfg)
    write_json(args.out / "suite.json", report.to_dict())
    table = report.table()
    _write_text(args.out / "suite.txt", table + "\n")
    _echo_config(args.out, args, hyperparams=SUITE_HYPERPARAMS.to_dict())
    print(table)
    print(f"suite {'PASSED' if report.passed else 'FAILED'}")
    return 0 if report.passed else 1


def cmd_cv(args) -> int:
    ds = load_dataset(args.data)
    dims = tuple(m.shape[1] for m in ds.matrices())
    res = cv_stability(ds, preset(args.arch, dims), args.k, seed=args.seed,
                       masking=args.masking, convention=args.convention, threads=args.threads)
    write_json(args.out / "cv.json", {"architecture": args.arch, "k": args.k, **res.to_dict()})
    _echo_config(args.out, args, hyperparams=SUITE_HYPERPARAMS.to_dict())
    print(f"{args.k}-fold InterSHAP mean {res.mean:.4f}%, sd {res.sd:.4f}, CV {100 * res.cv:.2f}%")
    return 0


def _load_audit(entry: str):
    name, sep, path = entry.partition("=")
    if not sep:
        name, path = "", entry
    p = Path(path)
    if p.is_dir():
        p = p / "audit.json"
    if not p.is_file():
        raise DataError(f"audit report not found: {p}")
    rep = read_json(p)
    if rep.get("schema") != "coxplain.audit/1":
        raise DataError(f"{p}: not an audit report")
    model = rep["metadata"].get("model", {})
    return (name or model.get("architecture") or p.parent.name), rep


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise UsageError("compare needs at least two audit reports")
    loaded = [_load_audit(r) for r in args.reports]
    names = [n for n, _ in loaded]
    if len(set(names)) != len(names):
        raise UsageError(f"report labels must be unique, got {names}; use NAME=PATH")
    baseline = args.baseline or names[0]
    if baseline not in names:
        raise UsageError(f"baseline {baseline!r} is not one of {names}")
    reports = dict(loaded)
    base_ids = [p["patient_id"] for p in reports[baseline]["patients"]]
    masses = {}
    for name, rep in reports.items():
        by_id = {p["patient_id"]: p for p in rep["patients"]}
        if set(by_id) != set(base_ids) or len(by_id) != len(rep["patients"]):
            raise DataError(f"report {name!r} covers different patients than {baseline!r}; "
                            "the paired bootstrap needs identical patient sets")
        masses[name] = (np.array([by_id[i]["interaction_mass"] for i in base_ids]),
                        np.array([by_id[i]["total_mass"] for i in base_ids]))
    rows, cidx, pct = [], [], []
    for name, rep in reports.items():
        metrics = rep["metadata"].get("model", {}).get("metrics", {})
        c = metrics.get("test_cindex")
        row = {"name": name, "test_cindex": c,
               "interaction_percent": rep["global"]["interaction_percent"],
               "contributions_percent": rep["global"]["contributions_percent"]}
        if name != baseline:
            res = bootstrap_diff(*masses[name], *masses[baseline], args.iterations, args.seed)
            row["delta_vs_baseline"] = res.to_dict()
        rows.append(row)
        if c is not None:
            cidx.append(c)
            pct.append(row["interaction_percent"])
    rho = None
    if len(cidx) >= 3 and len(set(cidx)) > 1 and len(set(pct)) > 1:
        rho = spearman(cidx, pct)
    result = {"baseline": baseline, "iterations": args.iterations, "seed": args.seed,
              "n_patients": len(base_ids), "rows": rows,
              "spearman_cindex_vs_interaction": rho}
    write_json(args.out / "compare.json", result)
    lines = [f"{'model':<20} {'C-index':>8} {'InterSHAP%':>11}  delta vs {baseline} (95% CI, p)"]
    for r in rows:
        c = "-" if r["test_cindex"] is None else f"{r['test_cindex']:.3f}"
        d = r.get("delta_vs_baseline")
        delta = "-" if d is None else (f"{d['estimate']:+.2f} ({d['ci'][0]:+.2f}, "
                                       f"{d['ci'][1]:+.2f}), p={d['p_value']:.3f}")
        lines.append(f"{r['name']:<20} {c:>8} {r['interaction_percent']:>11.2f}  {delta}")
    lines.append("spearman rho (C-index, InterSHAP): " + ("n/a" if rho is None else f"{rho:.2f}"))
    text = "\n".join(lines)
    _write_text(args.out / "compare.txt", text + "\n")
    _echo_config(args.out, args, baseline=baseline)
    print(text)
    return 0


def cmd_report(args) -> int:
    """Per-patient interaction share against survival for one audit."""
    name, rep = _load_audit(args.audit)
    ds = load_dataset(args.data)
    pos = {pid: i for i, pid in enumerate(ds.patient_ids)}
    pts = [p for p in rep["patients"] if p["percent"] is not None]
    missing = [p["patient_id"] for p in pts if p["patient_id"] not in pos]
    if missing:
        raise DataError(f"audit patient {missing[0]!r} absent from the dataset")
    idx = np.array([pos[p["patient_id"]] for p in pts], dtype=np.int64)
    value = np.array([p["percent"] for p in pts])
    t, e = ds.time[idx], ds.event[idx]
    result = {"name": name, "n_patients": len(pts),
              "global": rep["global"], "median_split": median_split_survival(value, t, e).to_dict()}
    try:
        result["quartile_trend"] = quartile_trend(value, t, e).to_dict()
    except StatsError as exc:
        result["quartile_trend"] = None
        result["quartile_note"] = str(exc)
    write_json(args.out / "report.json", result)
    _echo_config(args.out, args)
    ms = result["median_split"]
    print(f"{name}: median split at {ms['threshold']:.3f}% interaction, median survival "
          f"{ms['median_survival_low']} vs {ms['median_survival_high']} months, "
          f"log-rank p={ms['log_rank_p']:.3g}")
    return 0


# -- parser -----------------------------------------------------------------

def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", default=None,
                        help="worker threads (default: $COXPLAIN_THREADS or 1)")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="coxplain",
                                description="Modality-interaction audits for multimodal Cox models.")
    p.add_argument("--version", action="version", version=f"coxplain {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--pattern", required=True, choices=sorted(PATTERNS + tuple(PATTERN_ALIASES)))
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--dims", type=int, nargs=2, default=[16, 16], metavar=("DA", "DB"))
    s.add_argument("--beta", type=float, default=2.0)
    s.add_argument("--noise", type=float, default=0.3)
    s.add_argument("--event-fraction", type=float, default=0.65)
    s.add_argument("--offset", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train a fusion model")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--arch", required=True, choices=KINDS)
    t.add_argument("--preset", choices=("desk", "paper"), default="desk")
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--weight-decay", type=float, default=1e-5)
    t.add_argument("--batch-size", type=_positive_int, default=128)
    t.add_argument("--patience", type=_positive_int, default=20)
    t.add_argument("--max-epochs", type=_positive_int, default=500)
    t.add_argument("--dropout", type=float, default=None)
    t.add_argument("--split-seed", type=int, default=0,
                   help="seed of the train/val/test split (kept fixed across training seeds)")
    t.add_argument("--test-fraction", type=float, default=0.2)
    t.add_argument("--brier-months", type=float, default=36.0)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("audit", parents=[common], help="InterSHAP audit of a checkpoint")
    a.add_argument("--model", required=True, type=Path)
    a.add_argument("--data", required=True, type=Path)
    a.add_argument("--masking", choices=MASKINGS, default="mean")
    a.add_argument("--convention", choices=CONVENTIONS, default="moebius")
    a.add_argument("--replicates", type=_positive_int, default=8,
                   help="donor draws per patient for shuffle masking")
    a.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    a.set_defaults(func=cmd_audit)

    v = sub.add_parser("validate", parents=[common], help="run the synthetic validation suite")
    v.set_defaults(seed=42)
    v.add_argument("--n", type=int, default=2000)
    v.add_argument("--train-seed", type=int, default=0)
    v.add_argument("--only", nargs="+", choices=CHECKS)
    v.set_defaults(func=cmd_validate)

    c = sub.add_parser("cv", parents=[common], help="k-fold stability of global InterSHAP")
    c.add_argument("--data", required=True, type=Path)
    c.add_argument("--arch", choices=KINDS, default="early-mlp")
    c.add_argument("--k", type=int, default=10)
    c.add_argument("--masking", choices=MASKINGS, default="mean")
    c.add_argument("--convention", choices=CONVENTIONS, default="moebius")
    c.set_defaults(func=cmd_cv)

    m = sub.add_parser("compare", parents=[common], help="compare audit reports")
    m.add_argument("reports", nargs="+", metavar="[NAME=]AUDIT")
    m.add_argument("--baseline", default=None, help="label of the reference report")
    m.add_argument("--iterations", type=int, default=1000)
    m.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", parents=[common],
                       help="survival by per-patient interaction share")
    r.add_argument("--audit", required=True)
    r.add_argument("--data", required=True, type=Path)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads = _threads(args.threads)
        args.out.mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))      # exits 2
    except USER_ERRORS as exc:
        print(f"coxplain: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
