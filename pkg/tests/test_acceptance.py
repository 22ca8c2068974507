"""Acceptance criteria, one test each.

The terminal summary prints a PASS/FAIL line per criterion (see conftest.py).
"""
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from coxplain import intershap as ish
from coxplain import models as md
from coxplain import numcore as nc
from coxplain import survival as sv
from coxplain import synthbench as sb
from coxplain.dataio import MultimodalDataset
from coxplain.stats import spearman
from oracles import moebius_by_inclusion_exclusion, sii_by_permutations


def random_dataset(rng, n, dims, loc=0.0, scale=1.0):
    mods = {"A": loc + scale * rng.standard_normal((n, dims[0])),
            "B": loc + scale * rng.standard_normal((n, dims[1]))}
    return MultimodalDataset(mods, [f"r{i}" for i in range(n)], rng.uniform(1, 60, n),
                             rng.random(n) < 0.7)


def coalition_table(v):
    v = np.atleast_2d(v)
    m = v.shape[1].bit_length() - 1
    names = [f"x{i}" for i in range(m)]
    return ish.CoalitionTable(names, [str(k) for k in range(len(v))], v)


@pytest.mark.criterion(1, "late-fusion zero-check")
def test_late_fusion_zero_check():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    datasets = [sb.generate(sb.SynthSpec(p, n=300, dims=(16, 16), seed=7))[0]
                for p in sb.PATTERNS]
    datasets.append(sb.generate(sb.SynthSpec("uniqueness", n=200, dims=(5, 9), seed=8,
                                             offset=4.0))[0])
    datasets.append(random_dataset(rng, 150, (3, 12), loc=-2.0, scale=5.0))
    models = []
    for ds in datasets:
        spec = md.preset("late-linear", (ds.modalities["A"].shape[1], ds.modalities["B"].shape[1]))
        models.append((md.build(spec, 3), ds))
        tr, va, _ = sb.train_val_test(ds, 0)
        hp = md.Hyperparams(lr=1e-2, patience=5, max_epochs=10, batch_size=64)
        models.append((md.train(spec, ds, tr, va, hp, seed=1), ds))
    worst_patient = worst_global = 0.0
    settings = 0
    for model, ds in models:
        ref = ds.matrices()
        for kind in ish.MASKINGS:
            for conv in ish.CONVENTIONS:
                rep = ish.audit(model, ds, ish.MaskingStrategy(kind, ref, 3, seed=2), conv)
                worst_patient = max(worst_patient, float(np.abs(rep.decomposition.interactions).max()))
                worst_global = max(worst_global, rep.interaction_percent)
                settings += 1
    elapsed = time.perf_counter() - start
    print(f"\n{settings} settings, worst per-patient {worst_patient:.3g}, "
          f"worst global {worst_global:.3g}%, {elapsed:.1f}s")
    assert settings == len(models) * 6
    assert worst_patient < 1e-12
    assert worst_global < 1e-10
    assert elapsed < 10


@pytest.mark.slow
@pytest.mark.criterion(2, "synthetic validation suite")
def test_synthetic_suite():
    start = time.perf_counter()
    rep = sb.run_validation_suite()
    elapsed = time.perf_counter() - start
    print("\n" + rep.table() + f"\n{elapsed:.1f}s")
    observed = {c.name: c.observed for c in rep.checks}
    assert observed["uniqueness"] < 2.0
    assert observed["xor-synergy"] > 90.0
    assert 25.0 <= observed["redundancy"] <= 55.0
    assert elapsed < 300


@pytest.mark.criterion(3, "Shapley oracle equivalence, M=3")
def test_shapley_oracle_equivalence():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    v = rng.normal(0, 10, (100, 8))
    t = coalition_table(v)
    moeb = ish.moebius_transform(v)
    worst = 0.0
    for k in range(100):
        worst = max(worst, np.abs(moeb[k] - moebius_by_inclusion_exclusion(v[k], 3)).max())
    for i, j in ((0, 1), (0, 2), (1, 2)):
        fast = ish.shapley_interaction_index(t, i, j)
        brute = np.array([sii_by_permutations(v[k], 3, i, j) for k in range(100)])
        worst = max(worst, np.abs(fast - brute).max())
    elapsed = time.perf_counter() - start
    print(f"\nmax abs error {worst:.3g}, {elapsed:.2f}s")
    assert worst < 1e-10
    assert elapsed < 5


@pytest.mark.criterion(4, "M=2 consistency")
def test_two_modality_consistency():
    v = np.random.default_rng(4).normal(0, 10, (1000, 4))
    t = coalition_table(v)
    psi = ish.shapley_interaction_index(t, 0, 1)
    phi_int = ish.shapley_two_modality(t).interactions[:, 0]
    m_ab = ish.moebius_decomposition(t).interactions[:, 0]
    assert np.abs(psi - 2 * phi_int).max() < 1e-10
    assert np.abs(psi - m_ab).max() < 1e-10


@pytest.mark.criterion(5, "efficiency and completeness")
def test_efficiency_and_completeness():
    rng = np.random.default_rng(5)
    ds = random_dataset(rng, 120, (16, 16), loc=0.5, scale=2.0)
    models = [md.build(md.preset(kind, (16, 16)), 5) for kind in md.KINDS]
    syn = sb.generate(sb.SynthSpec("xor-synergy", n=400, seed=5))[0]
    tr, va, te = sb.train_val_test(syn, 5)
    hp = md.Hyperparams(lr=1e-3, patience=5, max_epochs=10)
    trained = md.train(md.preset("bilinear", (16, 16)), syn, tr, va, hp, seed=0)
    cases = [(m, ds) for m in models] + [(trained, syn.subset(te))]
    audited = worst = 0
    for model, data in cases:
        for kind in ish.MASKINGS:
            table = ish.evaluate_coalitions(model, data, ish.MaskingStrategy(kind, data.matrices(),
                                                                             3, seed=1))
            span = table.values[:, -1] - table.values[:, 0]
            pe = ish.shapley_two_modality(table)
            mb = ish.moebius_decomposition(table)
            worst = max(worst, np.abs(pe.mains.sum(1) - span).max(),
                        np.abs(mb.mains.sum(1) + mb.interactions.sum(1) - span).max())
            audited += len(span)
    print(f"\n{audited} patient audits, worst residual {worst:.3g}")
    assert worst < 1e-10


@pytest.mark.criterion(6, "gradient correctness")
def test_gradient_correctness():
    rng = np.random.default_rng(6)
    start = time.perf_counter()
    h = 1e-6
    n = 12
    time_ = rng.uniform(1, 50, n)
    event = rng.random(n) < 0.7
    event[0] = True

    # the loss alone, with respect to the scores
    s = rng.standard_normal(n)
    _, g = sv.cox_nll_grad(s, time_, event)
    fd = np.array([(sv.cox_nll(s + h * e, time_, event) - sv.cox_nll(s - h * e, time_, event))
                   / (2 * h) for e in np.eye(n)])
    errors = {"cox": np.linalg.norm(g - fd) / (np.linalg.norm(g) + np.linalg.norm(fd))}

    # the loss composed with every architecture, with respect to every parameter
    inputs = {"A": rng.standard_normal((n, 16)), "B": rng.standard_normal((n, 16))}
    for kind in md.KINDS:
        spec = md.preset(kind, (16, 16))
        graph = md.build_graph(spec).g
        params = md.init_params(spec, 6)

        def loss():
            return sv.cox_nll(nc.forward(graph, inputs, params)[:, 0], time_, event)
        out = nc.forward(graph, inputs, params)
        _, dscore = sv.cox_nll_grad(out[:, 0], time_, event)
        analytic = nc.backward(graph, dscore[:, None])
        a_all, f_all = [], []
        for name, val in params.items():
            for idx in np.ndindex(val.shape):
                orig = val[idx]
                val[idx] = orig + h
                up = loss()
                val[idx] = orig - h
                down = loss()
                val[idx] = orig
                a_all.append(analytic[name][idx])
                f_all.append((up - down) / (2 * h))
        a_all, f_all = np.array(a_all), np.array(f_all)
        errors[kind] = np.linalg.norm(a_all - f_all) / (np.linalg.norm(a_all) + np.linalg.norm(f_all))
    elapsed = time.perf_counter() - start
    print("\n" + ", ".join(f"{k} {v:.2g}" for k, v in errors.items()) + f"; {elapsed:.1f}s")
    assert max(errors.values()) < 1e-5
    assert elapsed < 30


@pytest.mark.criterion(7, "metric sanity")
def test_metric_sanity():
    t = np.arange(1.0, 11.0)
    e = np.ones(10, bool)
    assert sv.concordance_index(-t, t, e) == 1.0
    assert sv.concordance_index(np.zeros(10), t, e) == 0.5

    base = sv.breslow_baseline(np.zeros(10), t, e)
    perfect = np.where(t <= 4.0, 60.0, -60.0)
    assert sv.brier_score(perfect, t, e, base, 4.0) == pytest.approx(0.0, abs=1e-20)

    # distinct events: S drops by 1/(n at risk) at each event
    km = sv.kaplan_meier([1, 2, 3, 4], [1, 1, 1, 1])
    np.testing.assert_allclose(km.survival, [0.75, 0.5, 0.25, 0.0])
    # censored at 2 and 4: 5/6, then 5/6*3/4, then 5/6*3/4*1/2
    km = sv.kaplan_meier([1, 2, 3, 3, 4, 5], [1, 0, 1, 0, 0, 1])
    np.testing.assert_allclose([km(x) for x in (1, 2, 3, 4.5, 5)],
                               [5 / 6, 5 / 6, 5 / 8, 5 / 8, 0.0])
    km = sv.kaplan_meier([2, 5], [0, 0])
    assert km(10.0) == 1.0


@pytest.mark.criterion(8, "parameter counts")
def test_parameter_counts():
    shapes = md.parameter_shapes(md.preset("bilinear", name="paper"))
    core = math.prod(shapes["bilinear.W1"]) + math.prod(shapes["bilinear.W2"])
    assert core == 262_144
    assert md.parameter_count(md.preset("early-mlp", name="paper")) == 8_800_969


@pytest.mark.slow
@pytest.mark.criterion(9, "masking inflation direction")
def test_zero_masking_inflates():
    cfg = sb.SuiteConfig()
    ds = sb.generate(sb.SynthSpec("uniqueness", n=2000, seed=42))[0]
    model, _, reports = sb.fit_and_audit(ds, "early-mlp", cfg, masking="mean")
    _, _, te = sb.train_val_test(ds, cfg.seed)
    zero = ish.audit(model, ds.subset(te), ish.MaskingStrategy("zero"))
    mean = reports["moebius"].interaction_percent
    print(f"\nmean {mean:.3f}%, zero {zero.interaction_percent:.3f}%")
    assert zero.interaction_percent >= mean


@pytest.mark.slow
@pytest.mark.criterion(10, "cross-validation stability")
def test_cv_stability():
    ds = sb.generate(sb.SynthSpec("redundancy", n=2000, seed=42))[0]
    res = sb.cv_stability(ds, k=10, seed=42)
    print(f"\nfolds {np.round(res.values, 2).tolist()}, cv {res.cv:.3f}")
    assert len(res.values) == 10
    assert res.cv < 0.25


@pytest.mark.criterion(11, "Spearman reproduction")
def test_spearman_reproduction():
    cindex = [0.636, 0.814, 0.819, 0.807]
    intershap = [4.82, 3.03, 3.72, 4.45]
    assert spearman(cindex, intershap) == -0.8


CLI_SCRIPT = [
    ["synth", "--pattern", "xor-synergy", "--n", "300", "--dims", "6", "6", "--seed", "5",
     "--out", "ds"],
    ["train", "--data", "ds", "--arch", "bilinear", "--lr", "1e-3", "--max-epochs", "8",
     "--seed", "1", "--out", "m1"],
    ["train", "--data", "ds", "--arch", "early-mlp", "--lr", "1e-3", "--max-epochs", "8",
     "--dropout", "0.2", "--seed", "2", "--out", "m2"],
    ["audit", "--model", "m1", "--data", "ds", "--out", "a1"],
    ["audit", "--model", "m2", "--data", "ds", "--out", "a2"],
    ["audit", "--model", "m1", "--data", "ds", "--masking", "shuffle", "--replicates", "3",
     "--convention", "paper-eqs", "--seed", "4", "--out", "a3"],
    ["compare", "a1", "a2", "shuffled=a3", "--iterations", "200", "--seed", "3", "--out", "cmp"],
    ["report", "--audit", "a1", "--data", "ds", "--out", "rep"],
    ["cv", "--data", "ds", "--arch", "late-linear", "--k", "3", "--out", "cv"],
    ["validate", "--only", "late-fusion-zero", "uniqueness", "--n", "300", "--out", "val"],
]


def _run_script(cwd: Path) -> dict[str, bytes]:
    env = {k: v for k, v in os.environ.items() if k != "COXPLAIN_THREADS"}
    codes = []
    for argv in CLI_SCRIPT:
        proc = subprocess.run([sys.executable, "-m", "coxplain", *argv, "--threads", "1"],
                              cwd=cwd, env=env, capture_output=True, text=True)
        assert proc.returncode in (0, 1), proc.stderr
        codes.append(proc.returncode)
    files = {str(p.relative_to(cwd)): p.read_bytes() for p in sorted(cwd.rglob("*"))
             if p.is_file()}
    files["exit codes"] = repr(codes).encode()
    return files


@pytest.mark.slow
@pytest.mark.criterion(12, "CLI determinism")
def test_cli_determinism(tmp_path):
    first, second = tmp_path / "one", tmp_path / "two"
    first.mkdir()
    second.mkdir()
    a = _run_script(first)
    b = _run_script(second)
    print(f"\n{len(a) - 1} files compared")
    assert sorted(a) == sorted(b)
    kinds = {Path(k).suffix for k in a}
    assert {".json", ".csv", ".bin", ".txt"} <= kinds
    differing = [k for k in a if a[k] != b[k]]
    assert not differing
