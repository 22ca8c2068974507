import dataclasses
import math

import numpy as np
import pytest

from coxplain import models as md
from coxplain import numcore as nc
from coxplain.synthbench import SynthSpec, generate, train_val_test


def relu(x):
    return np.maximum(x, 0.0)


def randomize(model, rng, scale=0.5):
    for k, v in model.params.items():
        model.params[k] = scale * rng.standard_normal(v.shape)
    return model


def test_paper_scale_parameter_counts():
    layers = 4096 * 2048 + 2048 + 2048 * 200 + 200 + 200 * 1 + 1
    assert md.parameter_count(md.preset("early-mlp", name="paper")) == layers == 8_800_657
    shapes = md.parameter_shapes(md.preset("bilinear", name="paper"))
    core = math.prod(shapes["bilinear.W1"]) + math.prod(shapes["bilinear.W2"])
    assert core == 2 * 64 * 2048 == 262_144


@pytest.mark.parametrize("kind", md.KINDS)
def test_build_is_deterministic(kind):
    spec = md.preset(kind, (8, 8))
    a, b = md.build(spec, 11), md.build(spec, 11)
    assert a.flat_params().tobytes() == b.flat_params().tobytes()
    assert a.flat_params().tobytes() != md.build(spec, 12).flat_params().tobytes()


def test_invalid_specs():
    with pytest.raises(md.ModelError):
        md.ArchitectureSpec("transformer", (4, 4))
    with pytest.raises(md.ModelError, match="divisible"):
        md.preset("cross-attention", (6, 8))
    with pytest.raises(md.ModelError, match="dims"):
        md.build(md.preset("early-mlp", (4, 4)), 0).predict(np.ones((2, 3)), np.ones((2, 4)))


def test_late_linear_exactly_additive(rng):
    m = randomize(md.build(md.preset("late-linear", (5, 6)), 0), rng)
    A, B = rng.standard_normal((40, 5)), rng.standard_normal((40, 6))
    A0, B0 = rng.standard_normal((40, 5)), rng.standard_normal((40, 6))
    d = m.predict(A, B) - m.predict(A, B0) - m.predict(A0, B) + m.predict(A0, B0)
    assert np.abs(d).max() < 1e-12


def test_late_linear_combiner_weights(rng):
    spec = md.preset("late-linear", (3, 3))
    m = randomize(md.build(spec, 0), rng)
    A, B = rng.standard_normal((10, 3)), rng.standard_normal((10, 3))
    branch_a = dataclasses.replace(spec, kind="unimodal-a")
    pa = {k[2:]: v for k, v in m.params.items() if k.startswith("a.")}
    pb = {k[2:]: v for k, v in m.params.items() if k.startswith("b.")}
    ha = md.TrainedModel(branch_a, pa, 0).predict(A, B)
    hb = md.TrainedModel(dataclasses.replace(spec, kind="unimodal-b"), pb, 0).predict(A, B)
    a, b = m.params["combine.W"][:, 0]
    c = m.params["combine.b"][0]
    np.testing.assert_allclose(m.predict(A, B), a * ha + b * hb + c, rtol=1e-13, atol=1e-13)


def gated_oracle(p, A, B):
    f = relu(A @ p["f.W"] + p["f.b"])
    g = relu(B @ p["g.W"] + p["g.b"])
    pre = np.concatenate([A, B], axis=1) @ p["gate.W"] + p["gate.b"]
    alpha = 1 / (1 + np.exp(-pre))
    z = alpha * f + (1 - alpha) * g
    return (z @ p["out.W"] + p["out.b"])[:, 0], f, g, z


def test_gated_matches_oracle_and_is_convex(rng):
    m = randomize(md.build(md.preset("gated", (4, 5)), 0), rng)
    A, B = rng.standard_normal((30, 4)), rng.standard_normal((30, 5))
    out, f, g, z = gated_oracle(m.params, A, B)
    np.testing.assert_allclose(m.predict(A, B), out, rtol=1e-12, atol=1e-12)
    assert np.all(z >= np.minimum(f, g) - 1e-15) and np.all(z <= np.maximum(f, g) + 1e-15)


def test_gated_saturation_selects_a_branch(rng):
    m = randomize(md.build(md.preset("gated", (4, 5)), 0), rng)
    m.params["gate.b"] = np.full_like(m.params["gate.b"], 60.0)
    A, B = rng.standard_normal((20, 4)), rng.standard_normal((20, 5))
    p = m.params
    f_only = (relu(A @ p["f.W"] + p["f.b"]) @ p["out.W"] + p["out.b"])[:, 0]
    np.testing.assert_allclose(m.predict(A, B), f_only, rtol=1e-10, atol=1e-10)


def test_cross_attention_uniform_on_repeated_tokens(rng):
    spec = md.ArchitectureSpec("cross-attention", (4, 4), hidden=(3, 2), attn_dim=2, tokens=2)
    m = randomize(md.build(spec, 0), rng)
    ta, tb = rng.standard_normal((1, 2)), rng.standard_normal((1, 2))
    A, B = np.tile(ta, (1, 2)), np.tile(tb, (1, 2))
    b = md.build_graph(spec)
    nc.forward(b.g, {"A": A, "B": B}, m.params)
    for nid, node in enumerate(b.g.nodes):
        if node.op == "softmax":
            np.testing.assert_allclose(b.g.value(nid), 0.5, rtol=1e-15)
    p = m.params
    pooled = np.concatenate([tb @ p["attn_ab.Wv"], ta @ p["attn_ba.Wv"]], axis=1)
    h = relu(pooled @ p["head0.W"] + p["head0.b"])
    expected = (h @ p["headout.W"] + p["headout.b"])[:, 0]
    np.testing.assert_allclose(m.predict(A, B), expected, rtol=1e-12)


def test_unimodal_ignores_other_modality(rng):
    m = randomize(md.build(md.preset("unimodal-a", (3, 3)), 0), rng)
    A = rng.standard_normal((10, 3))
    assert np.array_equal(m.predict(A, rng.standard_normal((10, 3))),
                          m.predict(A, rng.standard_normal((10, 3))))


@pytest.fixture(scope="module")
def uniq():
    ds = generate(SynthSpec("uniqueness", n=1000, dims=(8, 8), seed=5))[0]
    return ds, train_val_test(ds, 5)


def test_unimodal_a_learns_uniqueness_signal(uniq):
    ds, (tr, va, _) = uniq
    hp = md.Hyperparams(lr=1e-3, patience=10, max_epochs=60)
    m = md.train(md.preset("unimodal-a", (8, 8)), ds, tr, va, hp, seed=0)
    assert m.best_val_cindex > 0.7
    assert m.epochs_run <= hp.max_epochs
    assert m.best_val_cindex == max(m.history)


def test_zero_learning_rate_keeps_initialisation(uniq):
    ds, (tr, va, _) = uniq
    spec = md.preset("early-mlp", (8, 8))
    m = md.train(spec, ds, tr, va, md.Hyperparams(lr=0.0, patience=3), seed=4)
    assert m.flat_params().tobytes() == md.build(spec, 4).flat_params().tobytes()
    assert m.best_val_cindex == m.history[0]


def test_training_is_deterministic_and_checkpoints_round_trip(uniq, tmp_path):
    ds, (tr, va, _) = uniq
    spec = md.preset("gated", (8, 8))
    hp = md.Hyperparams(lr=1e-3, patience=3, max_epochs=8)
    a = md.train(spec, ds, tr, va, hp, seed=2)
    b = md.train(spec, ds, tr, va, hp, seed=2)
    assert a.flat_params().tobytes() == b.flat_params().tobytes()
    md.save_model(a, tmp_path / "ck1")
    md.save_model(b, tmp_path / "ck2")
    for f in ("model.json", "model.bin"):
        assert (tmp_path / "ck1" / f).read_bytes() == (tmp_path / "ck2" / f).read_bytes()
    back = md.load_model(tmp_path / "ck1")
    assert back.flat_params().tobytes() == a.flat_params().tobytes()
    assert back.spec == a.spec and back.hyperparams == a.hyperparams
    X = ds.matrices()
    assert np.array_equal(back.predict(*X), a.predict(*X))


def test_truncated_checkpoint_rejected(uniq, tmp_path):
    m = md.build(md.preset("bilinear", (8, 8)), 0)
    md.save_model(m, tmp_path)
    raw = (tmp_path / "model.bin").read_bytes()
    (tmp_path / "model.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="manifest"):
        md.load_model(tmp_path)


def test_predict_is_side_effect_free(rng):
    m = md.build(md.preset("early-mlp", (4, 4)), 0)
    before = m.flat_params().copy()
    A, B = rng.standard_normal((7, 4)), rng.standard_normal((7, 4))
    assert np.array_equal(m.predict(A, B), m.predict(A, B))
    assert np.array_equal(before, m.flat_params())
