"""Fusion architectures over two modality embeddings, training and checkpoints.

Modality order is ``(A, B)``; the gated model applies ``f`` to A and ``g`` to
B, and the gate weight alpha multiplies the A branch.

Weights are stored ``(fan_in, fan_out)`` so a layer is ``x @ W + b``. The
canonical parameter order is graph creation order: layers in forward order,
each layer's weight (row-major) followed by its bias.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .dataio import DataError, MultimodalDataset, read_json, write_json
from .survival import concordance_index, cox_nll_grad

log = logging.getLogger(__name__)

KINDS = ("early-mlp", "cross-attention", "bilinear", "gated",
         "unimodal-a", "unimodal-b", "late-linear")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: str
    dims: tuple[int, int]
    hidden: tuple[int, ...] = (32, 8)
    dropout: float = 0.25
    rank: int = 16          # bilinear
    attn_dim: int = 8       # cross-attention projection
    tokens: int = 4         # cross-attention tokens per modality
    gate_dim: int = 16      # gated branch width

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown architecture {self.kind!r}; choose from {KINDS}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.dims) != 2:
            raise ModelError("exactly two modality dims required")
        if min(self.dims) <= 0 or any(h <= 0 for h in self.hidden):
            raise ModelError("dims must be positive")
        if min(self.rank, self.attn_dim, self.tokens, self.gate_dim) <= 0:
            raise ModelError("rank, attn_dim, tokens and gate_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout {self.dropout} outside [0, 1)")
        if self.kind == "cross-attention" and any(d % self.tokens for d in self.dims):
            raise ModelError(f"modality dims {self.dims} not divisible by {self.tokens} tokens")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**{**d, "dims": tuple(d["dims"]), "hidden": tuple(d["hidden"])})


def preset(kind: str, dims=(16, 16), name: str = "desk") -> ArchitectureSpec:
    """Named size presets. ``paper`` matches the 2048-d embedding setting."""
    if name == "desk":
        return ArchitectureSpec(kind, tuple(dims), hidden=(32, 8), dropout=0.25,
                                rank=16, attn_dim=8, tokens=4, gate_dim=16)
    if name == "paper":
        return ArchitectureSpec(kind, (2048, 2048), hidden=(2048, 200), dropout=0.25,
                                rank=64, attn_dim=64, tokens=32, gate_dim=256)
    raise ModelError(f"unknown preset {name!r}")


# -- graph construction -----------------------------------------------------

class _Builder:
    def __init__(self):
        self.g = nc.Graph()
        self.shapes: dict[str, tuple[int, ...]] = {}
        self.init: dict[str, str] = {}

    def weight(self, name, shape, init):
        self.shapes[name] = tuple(shape)
        self.init[name] = init
        return self.g.param(name)

    def linear(self, x, prefix, fan_in, fan_out, relu=False):
        w = self.weight(f"{prefix}.W", (fan_in, fan_out), "kaiming" if relu else "xavier")
        b = self.weight(f"{prefix}.b", (fan_out,), "zeros")
        y = self.g.add(self.g.matmul(x, w), b)
        return self.g.relu(y) if relu else y

    def mlp(self, x, prefix, fan_in, hidden, p):
        for i, h in enumerate(hidden):
            x = self.g.dropout(self.linear(x, f"{prefix}{i}", fan_in, h, relu=True), p)
            fan_in = h
        return self.linear(x, f"{prefix}out", fan_in, 1)


def _attend(b: _Builder, q_tokens, kv_tokens, prefix, dq, dkv, attn):
    g = b.g
    q = g.matmul(q_tokens, b.weight(f"{prefix}.Wq", (dq, attn), "xavier"))
    k = g.matmul(kv_tokens, b.weight(f"{prefix}.Wk", (dkv, attn), "xavier"))
    v = g.matmul(kv_tokens, b.weight(f"{prefix}.Wv", (dkv, attn), "xavier"))
    weights = g.softmax(g.scale(g.matmul(q, g.transpose(k)), 1.0 / math.sqrt(attn)))
    return weights, g.matmul(weights, v)


def build_graph(spec: ArchitectureSpec) -> _Builder:
    b = _Builder()
    g = b.g
    xa, xb = g.input("A"), g.input("B")
    da, db = spec.dims
    p = spec.dropout
    if spec.kind == "early-mlp":
        out = b.mlp(g.concat(xa, xb), "mlp", da + db, spec.hidden, p)
    elif spec.kind == "unimodal-a":
        out = b.mlp(xa, "mlp", da, spec.hidden, p)
    elif spec.kind == "unimodal-b":
        out = b.mlp(xb, "mlp", db, spec.hidden, p)
    elif spec.kind == "late-linear":
        ha = b.mlp(xa, "a.mlp", da, spec.hidden, p)
        hb = b.mlp(xb, "b.mlp", db, spec.hidden, p)
        w = b.weight("combine.W", (2, 1), "ones")
        c = b.weight("combine.b", (1,), "zeros")
        out = g.add(g.matmul(g.concat(ha, hb), w), c)
    elif spec.kind == "bilinear":
        za = g.matmul(xa, b.weight("bilinear.W1", (da, spec.rank), "xavier"))
        zb = g.matmul(xb, b.weight("bilinear.W2", (db, spec.rank), "xavier"))
        out = b.mlp(g.mul(za, zb), "head", spec.rank, (spec.hidden[-1],), p)
    elif spec.kind == "gated":
        f = b.linear(xa, "f", da, spec.gate_dim, relu=True)
        gg = b.linear(xb, "g", db, spec.gate_dim, relu=True)
        alpha = g.sigmoid(b.linear(g.concat(xa, xb), "gate", da + db, spec.gate_dim))
        # alpha*f + (1-alpha)*g == g + alpha*(f - g)
        z = g.add(gg, g.mul(alpha, g.add(f, g.scale(gg, -1.0))))
        out = b.linear(g.dropout(z, p), "out", spec.gate_dim, 1)
    elif spec.kind == "cross-attention":
        t = spec.tokens
        ta = g.reshape(xa, t, da // t)
        tb = g.reshape(xb, t, db // t)
        _, o_ab = _attend(b, ta, tb, "attn_ab", da // t, db // t, spec.attn_dim)
        _, o_ba = _attend(b, tb, ta, "attn_ba", db // t, da // t, spec.attn_dim)
        pooled = g.concat(g.row_mean(o_ab), g.row_mean(o_ba))
        out = b.mlp(pooled, "head", 2 * spec.attn_dim, (spec.hidden[0],), p)
    g.set_output(out)
    return b


def parameter_shapes(spec: ArchitectureSpec) -> dict[str, tuple[int, ...]]:
    return build_graph(spec).shapes


def parameter_count(spec: ArchitectureSpec) -> int:
    return sum(math.prod(s) for s in parameter_shapes(spec).values())


def init_params(spec: ArchitectureSpec, seed: int) -> dict[str, np.ndarray]:
    b = build_graph(spec)
    rng = nc.rng_stream(seed, 1)
    params = {}
    for name, shape in b.shapes.items():
        kind = b.init[name]
        if kind == "zeros":
            params[name] = np.zeros(shape)
        elif kind == "ones":
            params[name] = np.ones(shape)
        else:
            fan_in, fan_out = shape
            bound = math.sqrt(6.0 / fan_in) if kind == "kaiming" else math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# -- model ------------------------------------------------------------------

@dataclass(frozen=True)
class Hyperparams:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 128
    patience: int = 20
    max_epochs: int = 500

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainedModel:
    spec: ArchitectureSpec
    params: dict[str, np.ndarray]
    seed: int
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    epochs_run: int = 0
    best_val_cindex: float | None = None
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        shapes = parameter_shapes(self.spec)
        if list(shapes) != list(self.params):
            raise ModelError("parameter names do not match the architecture")
        for k, s in shapes.items():
            if self.params[k].shape != s:
                raise ModelError(f"parameter {k!r} has shape {self.params[k].shape}, expected {s}")

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def predict(self, A, B, chunk: int = 4096) -> np.ndarray:
        """Log-risk per row in evaluation mode (dropout off)."""
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        da, db = self.spec.dims
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != da or B.shape[1] != db:
            raise ModelError(f"inputs {A.shape}, {B.shape} do not match dims ({da}, {db})")
        if len(A) != len(B):
            raise ModelError(f"row mismatch {len(A)} vs {len(B)}")
        graph = build_graph(self.spec).g
        out = np.empty(len(A))
        for s in range(0, len(A), chunk):
            out[s:s + chunk] = nc.forward(graph, {"A": A[s:s + chunk], "B": B[s:s + chunk]},
                                          self.params)[:, 0]
        return out


def build(spec: ArchitectureSpec, seed: int) -> TrainedModel:
    return TrainedModel(spec, init_params(spec, seed), seed)


# -- training ---------------------------------------------------------------

def _batches(n, batch_size, event, rng, max_tries=100):
    for attempt in range(max_tries):
        perm = rng.permutation(n)
        parts = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
        # fold a short tail into the previous batch
        if len(parts) > 1 and len(parts[-1]) < batch_size // 2:
            parts[-2] = np.concatenate([parts[-2], parts.pop()])
        if all(event[p].any() for p in parts):
            return parts
        warnings.warn("batch without events; resampling the batch partition")
    raise ModelError("could not form batches that all contain an event")


def train(spec: ArchitectureSpec, dataset: MultimodalDataset, train_idx, val_idx,
          hyperparams: Hyperparams | None = None, seed: int = 0) -> TrainedModel:
    """Adam on the Cox partial likelihood with early stopping on validation C-index.

    Returns the parameters of the best validation epoch (epoch 0 is the
    initialisation). Risk sets are formed within each mini-batch.
    """
    hp = hyperparams or Hyperparams()
    if len(dataset.modalities) != 2:
        raise ModelError("training expects exactly two modalities")
    A, B = dataset.matrices()
    tr = np.asarray(train_idx)
    va = np.asarray(val_idx)
    t_tr, e_tr = dataset.time[tr], dataset.event[tr]
    if not e_tr.any():
        raise ModelError("training split has no events")
    n_tr = len(tr)
    batch_size = n_tr if n_tr <= 256 else min(hp.batch_size, n_tr)

    model = build(spec, seed)
    graph = build_graph(spec).g
    params = model.params
    state = nc.AdamState(lr=hp.lr, weight_decay=hp.weight_decay)
    shuffle_rng = nc.rng_stream(seed, 2)
    dropout_rng = nc.rng_stream(seed, 3)

    def val_cindex(p):
        m = TrainedModel(spec, p, seed)
        return concordance_index(m.predict(A[va], B[va]), dataset.time[va], dataset.event[va])

    best = val_cindex(params)
    best_params = params
    history = [best]
    wait = 0
    epochs = 0
    for epoch in range(1, hp.max_epochs + 1):
        for part in _batches(n_tr, batch_size, e_tr, shuffle_rng):
            idx = tr[part]
            out = nc.forward(graph, {"A": A[idx], "B": B[idx]}, params,
                             train=True, rng=dropout_rng)
            loss, g = cox_nll_grad(out[:, 0], t_tr[part], e_tr[part])
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite Cox loss at epoch {epoch}")
            grads = nc.backward(graph, g[:, None])
            params = nc.adam_step(state, params, grads)
        epochs = epoch
        c = val_cindex(params)
        history.append(c)
        if c > best:
            best, best_params, wait = c, params, 0
        else:
            wait += 1
            if wait >= hp.patience:
                break
    log.info("%s: %d epochs, best val C-index %.4f", spec.kind, epochs, best)
    return TrainedModel(spec, best_params, seed, hp, epochs, best, history)


# -- checkpoints ------------------------------------------------------------

def save_model(model: TrainedModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "hyperparams": model.hyperparams.to_dict(),
        "parameter_count": model.parameter_count,
        "parameters": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
        "byte_order": "little-endian float64, canonical parameter order, row-major",
        "epochs_run": model.epochs_run,
        "best_val_cindex": model.best_val_cindex,
        "history": model.history,
    }
    write_json(d / "model.json", manifest)
    (d / "model.bin").write_bytes(model.flat_params().astype("<f8").tobytes())


def load_model(directory) -> TrainedModel:
    d = Path(directory)
    if not (d / "model.json").is_file() or not (d / "model.bin").is_file():
        raise DataError(f"{d}: not a checkpoint (model.json + model.bin required)")
    m = read_json(d / "model.json")
    spec = ArchitectureSpec.from_dict(m["spec"])
    flat = np.frombuffer((d / "model.bin").read_bytes(), dtype="<f8").astype(np.float64)
    if flat.size != m["parameter_count"]:
        raise DataError(f"{d / 'model.bin'}: {flat.size} values, manifest says {m['parameter_count']}")
    params, pos = {}, 0
    for entry in m["parameters"]:
        size = math.prod(entry["shape"])
        params[entry["name"]] = flat[pos:pos + size].reshape(entry["shape"]).copy()
        pos += size
    return TrainedModel(spec, params, m["seed"], Hyperparams(**m["hyperparams"]),
                        m["epochs_run"], m["best_val_cindex"], m.get("history", []))
