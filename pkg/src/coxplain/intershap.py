"""Modality-level Shapley decomposition of log-risk outputs.

Coalitions are bitmasks over the M modalities: bit ``i`` set means modality
``i`` is presented unmasked. ``v[:, mask]`` holds the model output for that
coalition, so column 0 is the empty coalition and column ``2**M - 1`` the
full model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import MultimodalDataset
from .numcore import rng_stream

MAX_MODALITIES = 10
DEGENERATE_EPS = 1e-12
MASKINGS = ("mean", "shuffle", "zero")
CONVENTIONS = ("moebius", "paper-eqs")


class InterSHAPError(ValueError):
    pass


@dataclass
class MaskingStrategy:
    """How an absent modality is filled in.

    ``reference`` is the background sample per modality (the training split):
    its column means feed ``mean`` masking and its rows are the donors for
    ``shuffle``.
    """

    kind: str = "mean"
    reference: list[np.ndarray] | None = None
    replicates: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MASKINGS:
            raise InterSHAPError(f"unknown masking {self.kind!r}; choose from {MASKINGS}")
        if self.replicates < 1:
            raise InterSHAPError("shuffle replicates must be >= 1")

    def describe(self) -> dict:
        d = {"kind": self.kind, "seed": self.seed}
        if self.kind == "shuffle":
            d["replicates"] = self.replicates
        return d


@dataclass
class CoalitionTable:
    names: list[str]
    patient_ids: list[str]
    values: np.ndarray          # (n, 2**M)

    @property
    def m(self) -> int:
        return len(self.names)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != 1 << len(self.names):
            raise InterSHAPError(f"coalition table shape {self.values.shape} inconsistent "
                                 f"with {len(self.names)} modalities")
        if len(self.patient_ids) != self.values.shape[0]:
            raise InterSHAPError("patient ids do not match table rows")


def subset_label(mask: int, names) -> str:
    return "+".join(n for i, n in enumerate(names) if mask >> i & 1) or "{}"


def _predict(model, mats):
    return np.asarray(model.predict(*mats), dtype=np.float64).ravel()


def evaluate_coalitions(model, dataset: MultimodalDataset | list,
                        masking: MaskingStrategy | None = None,
                        patient_ids: list[str] | None = None,
                        names: list[str] | None = None) -> CoalitionTable:
    """v(S) for every patient and every modality subset S.

    ``model`` is anything with ``predict(*modality_matrices)``. For shuffle
    masking, replicate ``r`` of patient ``i`` borrows the masked modalities
    from reference row ``donor(seed, i, r)``; the same donor is used for every
    coalition so that additive models stay exactly additive.
    """
    masking = masking or MaskingStrategy()
    if isinstance(dataset, MultimodalDataset):
        mats = dataset.matrices()
        names = dataset.names
        patient_ids = dataset.patient_ids
    else:
        mats = [np.asarray(x, dtype=np.float64) for x in dataset]
        names = names or [f"m{i}" for i in range(len(mats))]
        patient_ids = patient_ids or [str(i) for i in range(len(mats[0]))]
    m = len(mats)
    if m < 2:
        raise InterSHAPError("need at least two modalities")
    if m > MAX_MODALITIES:
        raise InterSHAPError(f"exact evaluation limited to M <= {MAX_MODALITIES}")
    n = len(mats[0])
    if n == 0:
        raise InterSHAPError("empty dataset")
    if any(len(x) != n for x in mats):
        raise InterSHAPError("modalities have different row counts")
    ref = masking.reference if masking.reference is not None else mats
    if len(ref) != m or any(r.shape[1] != x.shape[1] for r, x in zip(ref, mats)):
        raise InterSHAPError("masking reference does not match modality dims")

    values = np.empty((n, 1 << m))
    if masking.kind in ("mean", "zero"):
        fill = [np.broadcast_to(r.mean(axis=0) if masking.kind == "mean" else np.zeros(r.shape[1]),
                                x.shape) for r, x in zip(ref, mats)]
        for mask in range(1 << m):
            inputs = [mats[i] if mask >> i & 1 else fill[i] for i in range(m)]
            values[:, mask] = _predict(model, inputs)
        return CoalitionTable(list(names), list(patient_ids), values)

    n_ref = len(ref[0])
    donors = np.empty((n, masking.replicates), dtype=np.int64)
    for i in range(n):
        for r in range(masking.replicates):
            donors[i, r] = rng_stream(masking.seed, i, r).integers(n_ref)
    for mask in range(1 << m):
        acc = np.zeros(n)
        for r in range(masking.replicates):
            inputs = [mats[i] if mask >> i & 1 else ref[i][donors[:, r]] for i in range(m)]
            acc += _predict(model, inputs)
        values[:, mask] = acc / masking.replicates
    return CoalitionTable(list(names), list(patient_ids), values)


def moebius_transform(values: np.ndarray) -> np.ndarray:
    """m(S) = sum_{T subset S} (-1)^{|S|-|T|} v(T), over the last axis."""
    out = np.array(values, dtype=np.float64, copy=True)
    size = out.shape[-1]
    bit = 1
    while bit < size:
        for mask in range(size):
            if mask & bit:
                out[..., mask] -= out[..., mask ^ bit]
        bit <<= 1
    return out


def shapley_values(values: np.ndarray) -> np.ndarray:
    """Per-modality Shapley values from a coalition array ``(n, 2**M)``."""
    size = values.shape[-1]
    m = size.bit_length() - 1
    phi = np.zeros(values.shape[:-1] + (m,))
    for i in range(m):
        bit = 1 << i
        for mask in range(size):
            if mask & bit:
                continue
            s = bin(mask).count("1")
            w = math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m)
            phi[..., i] += w * (values[..., mask | bit] - values[..., mask])
    return phi


def shapley_interaction_index(table: CoalitionTable, i: int, j: int) -> np.ndarray:
    """Pairwise Shapley interaction index psi_ij per patient."""
    if i == j:
        raise InterSHAPError("interaction index needs two distinct modalities")
    m = table.m
    if not (0 <= i < m and 0 <= j < m):
        raise InterSHAPError(f"modality index out of range for M={m}")
    v = table.values
    bi, bj = 1 << i, 1 << j
    psi = np.zeros(len(v))
    for mask in range(1 << m):
        if mask & (bi | bj):
            continue
        s = bin(mask).count("1")
        w = math.factorial(s) * math.factorial(m - s - 2) / math.factorial(m - 1)
        psi += w * (v[:, mask | bi | bj] - v[:, mask | bi] - v[:, mask | bj] + v[:, mask])
    return psi


@dataclass
class ShapleyDecomposition:
    convention: str
    names: list[str]
    patient_ids: list[str]
    mains: np.ndarray                 # (n, M)
    interactions: np.ndarray          # (n, K)
    interaction_labels: list[str]
    residual: np.ndarray              # v(full) - v({}) - sum of all terms


def decompose(table: CoalitionTable, convention: str = "moebius") -> ShapleyDecomposition:
    if convention == "moebius":
        return moebius_decomposition(table)
    if convention == "paper-eqs":
        return shapley_two_modality(table)
    raise InterSHAPError(f"unknown convention {convention!r}; choose from {CONVENTIONS}")


def shapley_two_modality(table: CoalitionTable) -> ShapleyDecomposition:
    """Half-weighted main effects and interaction for two modalities."""
    if table.m != 2:
        raise InterSHAPError(f"two-modality decomposition needs M=2, got {table.m}")
    v = table.values
    v0, va, vb, vab = v[:, 0], v[:, 1], v[:, 2], v[:, 3]
    phi_a = 0.5 * (va - v0) + 0.5 * (vab - vb)
    phi_b = 0.5 * (vb - v0) + 0.5 * (vab - va)
    phi_int = 0.5 * (vab - va - vb + v0)
    mains = np.stack([phi_a, phi_b], axis=1)
    residual = (vab - v0) - (phi_a + phi_b)
    return ShapleyDecomposition("paper-eqs", table.names, table.patient_ids, mains,
                                phi_int[:, None], [subset_label(3, table.names)], residual)


def moebius_decomposition(table: CoalitionTable) -> ShapleyDecomposition:
    m = table.m
    coef = moebius_transform(table.values)
    singles = [1 << i for i in range(m)]
    higher = [s for s in range(1, 1 << m) if bin(s).count("1") >= 2]
    mains = coef[:, singles]
    inter = coef[:, higher]
    residual = (table.values[:, -1] - table.values[:, 0]) - coef[:, 1:].sum(axis=1)
    return ShapleyDecomposition("moebius", table.names, table.patient_ids, mains, inter,
                                [subset_label(s, table.names) for s in higher], residual)


@dataclass
class GlobalInterSHAP:
    interaction_percent: float
    contributions: dict[str, float]
    per_patient_percent: np.ndarray       # nan where degenerate
    numerators: np.ndarray                # per-patient sum |interactions|
    denominators: np.ndarray              # per-patient total absolute mass
    degenerate: int


def global_intershap(decomp: ShapleyDecomposition) -> GlobalInterSHAP:
    """Interaction mass as a percentage of total absolute decomposition mass."""
    n = len(decomp.mains)
    if n == 0:
        raise InterSHAPError("no patients")
    main_abs = np.abs(decomp.mains)
    num = np.abs(decomp.interactions).sum(axis=1)
    den = main_abs.sum(axis=1) + num
    ok = den >= DEGENERATE_EPS
    if not ok.any():
        raise InterSHAPError("every patient has a degenerate (near-zero) decomposition")
    total = den[ok].sum()
    pct = np.full(n, np.nan)
    pct[ok] = 100.0 * num[ok] / den[ok]
    contrib = {name: float(100.0 * main_abs[ok, i].sum() / total)
               for i, name in enumerate(decomp.names)}
    return GlobalInterSHAP(float(100.0 * num[ok].sum() / total), contrib, pct, num, den,
                           int((~ok).sum()))


@dataclass
class AuditReport:
    decomposition: ShapleyDecomposition
    summary: GlobalInterSHAP
    masking: dict
    metadata: dict = field(default_factory=dict)

    @property
    def interaction_percent(self) -> float:
        return self.summary.interaction_percent

    def to_dict(self) -> dict:
        d, s = self.decomposition, self.summary
        patients = []
        for k, pid in enumerate(d.patient_ids):
            pct = s.per_patient_percent[k]
            patients.append({
                "patient_id": pid,
                "mains": {name: float(d.mains[k, i]) for i, name in enumerate(d.names)},
                "interactions": {lab: float(d.interactions[k, j])
                                 for j, lab in enumerate(d.interaction_labels)},
                "interaction_mass": float(s.numerators[k]),
                "total_mass": float(s.denominators[k]),
                "percent": None if np.isnan(pct) else float(pct),
            })
        return {
            "schema": "coxplain.audit/1",
            "metadata": {**self.metadata, "masking": self.masking,
                         "convention": d.convention, "modalities": list(d.names)},
            "global": {
                "interaction_percent": s.interaction_percent,
                "contributions_percent": s.contributions,
                "degenerate_count": s.degenerate,
                "n_patients": len(d.patient_ids),
            },
            "patients": patients,
        }

    def csv_rows(self) -> list[list]:
        d, s = self.decomposition, self.summary
        header = (["patient_id"] + [f"main:{n}" for n in d.names]
                  + [f"interaction:{lab}" for lab in d.interaction_labels] + ["percent"])
        rows = [header]
        for k, pid in enumerate(d.patient_ids):
            pct = s.per_patient_percent[k]
            rows.append([pid] + [format(x, ".17g") for x in d.mains[k]]
                        + [format(x, ".17g") for x in d.interactions[k]]
                        + ["" if np.isnan(pct) else format(pct, ".17g")])
        return rows


def audit(model, dataset: MultimodalDataset, masking: MaskingStrategy | None = None,
          convention: str = "moebius", metadata: dict | None = None) -> AuditReport:
    masking = masking or MaskingStrategy()
    table = evaluate_coalitions(model, dataset, masking)
    decomp = decompose(table, convention)
    return AuditReport(decomp, global_intershap(decomp), masking.describe(), dict(metadata or {}))

