"""Dataset container, on-disk formats, stratified splits and JSON emission.

Directory layout::

    meta.json       modality names/files/dims, ordered patient ids, provenance
    <name>.emb      one EMB1 file per modality
    survival.csv    patient_id,time_months,event

EMB1: ``b"EMB1"``, uint32 LE rows, uint32 LE cols, rows*cols float64 LE row-major.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import rng_stream

EMB_MAGIC = b"EMB1"
EMB_HEADER = struct.Struct("<4sII")


class DataError(ValueError):
    pass


@dataclass
class MultimodalDataset:
    modalities: dict[str, np.ndarray]
    patient_ids: list[str]
    time: np.ndarray
    event: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=np.float64)
        self.event = np.asarray(self.event, dtype=bool)
        self.modalities = {k: np.ascontiguousarray(v, dtype=np.float64)
                           for k, v in self.modalities.items()}
        self.validate()

    def validate(self) -> None:
        n = len(self.patient_ids)
        if not self.modalities:
            raise DataError("dataset has no modalities")
        if len(set(self.patient_ids)) != n:
            raise DataError("duplicate patient_id")
        if self.time.shape != (n,) or self.event.shape != (n,):
            raise DataError(f"survival table length != {n} patients")
        if np.any(~np.isfinite(self.time)) or np.any(self.time <= 0):
            raise DataError("survival times must be finite and > 0")
        for name, mat in self.modalities.items():
            if mat.ndim != 2 or mat.shape[0] != n:
                raise DataError(f"modality {name!r} has shape {mat.shape}, expected ({n}, d)")
            if mat.shape[1] == 0:
                raise DataError(f"modality {name!r} has zero columns")
            if not np.all(np.isfinite(mat)):
                raise DataError(f"modality {name!r} has non-finite entries")

    @property
    def n(self) -> int:
        return len(self.patient_ids)

    @property
    def names(self) -> list[str]:
        return list(self.modalities)

    def matrices(self) -> list[np.ndarray]:
        return list(self.modalities.values())

    def subset(self, idx) -> "MultimodalDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return MultimodalDataset(
            {k: v[idx] for k, v in self.modalities.items()},
            [self.patient_ids[i] for i in idx],
            self.time[idx], self.event[idx], dict(self.provenance))


# -- EMB1 -------------------------------------------------------------------

def write_emb(path: Path, mat: np.ndarray) -> None:
    mat = np.ascontiguousarray(mat, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(EMB_HEADER.pack(EMB_MAGIC, mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes(order="C"))


def read_emb(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < EMB_HEADER.size:
        raise DataError(f"{path}: file shorter than the {EMB_HEADER.size}-byte header")
    magic, rows, cols = EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at offset 0, expected {EMB_MAGIC!r}")
    expected = EMB_HEADER.size + rows * cols * 8
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {rows}x{cols}, got {len(raw)}")
    mat = np.frombuffer(raw, dtype="<f8", offset=EMB_HEADER.size).reshape(rows, cols)
    bad = np.argwhere(~np.isfinite(mat))
    if len(bad):
        r, c = bad[0]
        off = EMB_HEADER.size + (r * cols + c) * 8
        raise DataError(f"{path}: non-finite value at row {r}, col {c} (byte offset {off})")
    return mat.astype(np.float64)


# -- JSON -------------------------------------------------------------------

def _encode(obj, indent: int, level: int) -> str:
    pad = "\n" + " " * (indent * (level + 1))
    end = "\n" + " " * (indent * level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise DataError(f"cannot emit non-finite number {x} as JSON")
        return format(x, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [json.dumps(str(k)) + ": " + _encode(obj[k], indent, level + 1)
                 for k in sorted(obj, key=str)]
        return "{" + pad + ("," + pad).join(items) + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not seq:
            return "[]"
        return "[" + pad + ("," + pad).join(_encode(v, indent, level + 1) for v in seq) + end + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON with sorted keys and floats at 17 significant digits."""
    return _encode(obj, indent, 0) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8", newline="\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# -- dataset directories ----------------------------------------------------

def save_dataset(ds: MultimodalDataset, directory) -> None:
    ds.validate()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    mods = []
    for name, mat in ds.modalities.items():
        fname = f"{name}.emb"
        write_emb(d / fname, mat)
        mods.append({"name": name, "file": fname, "dim": int(mat.shape[1])})
    meta = {"modalities": mods, "patient_ids": list(ds.patient_ids),
            "n": ds.n, "provenance": ds.provenance}
    write_json(d / "meta.json", meta)
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "time_months", "event"])
    for pid, t, e in zip(ds.patient_ids, ds.time, ds.event):
        w.writerow([pid, repr(float(t)), int(e)])
    (d / "survival.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")


def load_dataset(directory) -> MultimodalDataset:
    d = Path(directory)
    for required in ("meta.json", "survival.csv"):
        if not (d / required).is_file():
            raise DataError(f"{d}: missing {required}")
    meta = read_json(d / "meta.json")
    ids = list(meta["patient_ids"])
    if len(set(ids)) != len(ids):
        raise DataError(f"{d / 'meta.json'}: duplicate patient_id")
    mods = {}
    for m in meta["modalities"]:
        mat = read_emb(d / m["file"])
        if mat.shape != (len(ids), m["dim"]):
            raise DataError(f"{d / m['file']}: shape {mat.shape}, meta says ({len(ids)}, {m['dim']})")
        mods[m["name"]] = mat
    with open(d / "survival.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["patient_id", "time_months", "event"]:
            raise DataError(f"{d / 'survival.csv'}: bad header {header}")
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"survival.csv line {lineno}: expected 3 fields")
            pid, t, e = row
            try:
                tv = float(t)
            except ValueError:
                raise DataError(f"survival.csv line {lineno}: bad time {t!r}") from None
            if not math.isfinite(tv) or tv <= 0:
                raise DataError(f"survival.csv line {lineno}: time must be > 0, got {t}")
            if e not in ("0", "1"):
                raise DataError(f"survival.csv line {lineno}: event must be 0 or 1, got {e!r}")
            if pid in rows:
                raise DataError(f"survival.csv line {lineno}: duplicate patient_id {pid!r}")
            rows[pid] = (tv, e == "1")
    if set(rows) != set(ids):
        raise DataError(f"{d}: survival.csv patients do not match meta.json ({len(rows)} vs {len(ids)})")
    time = np.array([rows[p][0] for p in ids])
    event = np.array([rows[p][1] for p in ids])
    return MultimodalDataset(mods, ids, time, event, meta.get("provenance", {}))


# -- splits -----------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    kind: str = "holdout"           # holdout | kfold
    test_fraction: float = 0.2
    k: int = 10
    stratify: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("holdout", "kfold"):
            raise DataError(f"unknown split kind {self.kind!r}")
        if not 0 < self.test_fraction < 1:
            raise DataError("test_fraction must lie in (0, 1)")
        if self.k < 2:
            raise DataError("k must be >= 2")


def make_split(event, spec: SplitSpec):
    """Holdout -> ``(train_idx, test_idx)``; kfold -> list of k test-index arrays.

    Indices are sorted. Stratification is by event indicator.
    """
    event = np.asarray(event, dtype=bool)
    n = len(event)
    rng = rng_stream(spec.seed, 0x5B11)
    strata = [np.nonzero(event)[0], np.nonzero(~event)[0]] if spec.stratify else [np.arange(n)]
    strata = [rng.permutation(s) for s in strata]
    if spec.kind == "holdout":
        if spec.stratify and min(len(s) for s in strata) < 2:
            raise DataError("each event stratum needs >= 2 members for a holdout split")
        n_test = int(round(n * spec.test_fraction))
        if spec.stratify:
            n_ev = int(round(len(strata[0]) * spec.test_fraction))
            n_ev = min(max(n_ev, 1), len(strata[0]) - 1)
            n_cen = min(max(n_test - n_ev, 0), len(strata[1]))
            test = np.concatenate([strata[0][:n_ev], strata[1][:n_cen]])
        else:
            test = strata[0][:n_test]
        if len(test) == 0 or len(test) == n:
            raise DataError(f"holdout split of {n} patients is degenerate")
        mask = np.zeros(n, bool)
        mask[test] = True
        return np.nonzero(~mask)[0], np.nonzero(mask)[0]
    if spec.stratify and min(len(s) for s in strata) < spec.k:
        raise DataError(f"each event stratum needs >= k={spec.k} members")
    if n < spec.k:
        raise DataError(f"{n} patients cannot fill {spec.k} folds")
    # deal strata round-robin as one sequence so fold sizes differ by <= 1
    seq = np.concatenate(strata)
    folds = [np.sort(seq[i::spec.k]) for i in range(spec.k)]
    return folds
