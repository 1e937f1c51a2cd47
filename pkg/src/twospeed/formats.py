"""On-disk formats: table CSV, binary snapshots, law files and run CSVs.

Binary snapshot layout (all little-endian)::

    b"HCDP"                       magic
    uint16 version                currently 1
    uint32 n_x, n_v, n_u1
    float64 dt, x_min, x_max, v_min, v_max
    uint32 meta_len, meta_len bytes of UTF-8 JSON
    float64[n_x*n_v] x 6          values, feasible, terminal, viable, u1_star, u2_star

Arrays are row-major with the position index first. Infinite costs and
missing torques are stored as ``inf`` and ``nan``.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dp_solver import GridSpec, PolicyTable, TerminationSpec, ValueTable
from .policy_fit import PiecewiseLinearLaw

MAGIC = b"HCDP"
VERSION = 1
_HEADER = struct.Struct("<4sH3I5d")
_ARRAYS = ("values", "feasible", "terminal", "viable", "u1_star", "u2_star")


class FormatError(ValueError):
    """A file does not follow the expected layout."""


@dataclass
class Snapshot:
    spec: GridSpec
    value: ValueTable
    policy: PolicyTable
    metadata: dict = field(default_factory=dict)


def _fmt(x: float) -> str:
    return repr(float(x))


# ------------------------------------------------------------------ tables

def write_tables_csv(path, spec: GridSpec, value: ValueTable, policy: PolicyTable) -> None:
    """One row per cell; J, u1 are blank and u2 is 0 where there is no solution."""
    xs, vs = spec.x_nodes, spec.v_nodes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "x", "v", "feasible", "J", "u1", "u2"])
        for i in range(spec.n_x):
            for j in range(spec.n_v):
                ok = bool(value.feasible[i, j])
                w.writerow([i, j, _fmt(xs[i]), _fmt(vs[j]), int(ok),
                            _fmt(value.values[i, j]) if ok else "",
                            _fmt(policy.u1_star[i, j]) if ok else "",
                            int(policy.u2_star[i, j]) if ok else 0])


def read_tables_csv(path, spec: GridSpec,
                    term: TerminationSpec) -> tuple[ValueTable, PolicyTable]:
    values = np.full((spec.n_x, spec.n_v), np.inf)
    feasible = np.zeros((spec.n_x, spec.n_v), dtype=bool)
    u1 = np.full((spec.n_x, spec.n_v), np.nan)
    u2 = np.zeros((spec.n_x, spec.n_v), dtype=np.int8)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i, j = int(row["i"]), int(row["j"])
            if row["feasible"] == "1":
                feasible[i, j] = True
                values[i, j] = float(row["J"])
                u1[i, j] = float(row["u1"])
                u2[i, j] = int(row["u2"])
    X, V = np.meshgrid(spec.x_nodes, spec.v_nodes, indexing="ij")
    terminal = term.contains(X, V)
    return ValueTable(values, feasible, terminal), PolicyTable(u1, u2)


# --------------------------------------------------------------- snapshots

def save_snapshot(path, snap: Snapshot) -> None:
    spec = snap.spec
    meta = json.dumps(snap.metadata, sort_keys=True, separators=(",", ":")).encode()
    arrays = {
        "values": snap.value.values,
        "feasible": snap.value.feasible,
        "terminal": snap.value.terminal,
        "viable": snap.value.viable,
        "u1_star": snap.policy.u1_star,
        "u2_star": snap.policy.u2_star,
    }
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, spec.n_x, spec.n_v, spec.n_u1, spec.dt,
                              spec.x_min, spec.x_max, spec.v_min, spec.v_max))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for name in _ARRAYS:
            a = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
            if a.shape != (spec.n_x, spec.n_v):
                raise FormatError(f"{name} has shape {a.shape}")
            fh.write(a.tobytes(order="C"))


def load_snapshot(path) -> Snapshot:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 4:
        raise FormatError("file too short for a snapshot header")
    magic, version, n_x, n_v, n_u1, dt, x_min, x_max, v_min, v_max = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported snapshot version {version}")
    off = _HEADER.size
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        metadata = json.loads(data[off:off + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}") from None
    off += meta_len
    size = n_x * n_v * 8
    if len(data) != off + size * len(_ARRAYS):
        raise FormatError("array block has the wrong length")
    arr = {}
    for name in _ARRAYS:
        arr[name] = np.frombuffer(data, dtype="<f8", count=n_x * n_v,
                                  offset=off).reshape(n_x, n_v).astype(float)
        off += size
    spec = GridSpec(n_x, n_v, n_u1, dt, x_min, x_max, v_min, v_max)
    value = ValueTable(arr["values"], arr["feasible"] != 0, arr["terminal"] != 0,
                       arr["viable"] != 0)
    policy = PolicyTable(arr["u1_star"], arr["u2_star"].astype(np.int8))
    return Snapshot(spec, value, policy, metadata)


# -------------------------------------------------------------------- laws

def save_law(path, law: PiecewiseLinearLaw, extra: dict | None = None) -> None:
    doc = {"law": law.to_dict()}
    if extra:
        doc.update(extra)
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def load_law(path) -> PiecewiseLinearLaw:
    try:
        doc = yaml.safe_load(Path(path).read_text())
        return PiecewiseLinearLaw.from_dict(doc["law"])
    except (yaml.YAMLError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a law file ({exc})") from None


# -------------------------------------------------------------------- runs

def write_columns_csv(path, columns: dict) -> None:
    """Write equal-length arrays as CSV columns (bools as 0/1)."""
    names = list(columns)
    cols = [np.asarray(columns[n]) for n in names]
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("columns differ in length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for k in range(n):
            row = []
            for c in cols:
                val = c[k]
                if c.dtype == bool:
                    row.append(int(val))
                elif np.issubdtype(c.dtype, np.integer):
                    row.append(int(val))
                else:
                    row.append("" if math.isnan(float(val)) else _fmt(val))
            w.writerow(row)


def read_columns_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names, body = rows[0], rows[1:]
    out = {}
    for k, name in enumerate(names):
        out[name] = np.array([float(r[k]) if r[k] != "" else np.nan for r in body])
    return out


def write_trajectory_csv(path, traj) -> None:
    write_columns_csv(path, traj.columns())
