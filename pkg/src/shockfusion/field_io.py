"""Tecplot ASCII (POINT packing) multi-zone field files.

Each zone is an ``I x J`` structured block stored one point per row with the
``I`` index varying fastest.  Nozzle files carry the columns
``[X, Y, Density, QX, QY, T, U, V, Txy, Mach, Pressure, Knudsen]``; the
Burgers datasets reuse the same container with ``[X, T, U]`` where the time
axis takes the place of ``Y``.
"""

from __future__ import annotations

import enum
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CountMismatch,
    DegenerateGrid,
    LengthMismatch,
    MalformedHeader,
    NonNumericToken,
)

NOZZLE_COLUMNS = (
    "X", "Y", "Density", "QX", "QY", "T", "U", "V", "Txy", "Mach", "Pressure", "Knudsen",
)
BURGERS_COLUMNS = ("X", "T", "U")
ERROR_COLUMNS = {"U": ("Error_U", "ErrorU_L2"), "V": ("Error_V", "ErrorV_L2")}

DX_MIN = 1e-12


class ConditionKind(str, enum.Enum):
    back_pressure = "back_pressure"
    viscosity = "viscosity"
    throat_ratio = "throat_ratio"


@dataclass
class ZoneGrid:
    """One structured block of named columns in POINT order."""

    i_count: int
    j_count: int
    columns: dict[str, np.ndarray]
    title: str | None = None

    def __post_init__(self):
        if self.i_count < 1 or self.j_count < 1:
            raise MalformedHeader(f"zone dimensions must be positive, got I={self.i_count}, J={self.j_count}")
        n = self.i_count * self.j_count
        cols = {}
        for name, values in self.columns.items():
            arr = np.asarray(values, dtype=np.float64).reshape(-1)
            if arr.size != n:
                raise CountMismatch(f"column {name!r} has {arr.size} values, expected I*J={n}")
            cols[name] = arr
        self.columns = cols

    @property
    def n_points(self) -> int:
        return self.i_count * self.j_count

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def as_grid(self, name: str) -> np.ndarray:
        """Column reshaped to ``(J, I)`` so that axis 1 runs along ``I``."""
        return self.columns[name].reshape(self.j_count, self.i_count)

    def with_columns(self, columns: dict[str, np.ndarray]) -> "ZoneGrid":
        return ZoneGrid(self.i_count, self.j_count, columns, self.title)


@dataclass
class CaseRecord:
    """A multi-zone field file together with its scalar branch condition."""

    zones: list[ZoneGrid]
    condition: float | None = None
    condition_kind: ConditionKind | None = None
    source_path: str = ""
    title: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.zones:
            raise MalformedHeader("a case needs at least one zone")
        if self.condition is not None:
            self.condition = float(self.condition)
            if not math.isfinite(self.condition):
                raise ValueError(f"condition must be finite, got {self.condition}")
        if self.condition_kind is not None:
            self.condition_kind = ConditionKind(self.condition_kind)

    @property
    def n_points(self) -> int:
        return sum(z.n_points for z in self.zones)

    @property
    def names(self) -> list[str]:
        return self.zones[0].names

    def column(self, name: str) -> np.ndarray:
        """Concatenation of one column over all zones, in zone order."""
        return np.concatenate([z[name] for z in self.zones])


def second_axis(zone: ZoneGrid) -> str:
    """Name of the cross-stream coordinate: ``Y`` for nozzles, ``T`` for Burgers."""
    if "Y" in zone:
        return "Y"
    if "T" in zone and zone.names[:2] == ["X", "T"]:
        return "T"
    raise KeyError("zone has neither a Y column nor an [X, T, ...] layout")


# ---------------------------------------------------------------------------
# parsing

_QUOTED = re.compile(r'"([^"]*)"')
_ZONE_KV = re.compile(r'([A-Za-z]+)\s*=\s*("[^"]*"|\([^)]*\)|[^,\s]+)')


def _to_float(token: str, line_no: int) -> float:
    try:
        return float(token)
    except ValueError:
        try:
            # Fortran double-precision exponent
            return float(token.replace("D", "E").replace("d", "e"))
        except ValueError:
            raise NonNumericToken(token, line_no) from None


def _is_numeric_line(line: str) -> bool:
    tok = line.split(None, 1)
    if not tok:
        return False
    head = tok[0]
    return head[0].isdigit() or head[0] in "+-."


def _parse_variables(lines, start):
    """Return (names, next_index) for a VARIABLES declaration starting at ``start``."""
    first = lines[start][1]
    rhs = first.split("=", 1)[1] if "=" in first else ""
    names = _QUOTED.findall(rhs)
    if not names:
        names = [t for t in re.split(r"[,\s]+", rhs.strip()) if t]
    k = start + 1
    # variable lists may continue on following lines, one quoted name per line
    while k < len(lines):
        text = lines[k][1].strip()
        if text.startswith('"'):
            names.extend(_QUOTED.findall(text))
            k += 1
        else:
            break
    return names, k


def _parse_zone_header(lines, start):
    header = lines[start][1].strip()[4:]
    k = start + 1
    while k < len(lines) and not _is_numeric_line(lines[k][1]) and not _keyword(lines[k][1]) == "ZONE":
        header += " " + lines[k][1].strip()
        k += 1
    opts = {key.upper(): val.strip('"') for key, val in _ZONE_KV.findall(header)}
    line_no = lines[start][0]
    try:
        i_count, j_count = int(opts["I"]), int(opts.get("J", 1))
    except (KeyError, ValueError):
        raise MalformedHeader(f"ZONE header on line {line_no} must declare integer I and J") from None
    packing = (opts.get("F") or opts.get("DATAPACKING") or "POINT").upper()
    if packing != "POINT":
        raise MalformedHeader(f"ZONE on line {line_no} uses {packing} packing; only POINT is supported")
    if int(opts.get("K", 1)) != 1:
        raise MalformedHeader(f"ZONE on line {line_no} is three-dimensional")
    return i_count, j_count, opts.get("T"), k


def _keyword(text: str) -> str:
    stripped = text.lstrip().upper()
    for kw in ("TITLE", "VARIABLES", "ZONE"):
        if stripped.startswith(kw):
            return kw
    return ""


def parse_tecplot(text: str, condition=None, condition_kind=None, source_path: str = "") -> CaseRecord:
    """Parse a Tecplot ASCII POINT file into a :class:`CaseRecord`.

    The scalar condition is not stored in Tecplot files; pass it explicitly or
    resolve it later with :func:`load_manifest`.
    """
    lines = [(n, ln) for n, ln in enumerate(text.splitlines(), start=1)
             if ln.strip() and not ln.lstrip().startswith("#")]
    title = None
    names: list[str] | None = None
    zones: list[ZoneGrid] = []
    k = 0
    while k < len(lines):
        line_no, line = lines[k]
        kw = _keyword(line)
        if kw == "TITLE":
            found = _QUOTED.findall(line)
            title = found[0] if found else line.split("=", 1)[-1].strip()
            k += 1
        elif kw == "VARIABLES":
            names, k = _parse_variables(lines, k)
            if len(set(names)) != len(names):
                raise MalformedHeader(f"duplicate variable names on line {line_no}: {names}")
        elif kw == "ZONE":
            if names is None:
                raise MalformedHeader(f"ZONE on line {line_no} appears before any VARIABLES declaration")
            i_count, j_count, ztitle, k = _parse_zone_header(lines, k)
            n_expected = i_count * j_count
            rows = []
            while k < len(lines) and not _keyword(lines[k][1]):
                rows.append(lines[k])
                k += 1
            if len(rows) != n_expected:
                raise CountMismatch(
                    f"ZONE on line {line_no} declares I*J={n_expected} points but has {len(rows)} data rows")
            data = np.empty((n_expected, len(names)))
            for r, (row_no, row) in enumerate(rows):
                tokens = row.split()
                if len(tokens) != len(names):
                    raise CountMismatch(
                        f"line {row_no} has {len(tokens)} values, expected {len(names)}")
                data[r] = [_to_float(t, row_no) for t in tokens]
            zones.append(ZoneGrid(i_count, j_count,
                                  {nm: data[:, c].copy() for c, nm in enumerate(names)}, ztitle))
        else:
            if _is_numeric_line(line):
                raise MalformedHeader(f"data on line {line_no} outside of any ZONE")
            # unknown auxiliary records (DATASETAUXDATA etc.) are skipped
            k += 1
    if names is None:
        raise MalformedHeader("missing VARIABLES declaration")
    if not zones:
        raise MalformedHeader("no ZONE found")
    return CaseRecord(zones, condition, condition_kind, source_path, title)


def format_tecplot(case: CaseRecord) -> str:
    """Serialize a case; floats use the shortest round-trip representation."""
    names = case.zones[0].names
    for z in case.zones[1:]:
        if z.names != names:
            raise MalformedHeader("all zones must carry identical columns in the same order")
    out = []
    if case.title:
        out.append(f'TITLE = "{case.title}"')
    out.append("VARIABLES = " + " ".join(f'"{n}"' for n in names))
    for z in case.zones:
        head = "ZONE "
        if z.title:
            head += f'T="{z.title}", '
        out.append(head + f"I={z.i_count}, J={z.j_count}, F=POINT")
        block = np.column_stack([z[n] for n in names])
        out.extend(" ".join(map(repr, map(float, row))) for row in block)
    return "\n".join(out) + "\n"


def read_case(path, condition=None, condition_kind=None) -> CaseRecord:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read field file {path}: {exc.strerror}") from exc
    return parse_tecplot(text, condition, condition_kind, str(path))


def write_case(case: CaseRecord, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_tecplot(case))
    return path


# ---------------------------------------------------------------------------
# manifests

def load_manifest(manifest_path, role: str | None = None, pattern: str | None = None,
                  condition_kind: str | None = None) -> list[CaseRecord]:
    """Load every case listed in a JSON manifest.

    The manifest maps file paths (relative to the manifest) to
    ``{"condition": float, "condition_kind": str}``; an optional ``role`` key
    ("train"/"test") filters entries.  When ``pattern`` is given, a regex with
    one capture group extracts the condition from the file name for entries
    that omit it; manifest values always win.
    """
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    cases = []
    for rel, meta in entries.items():
        meta = dict(meta or {})
        if role is not None and meta.get("role", "train") != role:
            continue
        path = Path(rel) if os.path.isabs(rel) else base / rel
        cond = meta.get("condition")
        if cond is None and pattern is not None:
            m = re.search(pattern, path.name)
            if m:
                cond = float(m.group(1))
        if cond is None:
            raise ValueError(f"no condition for {rel} in {manifest_path}")
        kind = meta.get("condition_kind", condition_kind)
        case = read_case(path, cond, kind)
        case.meta = {k: v for k, v in meta.items() if k not in ("condition", "condition_kind")}
        cases.append(case)
    return cases


def save_manifest(entries: dict, manifest_path) -> Path:
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# prediction output

def _pointwise_errors(true, pred, eps):
    diff = true - pred
    rel = np.abs(diff) / np.maximum(np.abs(true), eps)
    rel_sq = diff ** 2 / np.maximum(true ** 2, eps ** 2)
    return rel, rel_sq


def prediction_case(case: CaseRecord, pred_u, pred_v=None, epsilon: float = 1e-9,
                    extra_columns: dict | None = None) -> CaseRecord:
    """Copy of ``case`` with U (and V) replaced by predictions plus error columns.

    Error columns are ``|true - pred| / max(|true|, eps)`` and
    ``(true - pred)**2 / max(true**2, eps**2)`` per channel, appended after the
    original columns.  ``extra_columns`` (e.g. MC-dropout sigmas) are appended
    last; all arrays are flat over the concatenated zones.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    preds = {"U": pred_u}
    if pred_v is not None:
        preds["V"] = pred_v
    extra_columns = dict(extra_columns or {})
    total = case.n_points
    for name, arr in list(preds.items()) + list(extra_columns.items()):
        if np.asarray(arr).size != total:
            raise LengthMismatch(f"{name} has {np.asarray(arr).size} values, case has {total} points")
        if name in preds and name not in case.names:
            raise KeyError(f"case has no {name} column to replace")
    preds = {k: np.asarray(v, dtype=np.float64).reshape(-1) for k, v in preds.items()}
    extra_columns = {k: np.asarray(v, dtype=np.float64).reshape(-1) for k, v in extra_columns.items()}

    zones = []
    offset = 0
    for z in case.zones:
        sl = slice(offset, offset + z.n_points)
        offset += z.n_points
        cols = dict(z.columns)
        errs = {}
        for ch, p in preds.items():
            rel, rel_sq = _pointwise_errors(z[ch], p[sl], epsilon)
            cols[ch] = p[sl].copy()
            errs[ERROR_COLUMNS[ch][0]] = rel
            errs[ERROR_COLUMNS[ch][1]] = rel_sq
        # channel order: Error_U, Error_V, ErrorU_L2, ErrorV_L2
        for pos in (0, 1):
            for ch in preds:
                name = ERROR_COLUMNS[ch][pos]
                cols[name] = errs[name]
        for name, arr in extra_columns.items():
            cols[name] = arr[sl].copy()
        zones.append(z.with_columns(cols))
    return CaseRecord(zones, case.condition, case.condition_kind, case.source_path, case.title, dict(case.meta))


def write_prediction_file(case: CaseRecord, pred_u, pred_v=None, epsilon: float = 1e-9,
                          extra_columns: dict | None = None) -> str:
    """Tecplot text of :func:`prediction_case`."""
    return format_tecplot(prediction_case(case, pred_u, pred_v, epsilon, extra_columns))


# ---------------------------------------------------------------------------
# grid spacing

def _row_diffs(along: np.ndarray, across: np.ndarray) -> list[np.ndarray]:
    diffs = []
    order = np.argsort(across, kind="stable")
    a_sorted = across[order]
    cuts = np.flatnonzero(np.diff(a_sorted)) + 1
    for idx in np.split(order, cuts):
        u = np.unique(along[idx])
        if u.size >= 2:
            diffs.append(np.diff(u))
    return diffs


def median_row_spacing(zone: ZoneGrid, along: str = "X", across: str | None = None,
                       dx_min: float = DX_MIN) -> float:
    """Median spacing of ``along`` over rows of constant ``across``.

    Rows are the sets of points sharing the same ``across`` value.  Curvilinear
    grids without any such row fall back to the structured index rows.  The
    result is floored at ``dx_min``.
    """
    if across is None:
        across = "X" if along != "X" else second_axis(zone)
    a, c = zone[along], zone[across]
    diffs = _row_diffs(a, c)
    if not diffs:
        # structured fallback: rows of the I (along=X) or J index
        ga = zone.as_grid(along)
        rows = ga if along == "X" else ga.T
        diffs = [np.diff(u) for u in (np.unique(r) for r in rows) if u.size >= 2]
    if not diffs:
        raise DegenerateGrid(f"no row with at least two distinct {along} values")
    return max(float(np.median(np.concatenate(diffs))), dx_min)
