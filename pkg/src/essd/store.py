"""Immutable in-memory store of longitudinal patient records.

Patients, medical-event records and prescriptions are held as flat numpy
arrays sorted by (patient, day) with CSR-style per-patient offsets. Days are
proleptic Gregorian ordinals (``date.toordinal()``), so all window arithmetic
is integer arithmetic in whole days.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyDataset,
    IntegrityError,
    MalformedRow,
    UnknownCode,
    UnknownPatient,
)

MAX_DEPTH = 5

PATIENT_COLUMNS = ("patient_id", "year_of_birth", "gender", "reg_start", "reg_end")
EVENT_COLUMNS = ("patient_id", "date", "event_code")
PRESCRIPTION_COLUMNS = ("patient_id", "date", "drug_id", "bnf_code")
TREE_COLUMNS = ("event_code", "parent_code", "depth", "description")

_BNF_RE = re.compile(r"^\d\d(?:-\d\d){0,3}$")


def parse_bnf(text: str) -> tuple[str, ...]:
    text = text.strip()
    if not _BNF_RE.match(text):
        raise ValueError(f"bad BNF code {text!r}: expected 1-4 hyphen-separated 2-digit groups")
    return tuple(text.split("-"))


@dataclass(frozen=True, order=True)
class DrugFamily:
    """Drugs sharing a BNF code prefix, e.g. ``05-01-01-03``."""

    prefix: tuple[str, ...]

    def __post_init__(self):
        if not 1 <= len(self.prefix) <= 4:
            raise ValueError(f"drug family prefix must have 1-4 components, got {self.prefix!r}")

    @classmethod
    def parse(cls, text: str) -> "DrugFamily":
        return cls(parse_bnf(text))

    @property
    def code(self) -> str:
        return "-".join(self.prefix)

    def matches(self, bnf: Sequence[str] | str) -> bool:
        if isinstance(bnf, str):
            bnf = parse_bnf(bnf)
        return tuple(bnf[: len(self.prefix)]) == self.prefix

    def overlaps(self, other: "DrugFamily") -> bool:
        n = min(len(self.prefix), len(other.prefix))
        return self.prefix[:n] == other.prefix[:n]

    def __str__(self) -> str:
        return self.code


@dataclass(frozen=True)
class Patient:
    patient_id: str
    year_of_birth: int
    gender: str
    reg_start: dt.date
    reg_end: dt.date


class EventCodeTree:
    """Forest of medical-event codes, depth 1 (most general) to 5."""

    def __init__(self, rows: Iterable[tuple[str, str | None, int, str]]):
        rows = list(rows)
        by_code: dict[str, tuple[str | None, int, str]] = {}
        for code, parent, depth, desc in rows:
            if code in by_code:
                raise IntegrityError(f"duplicate event_code {code!r} in code tree")
            by_code[code] = (parent or None, int(depth), desc)
        self.codes: list[str] = sorted(by_code)
        self.index: dict[str, int] = {c: i for i, c in enumerate(self.codes)}
        n = len(self.codes)
        self.parent = np.full(n, -1, dtype=np.int32)
        self.depth = np.zeros(n, dtype=np.int8)
        self.descriptions: list[str] = []
        for i, code in enumerate(self.codes):
            parent, depth, desc = by_code[code]
            if not 1 <= depth <= MAX_DEPTH:
                raise IntegrityError(f"event_code {code!r}: depth {depth} outside [1, {MAX_DEPTH}]")
            if depth == 1 and parent is not None:
                raise IntegrityError(f"event_code {code!r}: depth 1 node has parent {parent!r}")
            if depth > 1:
                if parent is None:
                    raise IntegrityError(f"event_code {code!r}: depth {depth} node has no parent")
                if parent not in by_code:
                    raise IntegrityError(f"event_code {code!r}: unknown parent {parent!r}")
                pdepth = by_code[parent][1]
                if pdepth != depth - 1:
                    raise IntegrityError(
                        f"event_code {code!r}: depth {depth} but parent {parent!r} has depth {pdepth}"
                    )
                self.parent[i] = self.index[parent]
            self.depth[i] = depth
            self.descriptions.append(desc)
        # Depth strictly decreases towards the root, so there are no cycles.
        # _anc[d][i] is the ancestor of i at depth d, or i itself when depth(i) <= d.
        self._anc = np.tile(np.arange(n, dtype=np.int32), (MAX_DEPTH + 1, 1))
        for d in range(MAX_DEPTH - 1, 0, -1):
            nxt = self._anc[d + 1].copy()
            deep = self.depth[nxt] > d
            nxt[deep] = self.parent[nxt[deep]]
            self._anc[d] = nxt

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code) -> bool:
        return code in self.index

    def code_index(self, code: str) -> int:
        try:
            return self.index[code]
        except KeyError:
            raise UnknownCode(f"unknown event code {code!r}") from None

    def depth_of(self, code: str) -> int:
        return int(self.depth[self.code_index(code)])

    def parent_of(self, code: str) -> str | None:
        p = self.parent[self.code_index(code)]
        return None if p < 0 else self.codes[p]

    def ancestor_map(self, target_depth: int | None) -> np.ndarray:
        """Index array mapping every code to its ancestor at ``target_depth``."""
        if target_depth is None:
            return self._anc[MAX_DEPTH]
        if not 1 <= target_depth <= MAX_DEPTH:
            raise ValueError(f"target_depth must be in [1, {MAX_DEPTH}], got {target_depth}")
        return self._anc[target_depth]

    def children(self, code: str) -> list[str]:
        i = self.code_index(code)
        return [self.codes[j] for j in np.flatnonzero(self.parent == i)]

    def descendants_at_depth(self, code: str, depth: int) -> list[str]:
        i = self.code_index(code)
        amap = self.ancestor_map(int(self.depth[i]))
        return [self.codes[j] for j in np.flatnonzero((amap == i) & (self.depth == depth))]

    def rows(self) -> list[tuple[str, str, int, str]]:
        return [
            (c, self.codes[p] if p >= 0 else "", int(d), desc)
            for c, p, d, desc in zip(self.codes, self.parent, self.depth, self.descriptions)
        ]


def ancestor_at_depth(tree: EventCodeTree, code: str, target_depth: int) -> str:
    """Map ``code`` to its ancestor at ``target_depth``.

    Codes at or above the target depth map to themselves.
    """
    i = tree.code_index(code)
    return tree.codes[tree.ancestor_map(target_depth)[i]]


def _csr_offsets(owner: np.ndarray, n: int) -> np.ndarray:
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(owner, minlength=n), out=offsets[1:])
    return offsets


@dataclass(frozen=True, eq=False)
class Dataset:
    patient_ids: tuple[str, ...]
    year_of_birth: np.ndarray
    gender: np.ndarray  # "M" / "F" as a unicode array
    reg_start: np.ndarray
    reg_end: np.ndarray
    ev_patient: np.ndarray
    ev_day: np.ndarray
    ev_code: np.ndarray
    ev_offsets: np.ndarray
    rx_patient: np.ndarray
    rx_day: np.ndarray
    rx_drug: np.ndarray
    rx_bnf: np.ndarray
    rx_offsets: np.ndarray
    drug_ids: tuple[str, ...]
    bnf_codes: tuple[tuple[str, ...], ...]
    tree: EventCodeTree
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_pid_index", {p: i for i, p in enumerate(self.patient_ids)})
        for name in (
            "year_of_birth", "gender", "reg_start", "reg_end",
            "ev_patient", "ev_day", "ev_code", "ev_offsets",
            "rx_patient", "rx_day", "rx_drug", "rx_bnf", "rx_offsets",
        ):
            getattr(self, name).setflags(write=False)

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def n_events(self) -> int:
        return len(self.ev_day)

    @property
    def n_prescriptions(self) -> int:
        return len(self.rx_day)

    def patient_index(self, patient_id: str) -> int:
        try:
            return self._pid_index[patient_id]
        except KeyError:
            raise UnknownPatient(f"unknown patient_id {patient_id!r}") from None

    def patient(self, patient_id: str) -> Patient:
        i = self.patient_index(patient_id)
        return Patient(
            patient_id,
            int(self.year_of_birth[i]),
            str(self.gender[i]),
            dt.date.fromordinal(int(self.reg_start[i])),
            dt.date.fromordinal(int(self.reg_end[i])),
        )

    def family_mask(self, family: DrugFamily) -> np.ndarray:
        """Boolean mask over prescription rows belonging to ``family``."""
        hit = np.array([family.matches(b) for b in self.bnf_codes], dtype=bool)
        if not len(hit):
            return np.zeros(self.n_prescriptions, dtype=bool)
        return hit[self.rx_bnf]

    def fingerprint(self) -> str:
        """Digest of the full content, provenance excluded."""
        h = hashlib.sha256()
        for part in (
            "\n".join(self.patient_ids), "\n".join(self.drug_ids),
            "\n".join("-".join(b) for b in self.bnf_codes),
            "\n".join("|".join(map(str, r)) for r in self.tree.rows()),
        ):
            h.update(part.encode())
            h.update(b"\x00")
        for arr in (
            self.year_of_birth, self.gender.astype("U1"), self.reg_start, self.reg_end,
            self.ev_patient, self.ev_day, self.ev_code,
            self.rx_patient, self.rx_day, self.rx_drug, self.rx_bnf,
        ):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _parse_date(value: str, cache: dict) -> int:
    day = cache.get(value)
    if day is None:
        if len(value) != 10:
            raise ValueError("expected YYYY-MM-DD")
        day = dt.date.fromisoformat(value).toordinal()
        cache[value] = day
    return day


def _read_rows(path, columns):
    """Yield (line_number, row_dict) from a headed UTF-8 CSV."""
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MalformedRow(path, 1, "<header>", "missing header row")
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise MalformedRow(path, 1, missing[0], "column missing from header")
        pos = [header.index(c) for c in columns]
        for row in reader:
            line = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise MalformedRow(path, line, "<row>", f"expected {len(header)} fields, got {len(row)}")
            yield line, [row[p].strip() for p in pos]


def _field(path, line, column, fn, value):
    try:
        return fn(value)
    except (ValueError, TypeError) as exc:
        raise MalformedRow(path, line, column, f"cannot parse {value!r} ({exc})") from None


def load_dataset(patient_path, event_path, prescription_path, tree_path) -> Dataset:
    """Load and validate the four CSV files into a :class:`Dataset`."""
    tree_rows = []
    for line, (code, parent, depth, desc) in _read_rows(tree_path, TREE_COLUMNS):
        if not code:
            raise MalformedRow(tree_path, line, "event_code", "empty code")
        depth = _field(tree_path, line, "depth", int, depth)
        tree_rows.append((code, parent or None, depth, desc))
    tree = EventCodeTree(tree_rows)

    dcache: dict[str, int] = {}
    patients = []
    for line, (pid, yob, gender, start, end) in _read_rows(patient_path, PATIENT_COLUMNS):
        if not pid:
            raise MalformedRow(patient_path, line, "patient_id", "empty id")
        yob = _field(patient_path, line, "year_of_birth", int, yob)
        if gender not in ("M", "F"):
            raise MalformedRow(patient_path, line, "gender", f"expected M or F, got {gender!r}")
        start = _field(patient_path, line, "reg_start", lambda v: _parse_date(v, dcache), start)
        end = _field(patient_path, line, "reg_end", lambda v: _parse_date(v, dcache), end)
        patients.append((line, pid, yob, gender, start, end))

    events = []
    for line, (pid, date, code) in _read_rows(event_path, EVENT_COLUMNS):
        day = _field(event_path, line, "date", lambda v: _parse_date(v, dcache), date)
        events.append((line, pid, day, code))

    prescriptions = []
    for line, (pid, date, drug, bnf) in _read_rows(prescription_path, PRESCRIPTION_COLUMNS):
        day = _field(prescription_path, line, "date", lambda v: _parse_date(v, dcache), date)
        bnf = _field(prescription_path, line, "bnf_code", parse_bnf, bnf)
        if not drug:
            raise MalformedRow(prescription_path, line, "drug_id", "empty drug id")
        prescriptions.append((line, pid, day, drug, bnf))

    provenance = {
        "patients": str(patient_path),
        "events": str(event_path),
        "prescriptions": str(prescription_path),
        "event_tree": str(tree_path),
        "loaded_at": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "load_unix_time": time.time(),
    }
    return build_dataset(
        patients, events, prescriptions, tree, provenance,
        sources=(patient_path, event_path, prescription_path),
    )


def build_dataset(patients, events, prescriptions, tree: EventCodeTree, provenance=None, sources=None) -> Dataset:
    """Validate parsed rows and assemble an indexed :class:`Dataset`.

    ``patients`` rows are ``(line, pid, yob, gender, start_day, end_day)``;
    ``events`` rows ``(line, pid, day, event_code)``; ``prescriptions`` rows
    ``(line, pid, day, drug_id, bnf_tuple)``. Days are ordinals.
    """
    psrc, esrc, rsrc = sources or ("patients", "events", "prescriptions")
    if not patients:
        raise EmptyDataset(f"{psrc}: no patients")

    order = sorted(range(len(patients)), key=lambda k: patients[k][1])
    pids = tuple(patients[k][1] for k in order)
    index: dict[str, int] = {}
    for k in order:
        line, pid, yob, gender, start, end = patients[k]
        if pid in index:
            raise IntegrityError(f"{psrc}:{line}: duplicate patient_id {pid!r}")
        if start > end:
            raise IntegrityError(f"{psrc}:{line}: reg_start after reg_end for {pid!r}")
        if yob > dt.date.fromordinal(end).year:
            raise IntegrityError(f"{psrc}:{line}: year_of_birth {yob} after registration end for {pid!r}")
        index[pid] = len(index)
    yob = np.array([patients[k][2] for k in order], dtype=np.int32)
    gender = np.array([patients[k][3] for k in order], dtype="U1")
    reg_start = np.array([patients[k][4] for k in order], dtype=np.int64)
    reg_end = np.array([patients[k][5] for k in order], dtype=np.int64)

    ev_patient = np.empty(len(events), dtype=np.int32)
    ev_day = np.empty(len(events), dtype=np.int64)
    ev_code = np.empty(len(events), dtype=np.int32)
    for j, (line, pid, day, code) in enumerate(events):
        p = index.get(pid)
        if p is None:
            raise IntegrityError(f"{esrc}:{line}: event references unknown patient_id {pid!r}")
        c = tree.index.get(code)
        if c is None:
            raise IntegrityError(f"{esrc}:{line}: unknown event_code {code!r}")
        if not reg_start[p] <= day <= reg_end[p]:
            raise IntegrityError(f"{esrc}:{line}: event date outside registration of {pid!r}")
        ev_patient[j], ev_day[j], ev_code[j] = p, day, c

    drug_ids = sorted({r[3] for r in prescriptions})
    drug_index = {d: i for i, d in enumerate(drug_ids)}
    bnf_codes = sorted({r[4] for r in prescriptions})
    bnf_index = {b: i for i, b in enumerate(bnf_codes)}
    rx_patient = np.empty(len(prescriptions), dtype=np.int32)
    rx_day = np.empty(len(prescriptions), dtype=np.int64)
    rx_drug = np.empty(len(prescriptions), dtype=np.int32)
    rx_bnf = np.empty(len(prescriptions), dtype=np.int32)
    for j, (line, pid, day, drug, bnf) in enumerate(prescriptions):
        p = index.get(pid)
        if p is None:
            raise IntegrityError(f"{rsrc}:{line}: prescription references unknown patient_id {pid!r}")
        if not reg_start[p] <= day <= reg_end[p]:
            raise IntegrityError(f"{rsrc}:{line}: prescription date outside registration of {pid!r}")
        rx_patient[j], rx_day[j] = p, day
        rx_drug[j], rx_bnf[j] = drug_index[drug], bnf_index[bnf]

    # Canonical order makes the store independent of input row order.
    o = np.lexsort((ev_code, ev_day, ev_patient))
    ev_patient, ev_day, ev_code = ev_patient[o], ev_day[o], ev_code[o]
    o = np.lexsort((rx_bnf, rx_drug, rx_day, rx_patient))
    rx_patient, rx_day, rx_drug, rx_bnf = rx_patient[o], rx_day[o], rx_drug[o], rx_bnf[o]

    provenance = dict(provenance or {})
    provenance["counts"] = {
        "patients": len(pids),
        "events": len(ev_day),
        "prescriptions": len(rx_day),
        "event_codes": len(tree),
    }
    return Dataset(
        patient_ids=pids,
        year_of_birth=yob,
        gender=gender,
        reg_start=reg_start,
        reg_end=reg_end,
        ev_patient=ev_patient,
        ev_day=ev_day,
        ev_code=ev_code,
        ev_offsets=_csr_offsets(ev_patient, len(pids)),
        rx_patient=rx_patient,
        rx_day=rx_day,
        rx_drug=rx_drug,
        rx_bnf=rx_bnf,
        rx_offsets=_csr_offsets(rx_patient, len(pids)),
        drug_ids=tuple(drug_ids),
        bnf_codes=tuple(bnf_codes),
        tree=tree,
        provenance=provenance,
    )


def _as_day(value) -> int:
    if isinstance(value, dt.date):
        return value.toordinal()
    return int(value)


def events_in_window(dataset: Dataset, patient_id: str, window, depth_map: int | None = None) -> set[str]:
    """Distinct event codes recorded for a patient within ``[start, end]``."""
    p = dataset.patient_index(patient_id)
    start, end = (_as_day(w) for w in window)
    if start > end:
        raise ValueError("window start after window end")
    lo, hi = dataset.ev_offsets[p], dataset.ev_offsets[p + 1]
    days = dataset.ev_day[lo:hi]
    a, b = np.searchsorted(days, start, "left"), np.searchsorted(days, end, "right")
    codes = dataset.ev_code[lo + a: lo + b]
    codes = dataset.tree.ancestor_map(depth_map)[codes]
    return {dataset.tree.codes[c] for c in np.unique(codes)}


def family_prescriptions(dataset: Dataset, family: DrugFamily) -> dict[str, list[dt.date]]:
    """Per-patient sorted prescription dates for every drug in ``family``."""
    mask = dataset.family_mask(family)
    out: dict[str, list[dt.date]] = {}
    for p, day in zip(dataset.rx_patient[mask], dataset.rx_day[mask]):
        out.setdefault(dataset.patient_ids[p], []).append(dt.date.fromordinal(int(day)))
    return out


def write_dataset_csvs(out_dir, patients, events, prescriptions, tree_rows) -> dict[str, Path]:
    """Write the four CSV files atomically. Rows are plain tuples, written in the given order."""
    from ._io import atomic_write

    out_dir = Path(out_dir)
    paths = {
        "patients": out_dir / "patients.csv",
        "events": out_dir / "events.csv",
        "prescriptions": out_dir / "prescriptions.csv",
        "event_tree": out_dir / "event_tree.csv",
    }
    for key, header, rows in (
        ("patients", PATIENT_COLUMNS, patients),
        ("events", EVENT_COLUMNS, events),
        ("prescriptions", PRESCRIPTION_COLUMNS, prescriptions),
        ("event_tree", TREE_COLUMNS, tree_rows),
    ):
        with atomic_write(paths[key]) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    return paths
