"""Small helpers shared by the test modules."""

from __future__ import annotations

import csv
import datetime as dt
from pathlib import Path

from essd.store import load_dataset

FIXTURES = Path(__file__).parent / "fixtures"
TINY = FIXTURES / "tiny"

ORIGIN = dt.date(2000, 1, 1)


def day(n: int) -> str:
    """ISO date ``n`` days after a fixed origin."""
    return (ORIGIN + dt.timedelta(days=n)).isoformat()


def chain_tree(stem: str = "A", leaves_per_parent: int = 2):
    """A single depth-1 root with one chain down to depth 4 and leaf siblings at depth 5."""
    rows = [(stem, "", 1, "root")]
    parent = stem
    for d in range(2, 5):
        code = f"{parent}.1"
        rows.append((code, parent, d, f"depth {d}"))
        parent = code
    for k in range(1, leaves_per_parent + 1):
        rows.append((f"{parent}.{k}", parent, 5, f"leaf {k}"))
    return rows


def write_tables(directory: Path, patients, events, prescriptions, tree):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    specs = (
        ("patients.csv", ("patient_id", "year_of_birth", "gender", "reg_start", "reg_end"), patients),
        ("events.csv", ("patient_id", "date", "event_code"), events),
        ("prescriptions.csv", ("patient_id", "date", "drug_id", "bnf_code"), prescriptions),
        ("event_tree.csv", ("event_code", "parent_code", "depth", "description"), tree),
    )
    paths = []
    for name, header, rows in specs:
        path = directory / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        paths.append(path)
    return paths


def make_dataset(directory: Path, patients, events, prescriptions, tree):
    return load_dataset(*write_tables(directory, patients, events, prescriptions, tree))


def load_dir(directory: Path):
    directory = Path(directory)
    return load_dataset(
        directory / "patients.csv", directory / "events.csv",
        directory / "prescriptions.csv", directory / "event_tree.csv",
    )
