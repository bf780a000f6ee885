"""Synthetic longitudinal records with planted ground truth.

Each patient is generated from its own generator seeded by ``(seed, patient
ordinal)``. Background events of a code form a Poisson process whose rate
gives the configured probability of at least one record in any 30-day
window. Prescriptions arrive as episodes: an indication event, then the
prescription 1-7 days later. Planted effects then add records:

* ``ADR`` and ``CodingNoise``: after each prescription of the family, one
  extra record with probability ``(relative_risk - 1) * rate`` in days
  ``[1, window_days]``. CodingNoise records are re-coded, with probability
  ``noise_probability``, to another depth-5 code under the same depth-3
  parent. A relative risk below 1 instead thins background records in the
  window.
* ``IndicationConfounder``: whenever any family's episode emits one of this
  family's indication codes, an extra record with probability
  ``(relative_risk - 1) * rate`` within ``window_days / 2`` of the indication,
  regardless of which drug follows.
* ``ProgressiveEvent``: from the patient's first prescription of the family,
  the monthly probability rises linearly, reaching ``relative_risk * rate``
  after 12 months.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .errors import ConfigError, UnknownPreset
from .evaluation import LabeledPair, write_reference
from .store import MAX_DEPTH, DrugFamily, write_dataset_csvs

EFFECT_KINDS = ("ADR", "IndicationConfounder", "ProgressiveEvent", "CodingNoise")
ADR_LIKE = ("ADR", "CodingNoise")
MONTH = 30


@dataclass
class FamilySpec:
    bnf_prefix: str
    prescription_probability: float  # chance of at least one episode per patient-year
    indication_codes: list
    n_drugs: int = 2


@dataclass
class EffectSpec:
    family: str
    event_code: str
    kind: str
    relative_risk: float
    window_days: int = MONTH
    noise_probability: float = 0.0


@dataclass
class GeneratorConfig:
    seed: int
    n_patients: int
    branching: list  # children per node at depths 1..5
    families: list  # FamilySpec
    effects: list = field(default_factory=list)  # EffectSpec
    background_rates: dict = field(default_factory=dict)  # code -> monthly probability
    negative_controls: list = field(default_factory=list)  # [family, code] non-ADR pairs
    start_year: int = 2000
    span_years: int = 8
    min_registration_days: int = 365
    max_age_at_registration: int = 17

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        try:
            d["families"] = [f if isinstance(f, FamilySpec) else FamilySpec(**f) for f in d["families"]]
            d["effects"] = [e if isinstance(e, EffectSpec) else EffectSpec(**e) for e in d.get("effects", [])]
            d["negative_controls"] = [list(x) for x in d.get("negative_controls", [])]
            return cls(**d)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"bad generator config: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "GeneratorConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def tree_rows(branching) -> list[tuple[str, str, int, str]]:
    """Balanced code tree: ``E1``, ``E1.2``, ``E1.2.3`` ... down to depth 5."""
    if len(branching) != MAX_DEPTH or any(int(b) < 1 for b in branching):
        raise ConfigError(f"branching needs {MAX_DEPTH} positive entries, got {branching}")
    rows = []
    level = [("", None)]
    for depth, b in enumerate(branching, start=1):
        nxt = []
        for stem, parent in level:
            for k in range(1, int(b) + 1):
                code = f"E{k}" if parent is None else f"{stem}.{k}"
                rows.append((code, parent or "", depth, f"synthetic event {code}"))
                nxt.append((code, code))
        level = nxt
    return rows


def _monthly_to_daily(p):
    return -np.log1p(-np.asarray(p, dtype=np.float64)) / MONTH


class _Plan:
    """Config resolved to index arrays for the per-patient loop."""

    def __init__(self, cfg: GeneratorConfig):
        self.cfg = cfg
        rows = tree_rows(cfg.branching)
        self.tree_rows = rows
        self.codes = [r[0] for r in rows]
        self.index = {c: i for i, c in enumerate(self.codes)}
        self.depth = np.array([r[2] for r in rows])
        parent = {r[0]: r[1] for r in rows}
        self._validate(parent)

        self.bg_codes = np.array(sorted(self.index[c] for c in cfg.background_rates), dtype=np.int64)
        self.rate = np.zeros(len(self.codes))
        for c, r in cfg.background_rates.items():
            self.rate[self.index[c]] = r
        self.bg_lambda = _monthly_to_daily(self.rate[self.bg_codes])

        self.families = [DrugFamily.parse(f.bnf_prefix) for f in cfg.families]
        self.fam_lambda = [-math.log1p(-f.prescription_probability) / 365.0 for f in cfg.families]
        self.fam_drugs = [
            [(f"D{f.bnf_prefix.replace('-', '')}{k:02d}", f.bnf_prefix) for k in range(1, f.n_drugs + 1)]
            for f in cfg.families
        ]
        self.fam_ind = [np.array([self.index[c] for c in f.indication_codes]) for f in cfg.families]
        fam_pos = {f.code: i for i, f in enumerate(self.families)}

        self.post_rx = [[] for _ in self.families]  # (code, p, window, noise_p, sibling codes)
        self.thin = [[] for _ in self.families]  # (code, keep_p, window)
        self.progressive = [[] for _ in self.families]  # (code, slope per month)
        conf: dict[tuple[int, int], tuple[float, int]] = {}
        for e in cfg.effects:
            fi = fam_pos[DrugFamily.parse(e.family).code]
            c = self.index[e.event_code]
            r = self.rate[c]
            if e.kind in ADR_LIKE:
                if e.relative_risk >= 1:
                    sibs = np.array([], dtype=np.int64)
                    if e.kind == "CodingNoise":
                        sibs = self._siblings(c, parent)
                    self.post_rx[fi].append((c, min(1.0, (e.relative_risk - 1) * r), e.window_days, e.noise_probability, sibs))
                else:
                    self.thin[fi].append((c, e.relative_risk, e.window_days))
            elif e.kind == "IndicationConfounder":
                for ind in self.fam_ind[fi]:
                    key = (int(ind), c)
                    p = min(1.0, max(0.0, (e.relative_risk - 1) * r))
                    old = conf.get(key)
                    if old is not None and old != (p, e.window_days):
                        raise ConfigError(f"conflicting IndicationConfounder effects on {e.event_code}")
                    conf[key] = (p, e.window_days)
            elif e.kind == "ProgressiveEvent":
                self.progressive[fi].append((c, max(0.0, (e.relative_risk - 1) * r) / 12.0))
        self.confounders: dict[int, list] = {}
        for (ind, c), (p, w) in sorted(conf.items()):
            self.confounders.setdefault(ind, []).append((c, p, w))

    def _siblings(self, c, parent):
        code = self.codes[c]
        d3 = code
        while self.depth[self.index[d3]] > 3:
            d3 = parent[d3]
        return np.array(
            [i for i, k in enumerate(self.codes)
             if self.depth[i] == MAX_DEPTH and k.startswith(d3 + ".") and i != c],
            dtype=np.int64,
        )

    def _validate(self, parent):
        cfg = self.cfg
        if cfg.n_patients < 1:
            raise ConfigError("n_patients must be positive")
        if cfg.span_years < 1 or cfg.min_registration_days > cfg.span_years * 365:
            raise ConfigError("study span shorter than the minimum registration")
        for c, r in cfg.background_rates.items():
            if c not in self.index:
                raise ConfigError(f"background rate for unknown code {c!r}")
            if not 0 <= r < 1:
                raise ConfigError(f"background rate of {c} must be in [0, 1), got {r}")
        prefixes = set()
        for f in cfg.families:
            try:
                fam = DrugFamily.parse(f.bnf_prefix)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            if len(fam.prefix) != 4:
                raise ConfigError(f"family {f.bnf_prefix} must be a full 4-component BNF code")
            if fam.code in prefixes:
                raise ConfigError(f"duplicate family {fam}")
            prefixes.add(fam.code)
            if not 0 <= f.prescription_probability < 1:
                raise ConfigError(f"prescription probability of {fam} must be in [0, 1)")
            if not f.indication_codes:
                raise ConfigError(f"family {fam} needs at least one indication code")
            for c in f.indication_codes:
                if c not in self.index:
                    raise ConfigError(f"unknown indication code {c!r}")
            if f.n_drugs < 1:
                raise ConfigError("n_drugs must be positive")
        labels: dict[tuple[str, str], int] = {}
        for e in cfg.effects:
            if e.kind not in EFFECT_KINDS:
                raise ConfigError(f"unknown effect kind {e.kind!r}")
            if DrugFamily.parse(e.family).code not in prefixes:
                raise ConfigError(f"effect on unconfigured family {e.family}")
            if e.event_code not in self.index:
                raise ConfigError(f"effect on unknown code {e.event_code!r}")
            if not e.relative_risk > 0:
                raise ConfigError(f"relative_risk must be > 0, got {e.relative_risk}")
            if cfg.background_rates.get(e.event_code, 0) <= 0:
                raise ConfigError(f"effect code {e.event_code} needs a positive background rate")
            if e.window_days < 1:
                raise ConfigError("window_days must be >= 1")
            if not 0 <= e.noise_probability <= 1:
                raise ConfigError("noise_probability must be in [0, 1]")
            if e.kind == "CodingNoise":
                if self.depth[self.index[e.event_code]] != MAX_DEPTH:
                    raise ConfigError(f"CodingNoise code {e.event_code} must be at depth {MAX_DEPTH}")
                if not len(self._siblings(self.index[e.event_code], parent)):
                    raise ConfigError(f"CodingNoise code {e.event_code} has no depth-5 sibling")
            key = (DrugFamily.parse(e.family).code, e.event_code)
            lab = 1 if e.kind in ADR_LIKE else 0
            if labels.setdefault(key, lab) != lab:
                raise ConfigError(f"pair {key} planted as both ADR and non-ADR")
        for fam, code in cfg.negative_controls:
            key = (DrugFamily.parse(fam).code, code)
            if code not in self.index:
                raise ConfigError(f"negative control on unknown code {code!r}")
            if labels.get(key) == 1:
                raise ConfigError(f"negative control {key} is also a planted ADR")


def _patient(plan: _Plan, ordinal: int, study_start: int, span_days: int):
    cfg = plan.cfg
    rng = np.random.default_rng([cfg.seed, ordinal])
    gender = "M" if rng.random() < 0.5 else "F"
    reg_start = study_start + int(rng.integers(0, span_days - cfg.min_registration_days + 1))
    remaining = study_start + span_days - reg_start
    reg_end = reg_start + int(rng.integers(cfg.min_registration_days, remaining + 1)) - 1
    yob = dt.date.fromordinal(reg_start).year - int(rng.integers(0, cfg.max_age_at_registration + 1))
    dur = reg_end - reg_start + 1

    counts = rng.poisson(plan.bg_lambda * dur)
    ev_code = [np.repeat(plan.bg_codes, counts)]
    ev_day = [reg_start + rng.integers(0, dur, int(counts.sum()))]

    rx_rows = []
    thin_windows = []
    for fi, fam in enumerate(plan.families):
        k = int(rng.poisson(plan.fam_lambda[fi] * dur))
        if k == 0 or dur <= 8:
            continue
        days = np.sort(reg_start + 7 + rng.integers(0, dur - 7, k))
        drugs = rng.integers(0, len(plan.fam_drugs[fi]), k)
        onset = days - rng.integers(1, 8, k)
        ind = plan.fam_ind[fi][rng.integers(0, len(plan.fam_ind[fi]), k)]
        ev_code.append(ind)
        ev_day.append(onset)
        for d, g in zip(days.tolist(), drugs.tolist()):
            rx_rows.append((d, *plan.fam_drugs[fi][g]))

        for i_code in np.unique(ind):
            for c, p, w in plan.confounders.get(int(i_code), ()):
                at = onset[ind == i_code]
                hit = rng.random(len(at)) < p
                if hit.any():
                    half = w // 2
                    ev_code.append(np.full(int(hit.sum()), c))
                    ev_day.append(at[hit] + rng.integers(-half, w - half + 1, int(hit.sum())))

        for c, p, w, q, sibs in plan.post_rx[fi]:
            hit = rng.random(k) < p
            n = int(hit.sum())
            if not n:
                continue
            codes = np.full(n, c)
            if q > 0:
                swap = rng.random(n) < q
                codes[swap] = sibs[rng.integers(0, len(sibs), int(swap.sum()))]
            ev_code.append(codes)
            ev_day.append(days[hit] + rng.integers(1, w + 1, n))

        for c, keep, w in plan.thin[fi]:
            thin_windows.append((c, keep, w, days))

        first = int(days[0])
        for c, slope in plan.progressive[fi]:
            months = np.arange(1, (reg_end - first) // MONTH + 2)
            p = np.minimum(1.0, slope * np.minimum(months, 12))
            hit = rng.random(len(months)) < p
            n = int(hit.sum())
            if n:
                ev_code.append(np.full(n, c))
                ev_day.append(first + MONTH * (months[hit] - 1) + rng.integers(1, MONTH + 1, n))

    codes = np.concatenate(ev_code).astype(np.int64)
    evdays = np.concatenate(ev_day).astype(np.int64)
    keep = (evdays >= reg_start) & (evdays <= reg_end)
    for c, keep_p, w, days in thin_windows:
        for d in days.tolist():
            inwin = keep & (codes == c) & (evdays >= d + 1) & (evdays <= d + w)
            idx = np.flatnonzero(inwin)
            if len(idx):
                keep[idx[rng.random(len(idx)) >= keep_p]] = False
    codes, evdays = codes[keep], evdays[keep]
    return gender, yob, reg_start, reg_end, codes, evdays, sorted(rx_rows)


@dataclass
class GeneratedData:
    patients: list
    events: list
    prescriptions: list
    tree_rows: list
    reference: list
    ground_truth: dict


def generate_records(cfg: GeneratorConfig) -> GeneratedData:
    """Generate all rows in memory (deterministic given ``cfg.seed``)."""
    plan = _Plan(cfg)
    study_start = dt.date(cfg.start_year, 1, 1).toordinal()
    span_days = dt.date(cfg.start_year + cfg.span_years, 1, 1).toordinal() - study_start
    width = max(6, len(str(cfg.n_patients)))
    iso = {}

    def day_str(d):
        s = iso.get(d)
        if s is None:
            s = iso[d] = dt.date.fromordinal(d).isoformat()
        return s

    patients, events, prescriptions = [], [], []
    for ordinal in range(cfg.n_patients):
        pid = f"P{ordinal:0{width}d}"
        gender, yob, rs, re_, codes, days, rx = _patient(plan, ordinal, study_start, span_days)
        patients.append((pid, yob, gender, day_str(rs), day_str(re_)))
        order = np.lexsort((codes, days))
        for c, d in zip(codes[order].tolist(), days[order].tolist()):
            events.append((pid, day_str(d), plan.codes[c]))
        for d, drug, bnf in rx:
            prescriptions.append((pid, day_str(d), drug, bnf))

    reference = {}
    for e in cfg.effects:
        key = (DrugFamily.parse(e.family).code, e.event_code)
        reference[key] = LabeledPair(*key, 1 if e.kind in ADR_LIKE else 0)
    for fam, code in cfg.negative_controls:
        key = (DrugFamily.parse(fam).code, code)
        reference.setdefault(key, LabeledPair(*key, 0))
    truth = {
        "seed": cfg.seed,
        "n_patients": cfg.n_patients,
        "effects": [asdict(e) for e in cfg.effects],
        "negative_controls": [list(x) for x in cfg.negative_controls],
        "families": [asdict(f) for f in cfg.families],
        "labelled_pairs": len(reference),
        "adr_pairs": sum(p.label for p in reference.values()),
    }
    return GeneratedData(
        patients, events, prescriptions, plan.tree_rows, sorted(reference.values()), truth
    )


def generate(cfg: GeneratorConfig, out_dir) -> dict[str, Path]:
    """Write the dataset CSVs, ``reference.csv``, ``ground_truth.json`` and the config used."""
    data = generate_records(cfg)
    out_dir = Path(out_dir)
    paths = write_dataset_csvs(out_dir, data.patients, data.events, data.prescriptions, data.tree_rows)
    paths["reference"] = out_dir / "reference.csv"
    write_reference(paths["reference"], data.reference)
    paths["ground_truth"] = out_dir / "ground_truth.json"
    with atomic_write(paths["ground_truth"]) as fh:
        json.dump(data.ground_truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["generator_config"] = out_dir / "generator_config.json"
    with atomic_write(paths["generator_config"]) as fh:
        fh.write(cfg.to_json() + "\n")
    return paths


# --------------------------------------------------------------------------
# presets

PENICILLINS = ("05-01-01-01", "05-01-01-02", "05-01-01-03")


def _layout(
    *,
    seed: int,
    n_patients: int,
    branching,
    prescription_probability,
    rate_range,
    n_adr: int,
    n_shared_adr: int,
    n_noise_adr: int,
    n_confounder: int,
    n_progressive: int,
    n_negative: int,
    layout_seed: int,
) -> GeneratorConfig:
    """Assign roles to leaves of a balanced tree.

    Role assignment uses ``layout_seed`` so that replicate datasets (different
    ``seed``) share the same ground truth.
    """
    rng = np.random.default_rng(layout_seed)
    rows = tree_rows(branching)
    leaves = [r[0] for r in rows if r[2] == MAX_DEPTH]
    top = sorted({c.split(".")[0] for c in leaves})
    # first top-level branch holds indications and confounders; coding-noise
    # ADRs get depth-3 groups of their own so noise never lands on a control
    ind_branch = top[0]
    ind_leaves = [c for c in leaves if c.split(".")[0] == ind_branch]
    other = [c for c in leaves if c.split(".")[0] != ind_branch]
    groups3 = sorted({".".join(c.split(".")[:3]) for c in other})
    rng.shuffle(groups3)
    noise_groups = groups3[: max(1, math.ceil(n_noise_adr * len(PENICILLINS) / 2))]
    noise_pool = [c for c in other if ".".join(c.split(".")[:3]) in noise_groups]
    free = [c for c in other if c not in noise_pool]
    rng.shuffle(ind_leaves)
    rng.shuffle(noise_pool)
    rng.shuffle(free)

    indications = ind_leaves[:3]
    confounders = ind_leaves[3: 3 + n_confounder]
    lo, hi = rate_range
    rates = {c: float(np.exp(rng.uniform(np.log(lo), np.log(hi)))) for c in leaves}
    for c in indications:
        rates[c] = lo

    families = [
        FamilySpec(f, p, list(indications), n_drugs=2)
        for f, p in zip(PENICILLINS, prescription_probability)
    ]
    effects: list[EffectSpec] = []
    negatives: list[list] = []
    take = iter(free)
    shared = [next(take) for _ in range(n_shared_adr)]
    for fam in PENICILLINS:
        for c in shared:
            effects.append(EffectSpec(fam, c, "ADR", float(rng.uniform(2.0, 5.0)), int(rng.integers(7, 31))))
        for _ in range(n_adr):
            effects.append(EffectSpec(fam, next(take), "ADR", float(rng.uniform(2.0, 6.0)), int(rng.integers(7, 31))))
    noise_iter = iter(noise_pool)
    for fam in PENICILLINS:
        for _ in range(n_noise_adr):
            effects.append(
                EffectSpec(fam, next(noise_iter), "CodingNoise", float(rng.uniform(3.0, 6.0)), 30,
                           float(rng.uniform(0.5, 0.8)))
            )
    for c in confounders:
        rr = float(rng.uniform(6.0, 12.0))
        for fam in PENICILLINS:
            effects.append(EffectSpec(fam, c, "IndicationConfounder", rr, 30))
    for fam in PENICILLINS:
        for _ in range(n_progressive):
            effects.append(EffectSpec(fam, next(take), "ProgressiveEvent", float(rng.uniform(12.0, 24.0))))
    for fam in PENICILLINS:
        for _ in range(n_negative):
            negatives.append([fam, next(take)])
    return GeneratorConfig(
        seed=seed,
        n_patients=n_patients,
        branching=list(branching),
        families=families,
        effects=effects,
        background_rates=dict(sorted(rates.items())),
        negative_controls=negatives,
    )


PRESETS = ("smoke", "standard", "confounded")


def benchmark_suite(name: str, seed: int = 0) -> GeneratorConfig:
    """Checked-in benchmark configurations."""
    if name == "smoke":
        return _layout(
            seed=seed, n_patients=2000, branching=(3, 2, 2, 2, 3),
            prescription_probability=(0.25, 0.20, 0.30), rate_range=(0.01, 0.03),
            n_adr=3, n_shared_adr=1, n_noise_adr=1, n_confounder=1, n_progressive=1,
            n_negative=5, layout_seed=101,
        )
    if name == "standard":
        return _layout(
            seed=seed, n_patients=10000, branching=(3, 3, 3, 3, 3),
            prescription_probability=(0.10, 0.06, 0.15), rate_range=(0.002, 0.02),
            n_adr=12, n_shared_adr=2, n_noise_adr=0, n_confounder=0, n_progressive=0,
            n_negative=20, layout_seed=202,
        )
    if name == "confounded":
        return _layout(
            seed=seed, n_patients=20000, branching=(3, 3, 3, 3, 3),
            prescription_probability=(0.10, 0.06, 0.15), rate_range=(0.002, 0.02),
            n_adr=10, n_shared_adr=4, n_noise_adr=4, n_confounder=6, n_progressive=4,
            n_negative=20, layout_seed=303,
        )
    raise UnknownPreset(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
