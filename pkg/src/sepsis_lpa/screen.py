"""Sepsis case definition (infection + organ dysfunction codes) and onset detection.

Onset is the first time any age-adjusted SOFA component is abnormal. Component
thresholds are configuration: the bundled ``psofa_thresholds.csv`` follows the
pediatric SOFA score-1 cut-offs and should be treated as provisional.
"""
from __future__ import annotations

import logging
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from .cohort import Cohort, Encounter, normalize_code

logger = logging.getLogger(__name__)

INFECTION_PREFIXES_3 = frozenset("""
001 002 003 004 005 008 009 010 011 012 013 014 015 016 017 018
020 021 022 023 024 025 026 027 030 031 032 033 034 035 036 037 038 039 040 041
090 091 092 093 094 095 096 097 098 100 101 102 103 104 110 111 112 114 115 116
117 118 320 322 324 325 420 421 451 461 462 463 464 465 481 482 485 486 494 510
513 540 541 542 566 567 590 597 601 614 615 616 681 682 683 686 730
""".split())
INFECTION_PREFIXES_4 = frozenset("5695 5720 5721 5750 5990 7110 7907 9966 9985 9993".split())
INFECTION_PREFIXES_5 = frozenset("49121 56201 56203 56211 56213 56983".split())

ORGAN_DYSFUNCTION_CODES = frozenset(normalize_code(c) for c in (
    "287.5",   # unspecified thrombocytopenia
    "458.9",   # hypotension
    "570",     # acute and subacute necrosis of liver
    "584.9",   # acute kidney failure
    "348.1",   # anoxic brain damage
    "785.59",  # shock without mention of trauma
    "348.30",  # encephalopathy
    "293.9",   # transient mental disorder
    "287.49",  # secondary thrombocytopenia
    "286.9",   # other coagulation defects
    "286.6",   # defibrination syndrome
    "573.4",   # hepatic infarction
))
MECH_VENT_PROCEDURE_CODES = frozenset(normalize_code(c) for c in ("96.70", "96.71", "96.72"))

COMPONENTS = ("respiratory", "coagulation", "liver", "cardiovascular", "neurological", "renal")
COMPARATORS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}
PF_RATIO = "pf_ratio"
ROOM_AIR_FIO2 = 21.0


class ContractViolation(ValueError):
    pass


@dataclass(frozen=True)
class CodeScreenConfig:
    infection_prefixes_3: frozenset = INFECTION_PREFIXES_3
    infection_prefixes_4: frozenset = INFECTION_PREFIXES_4
    infection_prefixes_5: frozenset = INFECTION_PREFIXES_5
    organ_dysfunction_codes: frozenset = ORGAN_DYSFUNCTION_CODES
    mech_vent_procedure_codes: frozenset = MECH_VENT_PROCEDURE_CODES
    icd10_map: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for n, prefixes in ((3, self.infection_prefixes_3), (4, self.infection_prefixes_4),
                            (5, self.infection_prefixes_5)):
            bad = [p for p in prefixes if len(p) != n]
            if bad:
                raise ValueError(f"infection prefix {bad[0]!r} is not {n} characters long")

    @classmethod
    def with_icd10_map(cls, path) -> "CodeScreenConfig":
        """Default ICD-9 sets plus a user ICD-10 -> ICD-9 equivalence CSV."""
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
        for col in ("icd10_code", "icd9_equivalent"):
            if col not in df.columns:
                raise ValueError(f"{Path(path).name}: missing required column {col!r}")
        mapping = {normalize_code(a): normalize_code(b)
                   for a, b in zip(df["icd10_code"], df["icd9_equivalent"]) if a.strip()}
        return cls(icd10_map=mapping)

    def translate_icd10(self, codes: Iterable[str]) -> list:
        """Longest-prefix lookup of ICD-10 codes in the equivalence map; unmapped codes are dropped."""
        out = []
        for code in codes:
            code = normalize_code(code)
            for k in range(len(code), 0, -1):
                hit = self.icd10_map.get(code[:k])
                if hit is not None:
                    out.append(hit)
                    break
        return out


DEFAULT_CODES = CodeScreenConfig()


def match_infection(diagnosis_codes: Iterable[str], config: CodeScreenConfig = DEFAULT_CODES) -> bool:
    for code in diagnosis_codes:
        c = normalize_code(code)
        if (c[:3] in config.infection_prefixes_3 or c[:4] in config.infection_prefixes_4
                or c[:5] in config.infection_prefixes_5):
            return True
    return False


def match_organ_dysfunction(diagnosis_codes: Iterable[str], procedure_codes: Iterable[str] = (),
                            config: CodeScreenConfig = DEFAULT_CODES) -> bool:
    if any(normalize_code(c) in config.organ_dysfunction_codes for c in diagnosis_codes):
        return True
    return any(normalize_code(c) in config.mech_vent_procedure_codes for c in procedure_codes)


def _codes(encounter: Encounter, config: CodeScreenConfig):
    dx = list(encounter.diagnosis_codes) + config.translate_icd10(encounter.icd10_diagnosis_codes)
    px = list(encounter.procedure_codes) + config.translate_icd10(encounter.icd10_procedure_codes)
    return dx, px


def label_sepsis(encounter: Encounter, config: CodeScreenConfig = DEFAULT_CODES) -> bool:
    dx, px = _codes(encounter, config)
    return match_infection(dx, config) and match_organ_dysfunction(dx, px, config)


# --------------------------------------------------------------------------- SOFA components

@dataclass(frozen=True)
class ThresholdRule:
    component: str
    age_lo: float
    age_hi: float
    measurement: str
    comparator: str
    value: float

    def abnormal(self, x: float) -> bool:
        return bool(COMPARATORS[self.comparator](x, self.value))


@dataclass(frozen=True)
class SofaThresholds:
    rules: tuple

    def __post_init__(self):
        by_comp = {}
        for r in self.rules:
            if r.component not in COMPONENTS:
                raise ValueError(f"unknown SOFA component {r.component!r}")
            if r.comparator not in COMPARATORS:
                raise ValueError(f"unknown comparator {r.comparator!r}")
            if not np.isfinite(r.value):
                raise ValueError(f"{r.component}: non-finite threshold")
            by_comp.setdefault(r.component, []).append(r)
        for comp, rules in by_comp.items():
            rules.sort(key=lambda r: r.age_lo)
            if rules[0].age_lo != 0 or rules[-1].age_hi < 18:
                raise ValueError(f"{comp}: age bands must cover [0, 18]")
            for a, b in zip(rules, rules[1:]):
                if a.age_hi != b.age_lo:
                    raise ValueError(f"{comp}: age bands [{a.age_lo}, {a.age_hi}) and "
                                     f"[{b.age_lo}, {b.age_hi}) do not partition the age range")
            if any(r.age_hi <= r.age_lo for r in rules):
                raise ValueError(f"{comp}: empty age band")
        renal = sorted(by_comp.get("renal", []), key=lambda r: r.age_lo)
        if any(b.value < a.value for a, b in zip(renal, renal[1:])):
            raise ValueError("renal creatinine cut-offs must be nondecreasing with age")

    @classmethod
    def from_csv(cls, path=None) -> "SofaThresholds":
        if path is None:
            path = Path(__file__).parent / "data" / "psofa_thresholds.csv"
        df = pd.read_csv(path, dtype={"component": str, "measurement": str, "comparator": str})
        need = ("component", "age_lo", "age_hi", "measurement", "comparator", "value")
        for col in need:
            if col not in df.columns:
                raise ValueError(f"{Path(path).name}: missing required column {col!r}")
        rules = tuple(ThresholdRule(r.component.strip(), float(r.age_lo), float(r.age_hi),
                                    r.measurement.strip(), r.comparator.strip(), float(r.value))
                      for r in df.itertuples(index=False))
        return cls(rules)

    def rule_for(self, component: str, age: float) -> ThresholdRule | None:
        rules = [r for r in self.rules if r.component == component]
        if not rules:
            return None
        for r in rules:
            if r.age_lo <= age < r.age_hi:
                return r
        return max(rules, key=lambda r: r.age_hi) if age >= max(r.age_hi for r in rules) else None

    @property
    def measurements(self) -> set:
        return {r.measurement for r in self.rules}


def _pf_ratios(observations) -> list:
    """PaO2/FiO2 at every PaO2 observation, using the latest FiO2 at or before it (room air if none)."""
    fio2_t, fio2_v = [], []
    pao2 = []
    for feat, t, v in observations:
        if feat == "fio2":
            fio2_t.append(t)
            fio2_v.append(v)
        elif feat == "pao2":
            pao2.append((t, v))
    order = np.argsort(fio2_t, kind="stable")
    fio2_t = np.asarray(fio2_t)[order]
    fio2_v = np.asarray(fio2_v)[order]
    out = []
    for t, v in pao2:
        k = np.searchsorted(fio2_t, t, side="right") - 1
        fio2 = fio2_v[k] if k >= 0 else ROOM_AIR_FIO2
        pct = fio2 * 100.0 if fio2 <= 1.0 else fio2
        out.append((t, v / (pct / 100.0)))
    return out


def sofa_components(encounter: Encounter, thresholds: SofaThresholds) -> dict:
    """Per component, the time-ordered list of (hour, abnormal) evaluations.

    Flags are evaluated only at observation times of the component's measurement;
    vasopressor administrations count as cardiovascular abnormal at their times.
    """
    series = {}
    pf = None
    for comp in COMPONENTS:
        rule = thresholds.rule_for(comp, encounter.age_years)
        points = []
        if rule is not None:
            if rule.measurement == PF_RATIO:
                if pf is None:
                    pf = _pf_ratios(encounter.observations)
                points = [(t, rule.abnormal(v)) for t, v in pf]
            else:
                points = [(t, rule.abnormal(v)) for f, t, v in encounter.observations
                          if f == rule.measurement]
        if comp == "cardiovascular":
            points += [(t, True) for _, t in encounter.vasopressor_events]
        points.sort(key=lambda p: p[0])
        series[comp] = points
    return series


def first_abnormal(encounter: Encounter, thresholds: SofaThresholds) -> float | None:
    onset = None
    for points in sofa_components(encounter, thresholds).values():
        for t, bad in points:
            if bad:
                onset = t if onset is None else min(onset, t)
                break
    return onset


def detect_onset(encounter: Encounter, thresholds: SofaThresholds,
                 config: CodeScreenConfig = DEFAULT_CODES) -> float | None:
    """Earliest hour at which any SOFA component is abnormal, for a sepsis-labelled encounter."""
    if not label_sepsis(encounter, config):
        raise ContractViolation(f"encounter {encounter.encounter_id!r} is not a sepsis case")
    onset = first_abnormal(encounter, thresholds)
    if onset is None:
        logger.warning("screening inconsistency: sepsis case %s has no abnormal SOFA component",
                       encounter.encounter_id)
    return onset


def screen_cohort(cohort: Cohort, thresholds: SofaThresholds,
                  config: CodeScreenConfig = DEFAULT_CODES) -> pd.DataFrame:
    """Per-encounter infection/organ-dysfunction flags, sepsis label and onset hour."""
    rows = []
    for enc in cohort.encounters:
        dx, px = _codes(enc, config)
        inf = match_infection(dx, config)
        od = match_organ_dysfunction(dx, px, config)
        onset, note = np.nan, ""
        if inf and od:
            t = detect_onset(enc, thresholds, config)
            if t is None:
                note = "no abnormal SOFA component"
            else:
                onset = t
        rows.append((enc.encounter_id, int(inf), int(od), int(inf and od), onset, note))
    df = pd.DataFrame(rows, columns=["encounter_id", "infection", "organ_dysfunction", "sepsis",
                                     "onset_hour", "note"])
    n_sep = int(df["sepsis"].sum())
    logger.info("screened %d encounters: %d sepsis cases (%.1f%%), %d without onset",
                len(df), n_sep, 100.0 * n_sep / max(len(df), 1), int((df["note"] != "").sum()))
    return df
