"""Synthetic pediatric cohorts with planted sepsis subgroups and known onset times.

The generator writes the five cohort CSVs plus ``truth.csv``. Cases carry an
infection code and an organ-dysfunction code; no control carries both. For a
case, every SOFA-defining measurement before the onset hour is held on the
normal side of its age-band threshold and an abnormal observation of the
subgroup's signature component is placed exactly at onset, so screening with
the same thresholds recovers the onset hour.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .cohort import DEFAULT_VASOPRESSORS
from .screen import (INFECTION_PREFIXES_3, INFECTION_PREFIXES_4, INFECTION_PREFIXES_5,
                     MECH_VENT_PROCEDURE_CODES, ORGAN_DYSFUNCTION_CODES, PF_RATIO, SofaThresholds,
                     match_infection, match_organ_dysfunction)

logger = logging.getLogger(__name__)

BASE_DATE = np.datetime64("2012-01-01T00:00:00", "s")


@dataclass(frozen=True)
class FeatureModel:
    """Per-encounter level distribution of one measurement plus its sampling pattern.

    ``dist`` is ``normal`` (loc, scale in raw units) or ``lognormal`` (loc is the
    median, scale the sd of the natural log). ``age_slope`` shifts loc per year.
    ``noise`` is the within-encounter sd as a fraction of ``scale``.
    """
    dist: str
    loc: float
    scale: float
    lo: float
    hi: float
    decimals: int = 1
    rate: float = 1.5      # extra observations per encounter (Poisson mean)
    noise: float = 0.3
    age_slope: float = 0.0


FEATURE_MODELS = {
    "hr": FeatureModel("normal", 115, 25, 40, 230, 0, 4.0),
    "rr": FeatureModel("normal", 24, 7, 8, 80, 0, 4.0),
    "temperature": FeatureModel("normal", 37.0, 0.6, 34.5, 41.5, 1, 3.0),
    "map": FeatureModel("normal", 72, 10, 35, 130, 1, 4.0),
    "gcs": FeatureModel("normal", 15.6, 1.0, 3, 15, 0, 2.0, 0.4),
    "alt": FeatureModel("lognormal", 24, 0.6, 3, 3000, 0, 0.7),
    "ast": FeatureModel("lognormal", 25, 0.6, 3, 3000, 0, 0.7),
    "bilirubin": FeatureModel("lognormal", 0.4, 0.7, 0.05, 40, 2, 0.7),
    "chloride": FeatureModel("normal", 106, 3.5, 80, 130, 0),
    "creatinine": FeatureModel("lognormal", 0.25, 0.3, 0.1, 8, 2, 1.5, 0.3, 0.035),
    "glucose": FeatureModel("lognormal", 115, 0.3, 40, 600, 0),
    "hematocrit": FeatureModel("normal", 37.5, 4.5, 15, 60, 1),
    "inr": FeatureModel("lognormal", 1.1, 0.12, 0.8, 6, 1, 0.7),
    "platelet": FeatureModel("normal", 285, 90, 5, 900, 0),
    "potassium": FeatureModel("normal", 4.1, 0.45, 2.5, 7, 1),
    "ptt": FeatureModel("lognormal", 31, 0.15, 18, 150, 1, 0.7),
    "sodium": FeatureModel("normal", 139, 2.8, 120, 160, 0),
    "bicarbonate": FeatureModel("normal", 24, 3, 5, 40, 0),
    "base_deficit": FeatureModel("normal", -3, 4, -30, 25, 0, 1.0),
    "lactate": FeatureModel("lognormal", 1.4, 0.45, 0.3, 15, 1, 1.0),
    "ph": FeatureModel("normal", 7.38, 0.05, 6.8, 7.7, 2, 1.0),
    "fio2": FeatureModel("lognormal", 35, 0.4, 21, 100, 0, 1.0),
    "pao2": FeatureModel("lognormal", 110, 0.45, 25, 500, 0, 1.0),
    "paco2": FeatureModel("normal", 37, 6, 15, 90, 1, 1.0),
}
PULSE_PRESSURE = (44.0, 8.0)
GCS_PARTS = (("gcs_eye", 4), ("gcs_motor", 6), ("gcs_verbal", 5))
DERIVED = {"sbp": "map", "dbp": "map", "gcs_eye": "gcs", "gcs_motor": "gcs", "gcs_verbal": "gcs"}

# whole-stay missingness of non-septic encounters
CONTROL_MISSING = {
    "hr": 0.183, "rr": 0.008, "temperature": 0.258, "map": 0.018, "gcs": 0.694, "alt": 0.547,
    "ast": 0.548, "bilirubin": 0.543, "chloride": 0.19, "creatinine": 0.222, "glucose": 0.912,
    "hematocrit": 0.17, "inr": 0.83, "platelet": 0.179, "potassium": 0.191, "ptt": 0.897,
    "sodium": 0.189, "bicarbonate": 0.191, "base_deficit": 0.905, "lactate": 0.861, "ph": 0.905,
    "fio2": 0.87, "pao2": 0.954, "paco2": 0.905,
}
# post-onset missingness of septic encounters
CASE_MISSING = {
    "hr": 0.09, "rr": 0.03, "temperature": 0.239, "map": 0.022, "gcs": 0.463, "alt": 0.45,
    "ast": 0.45, "bilirubin": 0.172, "chloride": 0.037, "creatinine": 0.037, "glucose": 0.791,
    "hematocrit": 0.03, "inr": 0.351, "platelet": 0.03, "potassium": 0.037, "ptt": 0.5,
    "sodium": 0.037, "bicarbonate": 0.037, "base_deficit": 0.6, "lactate": 0.55, "ph": 0.575,
    "fio2": 0.5, "pao2": 0.657, "paco2": 0.649,
}

# abnormal value placed at onset for each component's defining measurement
ONSET_EXEMPLAR = {"platelet": 80.0, "bilirubin": 3.0, "gcs": 7.0, "creatinine": 2.0, "map": 30.0}
ONSET_FIO2, ONSET_PAO2 = 60.0, 70.0

FILLER_DX = ("401.9", "493.90", "780.60", "V29.0", "276.51", "780.3", "784.0", "787.01", "719.46")
FILLER_PX = ("38.93", "99.04", "88.38", "87.44")
ANTIBIOTICS = ("ceftriaxone", "vancomycin", "ampicillin")


@dataclass(frozen=True)
class SubgroupSpec:
    name: str
    weight: float
    age: tuple | None = None                        # normal mean, sd (clipped to [0, 18]); None keeps uniform
    means: dict = field(default_factory=dict)       # feature -> level loc, or (loc, scale)
    volume: float = 1.0                             # variance multiplier (VEI-style)
    missing: dict = field(default_factory=dict)     # per-feature missingness overrides
    mortality: float = 0.0
    vasopressors: dict = field(default_factory=dict)  # drug -> probability of any use
    onset_component: str = "renal"
    mech_vent: float = 0.2                          # probability OD is coded by ventilation


# Two subgroups carry distinctive signatures that run against the shared
# febrile/tachycardic picture of the others: ventilated respiratory failure with
# shock, and coma with bradycardia and hypothermia.
DEFAULT_SUBGROUPS = (
    SubgroupSpec("older_febrile", 33 / 134, (14.5, 4.0),
                 {"hr": 135, "rr": 30, "temperature": 38.0, "lactate": 1.9},
                 0.8, vasopressors={"epinephrine": 0.06}, onset_component="renal"),
    SubgroupSpec("respiratory", 35 / 134, (9.0, 5.5),
                 {"hr": 105, "rr": 18, "temperature": 36.5, "pao2": 72, "fio2": 65, "paco2": 49,
                  "ph": 7.29, "map": 66, "inr": 1.25, "bicarbonate": 21, "lactate": 2.0},
                 1.3, {"pao2": 0.15, "paco2": 0.15, "ph": 0.15, "fio2": 0.1, "lactate": 0.3},
                 0.06, {"dopamine": 0.23, "epinephrine": 0.37, "phenylephrine": 0.09,
                        "vasopressin": 0.06}, "respiratory", 0.7),
    SubgroupSpec("young_febrile", 39 / 134, (4.5, 4.0),
                 {"hr": 142, "rr": 33, "temperature": 38.1, "platelet": 240},
                 1.0, vasopressors={"epinephrine": 0.23}, onset_component="coagulation"),
    SubgroupSpec("neurological", 27 / 134, (13.0, 4.5),
                 {"gcs": (5.5, 2.0), "hr": 96, "rr": 17, "temperature": 36.3, "sodium": 141},
                 1.0, {"gcs": 0.05}, 0.22, {"dopamine": 0.15, "epinephrine": 0.33,
                                            "phenylephrine": 0.33, "vasopressin": 0.15},
                 "neurological", 0.4),
)

# Non-septic look-alikes (trauma/seizure, bronchiolitis/asthma); weights are
# fractions of the controls.
DEFAULT_CONTROL_GROUPS = (
    SubgroupSpec("control_neuro", 0.15,
                 means={"gcs": (9.0, 3.0), "hr": 135, "rr": 30, "temperature": 37.9},
                 missing={"gcs": 0.05}),
    SubgroupSpec("control_respiratory", 0.15,
                 means={"fio2": 50, "pao2": 82, "paco2": 45, "ph": 7.33, "rr": 34, "hr": 138,
                        "temperature": 37.9},
                 missing={"fio2": 0.15, "pao2": 0.2, "paco2": 0.2, "ph": 0.2}),
)


@dataclass(frozen=True)
class SimSpec:
    """Cohort size, case subgroups, control look-alike groups and missingness.

    Cases default to the control missingness rates so that being measured is not
    by itself a case marker; ``CASE_MISSING`` holds the post-onset rates seen in
    septic patients for runs that want them.
    """
    n_controls: int = 6312
    n_cases: int = 134
    subgroups: tuple = DEFAULT_SUBGROUPS
    control_groups: tuple = DEFAULT_CONTROL_GROUPS
    family: str = "VEI"                 # EEI ignores subgroup volumes
    control_missing: dict = field(default_factory=lambda: dict(CONTROL_MISSING))
    case_missing: dict = field(default_factory=lambda: dict(CONTROL_MISSING))
    control_mortality: float = 0.003
    control_infection_only: float = 0.06
    control_od_only: float = 0.03
    onset_window: tuple = (0.5, 12.0)   # hours after admission
    seed: int = 0

    def __post_init__(self):
        if self.n_controls < 0 or self.n_cases < 0:
            raise ValueError("counts must be nonnegative")
        if not self.subgroups:
            raise ValueError("at least one subgroup is required")
        w = np.array([s.weight for s in self.subgroups], dtype=float)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("subgroup weights must be positive and sum to 1")
        cw = np.array([s.weight for s in self.control_groups], dtype=float)
        if np.any(cw <= 0) or cw.sum() >= 1.0:
            raise ValueError("control group fractions must be positive and sum below 1")
        for table in (self.control_missing, self.case_missing):
            for k, v in table.items():
                if not 0.0 <= v < 1.0:
                    raise ValueError(f"missingness rate for {k!r} must lie in [0, 1)")
        if self.family not in ("EEI", "VEI"):
            raise ValueError("family must be EEI or VEI")

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.subgroups], dtype=float)

    @classmethod
    def from_prevalence(cls, n_total: int, prevalence: float, **kw) -> "SimSpec":
        n_cases = int(round(n_total * prevalence))
        return cls(n_controls=n_total - n_cases, n_cases=n_cases, **kw)

    def with_subgroups(self, k: int) -> "SimSpec":
        """Keep the first ``k`` subgroups with renormalized weights (k=1: homogeneous cases)."""
        kept = self.subgroups[:k]
        total = sum(s.weight for s in kept)
        return replace(self, subgroups=tuple(replace(s, weight=s.weight / total) for s in kept))


def allocate(n: int, weights) -> np.ndarray:
    """Largest-remainder integer allocation of ``n`` by ``weights``."""
    w = np.asarray(weights, dtype=float)
    quota = n * w / w.sum()
    base = np.floor(quota).astype(int)
    rem = n - base.sum()
    order = np.argsort(-(quota - base), kind="stable")
    base[order[:rem]] += 1
    return base


def _icd_format(code: str) -> str:
    """Insert the conventional period after the third character of numeric codes."""
    return code if len(code) <= 3 or not code[:3].isdigit() else f"{code[:3]}.{code[3:]}"


def _check_fillers():
    for c in FILLER_DX:
        if match_infection([c]) or match_organ_dysfunction([c]):
            raise AssertionError(f"filler diagnosis {c} matches a screening code")
    for c in FILLER_PX:
        if match_organ_dysfunction([], [c]):
            raise AssertionError(f"filler procedure {c} matches a screening code")


_check_fillers()
_INFECTION_POOL = tuple(sorted(INFECTION_PREFIXES_3 | INFECTION_PREFIXES_4 | INFECTION_PREFIXES_5))
_OD_POOL = tuple(sorted(ORGAN_DYSFUNCTION_CODES))
_VENT_POOL = tuple(sorted(MECH_VENT_PROCEDURE_CODES))


def _mech_vent_code(code: str) -> str:
    # procedure codes carry the period after two characters
    return f"{code[:2]}.{code[2:]}"


def _infection_code(rng) -> str:
    p = _INFECTION_POOL[rng.integers(len(_INFECTION_POOL))]
    if len(p) < 5 and rng.random() < 0.7:
        p = p + str(rng.integers(10))
    return p


def _clamp_normal(rule, x: np.ndarray, decimals: int) -> np.ndarray:
    """Move values to the normal side of ``rule`` with a small margin."""
    step = 10.0 ** -decimals
    margin = max(0.02 * abs(rule.value), step)
    if rule.comparator in ("<", "<="):
        bound = math.ceil((rule.value + margin) / step) * step
        return np.maximum(x, bound)
    bound = math.floor((rule.value - margin) / step) * step
    return np.minimum(x, bound)


def _split_gcs(total: np.ndarray) -> dict:
    """Deterministic split of a GCS total into eye/motor/verbal scores."""
    deficit = 15 - total.astype(int)
    eye = np.minimum(np.round(deficit * 3 / 12).astype(int), 3)
    verbal = np.minimum(np.round(deficit * 4 / 12).astype(int), 4)
    motor = deficit - eye - verbal
    over = motor > 5
    verbal = np.where(over, verbal + (motor - 5), verbal)
    motor = np.minimum(motor, 5)
    return {"gcs_eye": 4 - eye, "gcs_motor": 6 - motor, "gcs_verbal": 5 - verbal}


@dataclass
class Simulation:
    encounters: pd.DataFrame
    observations: pd.DataFrame
    diagnoses: pd.DataFrame
    procedures: pd.DataFrame
    meds: pd.DataFrame
    truth: pd.DataFrame
    spec: SimSpec

    FILES = ("encounters", "observations", "diagnoses", "procedures", "meds", "truth")

    def write(self, directory) -> dict:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name in self.FILES:
            p = d / f"{name}.csv"
            getattr(self, name).to_csv(p, index=False, lineterminator="\n")
            paths[name] = p
        return paths


def simulate_cohort(spec: SimSpec = SimSpec(), thresholds: SofaThresholds | None = None) -> Simulation:
    """Draw a cohort under ``spec``; thresholds default to the bundled SOFA table."""
    thresholds = thresholds or SofaThresholds.from_csv()
    rng = np.random.default_rng(spec.seed)
    n_cases, n_ctrl = spec.n_cases, spec.n_controls
    N = n_cases + n_ctrl
    if spec.n_cases and spec.n_cases < 5 * len(spec.subgroups):
        logger.warning("fewer than 5 cases per subgroup on average; downstream SMOTE (k=5) will "
                       "reduce its neighbour count")
    sizes = allocate(n_cases, spec.weights)
    group = np.concatenate([np.repeat(np.arange(1, len(sizes) + 1), sizes), np.zeros(n_ctrl, int)])
    is_case = group > 0
    # control look-alike groups get negative ids
    cw = [c.weight for c in spec.control_groups]
    ctrl_sizes = allocate(n_ctrl, cw + [1.0 - sum(cw)])
    ctrl_lab = np.concatenate([np.repeat(-np.arange(1, len(ctrl_sizes)), ctrl_sizes[:-1]),
                               np.zeros(ctrl_sizes[-1], int)])
    group[~is_case] = rng.permutation(ctrl_lab)
    profiles = [(g, sg) for g, sg in enumerate(spec.subgroups, start=1)] + \
               [(-g, cg) for g, cg in enumerate(spec.control_groups, start=1)]
    ids = np.array([f"E{i:06d}" for i in rng.permutation(N) + 1])

    # demographics and stay
    age = rng.uniform(0.0, 18.0, N)
    for g, sg in profiles:
        sel = group == g
        if sg.age is not None:
            age[sel] = rng.normal(sg.age[0], sg.age[1], sel.sum())
    age = np.round(np.clip(age, 0.0, 18.0), 1)
    los_h = np.where(is_case, np.exp(rng.normal(np.log(120.0), 0.6, N)),
                     np.exp(rng.normal(np.log(60.0), 0.7, N)))
    los_h = np.clip(los_h, np.where(is_case, 24.0, 6.0), 24.0 * 60)
    los_s = np.round(los_h * 3600).astype(np.int64)
    admit = BASE_DATE + rng.integers(0, 6 * 365 * 86400, N).astype("timedelta64[s]")
    lo_on, hi_on = spec.onset_window
    onset_s = np.full(N, -1, dtype=np.int64)
    onset_s[is_case] = np.round(rng.uniform(lo_on, hi_on, n_cases) * 3600).astype(np.int64)
    died = np.where(is_case, False, rng.random(N) < spec.control_mortality)
    for g, sg in enumerate(spec.subgroups, start=1):
        sel = group == g
        died[sel] = rng.random(sel.sum()) < sg.mortality

    # per-encounter levels on the model scale
    rows = []
    for name, fm in FEATURE_MODELS.items():
        loc = np.full(N, fm.loc, dtype=float)
        if fm.age_slope:
            loc = loc + fm.age_slope * age if fm.dist == "normal" else loc * (1 + fm.age_slope * age / fm.loc)
        scale = np.full(N, fm.scale, dtype=float)
        miss = np.full(N, spec.control_missing.get(name, 0.0))
        miss[is_case] = spec.case_missing.get(name, 0.0)
        for g, sg in profiles:
            sel = group == g
            vol = math.sqrt(sg.volume) if spec.family == "VEI" else 1.0
            m = sg.means.get(name)
            if m is not None:
                loc[sel], scale[sel] = (m if isinstance(m, tuple) else (m, fm.scale))
            scale[sel] *= vol
            if name in sg.missing:
                miss[sel] = sg.missing[name]
        if fm.dist == "lognormal":
            level = np.log(loc) + scale * rng.standard_normal(N)
        else:
            level = loc + scale * rng.standard_normal(N)
        measured = rng.random(N) >= miss
        n_obs = np.where(measured, 1 + rng.poisson(fm.rate, N), 0)
        enc = np.repeat(np.arange(N), n_obs)
        first = np.zeros(enc.size, dtype=bool)
        first[np.cumsum(n_obs)[n_obs > 0] - n_obs[n_obs > 0]] = True
        span = los_s[enc].astype(float)
        t = np.where(first, np.minimum(rng.exponential(3 * 3600.0, enc.size), rng.random(enc.size) * span),
                     rng.random(enc.size) * span)
        t = np.clip(np.round(t).astype(np.int64), 0, los_s[enc])
        noise = fm.noise * scale[enc] * rng.standard_normal(enc.size)
        val = level[enc] + noise
        val = np.exp(val) if fm.dist == "lognormal" else val
        val = np.round(np.clip(val, fm.lo, fm.hi), fm.decimals)
        rows.append(pd.DataFrame({"e": enc, "feature": name, "sec": t, "value": val}))
    obs = pd.concat(rows, ignore_index=True)
    obs = obs.drop_duplicates(["e", "feature", "sec"], keep="first")

    # keep SOFA measurements normal before onset
    pre = is_case[obs["e"].to_numpy()] & (obs["sec"].to_numpy() < onset_s[obs["e"].to_numpy()])
    for comp in ("coagulation", "liver", "cardiovascular", "neurological", "renal"):
        for name in {r.measurement for r in thresholds.rules if r.component == comp}:
            if name == PF_RATIO or name not in FEATURE_MODELS:
                continue
            sel = pre & (obs["feature"] == name).to_numpy()
            for idx in np.flatnonzero(sel):
                e = obs["e"].iat[idx]
                rule = thresholds.rule_for(comp, age[e])
                if rule is not None and rule.measurement == name:
                    obs.iat[idx, obs.columns.get_loc("value")] = float(
                        _clamp_normal(rule, np.array([obs["value"].iat[idx]]),
                                      FEATURE_MODELS[name].decimals)[0])

    # onset observation for the signature component
    extra = []
    for e in np.flatnonzero(is_case):
        sg = spec.subgroups[group[e] - 1]
        rule = thresholds.rule_for(sg.onset_component, age[e])
        if rule is None:
            raise ValueError(f"no threshold for component {sg.onset_component!r} at age {age[e]}")
        if rule.measurement == PF_RATIO:
            if not rule.abnormal(ONSET_PAO2 / (ONSET_FIO2 / 100.0)):
                raise ValueError("onset P/F exemplar is not abnormal under the configured threshold")
            extra += [(e, "fio2", onset_s[e], ONSET_FIO2), (e, "pao2", onset_s[e], ONSET_PAO2)]
        else:
            v = ONSET_EXEMPLAR[rule.measurement]
            if not rule.abnormal(v):
                raise ValueError(f"onset exemplar {v} for {rule.measurement} is not abnormal")
            extra.append((e, rule.measurement, onset_s[e], v))
    extra = pd.DataFrame(extra, columns=["e", "feature", "sec", "value"])
    key = obs["e"].astype(str) + "|" + obs["feature"] + "|" + obs["sec"].astype(str)
    ekey = extra["e"].astype(str) + "|" + extra["feature"] + "|" + extra["sec"].astype(str)
    obs = pd.concat([obs[~key.isin(set(ekey))], extra], ignore_index=True)

    # derived measurements share the time stamps of their source
    m = obs[obs["feature"] == "map"]
    pp = np.clip(rng.normal(*PULSE_PRESSURE, len(m)), 15, 90)
    derived = [m.assign(feature="sbp", value=np.round(m["value"].to_numpy() + 2 * pp / 3, 0)),
               m.assign(feature="dbp", value=np.round(m["value"].to_numpy() - pp / 3, 0))]
    gcs = obs[obs["feature"] == "gcs"]
    for name, part in _split_gcs(gcs["value"].to_numpy()).items():
        derived.append(gcs.assign(feature=name, value=part.astype(float)))
    obs = pd.concat([obs] + derived, ignore_index=True)

    # P/F before onset: PaO2 high enough for the FiO2 in effect
    pf_rule_cache = {}
    obs = obs.sort_values(["e", "sec", "feature"], kind="stable").reset_index(drop=True)
    case_rows = np.flatnonzero(is_case[obs["e"].to_numpy()] & obs["feature"].isin(["fio2", "pao2"]).to_numpy())
    vcol = obs.columns.get_loc("value")
    last_e, fio2 = -1, 21.0
    for idx in case_rows:
        e = obs["e"].iat[idx]
        if e != last_e:
            last_e, fio2 = e, 21.0
        feat, sec = obs["feature"].iat[idx], obs["sec"].iat[idx]
        if feat == "fio2":
            fio2 = obs["value"].iat[idx]
            continue
        if sec >= onset_s[e]:
            continue
        if e not in pf_rule_cache:
            pf_rule_cache[e] = thresholds.rule_for("respiratory", age[e])
        rule = pf_rule_cache[e]
        if rule is None or rule.measurement != PF_RATIO:
            continue
        frac = fio2 / 100.0 if fio2 > 1.0 else fio2
        floor_ratio = _clamp_normal(rule, np.array([0.0]), 0)[0]
        need = math.ceil(floor_ratio * frac)
        if obs["value"].iat[idx] < need:
            obs.iat[idx, vcol] = float(need)

    # codes
    dx_rows, px_rows, med_rows = [], [], []
    for e in range(N):
        for c in rng.choice(FILLER_DX, size=rng.integers(0, 3), replace=False):
            dx_rows.append((e, 9, c))
        for c in rng.choice(FILLER_PX, size=rng.integers(0, 2), replace=False):
            px_rows.append((e, 9, c))
        if is_case[e]:
            sg = spec.subgroups[group[e] - 1]
            dx_rows.append((e, 9, _icd_format(_infection_code(rng))))
            if rng.random() < sg.mech_vent:
                px_rows.append((e, 9, _mech_vent_code(_VENT_POOL[rng.integers(len(_VENT_POOL))])))
            else:
                dx_rows.append((e, 9, _icd_format(_OD_POOL[rng.integers(len(_OD_POOL))])))
            med_rows.append((e, ANTIBIOTICS[rng.integers(3)], int(onset_s[e])))
            for drug in DEFAULT_VASOPRESSORS:
                p = sg.vasopressors.get(drug, 0.0)
                if p and rng.random() < p:
                    start = onset_s[e] + int(rng.random() * (los_s[e] - onset_s[e]))
                    med_rows.append((e, drug, start))
        else:
            u = rng.random()
            if u < spec.control_infection_only:
                dx_rows.append((e, 9, _icd_format(_infection_code(rng))))
                med_rows.append((e, ANTIBIOTICS[rng.integers(3)], int(rng.random() * los_s[e])))
            elif u < spec.control_infection_only + spec.control_od_only:
                dx_rows.append((e, 9, _icd_format(_OD_POOL[rng.integers(len(_OD_POOL))])))

    def stamp(e_idx, sec):
        return np.datetime_as_string(admit[e_idx] + np.asarray(sec, dtype=np.int64).astype("timedelta64[s]"),
                                     unit="s")

    order = np.argsort(ids, kind="stable")
    encounters = pd.DataFrame({
        "encounter_id": ids, "age_years": age, "admit_time": np.datetime_as_string(admit, unit="s"),
        "los_hours": los_s / 3600.0, "died": died.astype(int),
    }).iloc[order].reset_index(drop=True)
    obs_out = pd.DataFrame({
        "encounter_id": ids[obs["e"].to_numpy()], "feature": obs["feature"].to_numpy(),
        "time": stamp(obs["e"].to_numpy(), obs["sec"].to_numpy()), "value": obs["value"].to_numpy(),
    }).sort_values(["encounter_id", "time", "feature"], kind="stable").reset_index(drop=True)
    dx = pd.DataFrame(dx_rows, columns=["e", "icd_version", "code"])
    px = pd.DataFrame(px_rows, columns=["e", "icd_version", "code"])
    meds = pd.DataFrame(med_rows, columns=["e", "drug", "sec"])
    diagnoses = pd.DataFrame({"encounter_id": ids[dx["e"].to_numpy()], "icd_version": dx["icd_version"],
                              "code": dx["code"]}).sort_values("encounter_id", kind="stable")
    procedures = pd.DataFrame({"encounter_id": ids[px["e"].to_numpy()], "icd_version": px["icd_version"],
                               "code": px["code"]}).sort_values("encounter_id", kind="stable")
    meds_out = pd.DataFrame({"encounter_id": ids[meds["e"].to_numpy()], "drug": meds["drug"],
                             "time": stamp(meds["e"].to_numpy(), meds["sec"].to_numpy())}) \
        .sort_values(["encounter_id", "time"], kind="stable")
    truth = pd.DataFrame({
        "encounter_id": ids, "is_sepsis": is_case.astype(int), "subgroup": np.maximum(group, 0),
        "control_group": np.maximum(-group, 0),
        "onset_hour": np.where(is_case, onset_s / 3600.0, np.nan),
    }).iloc[order].reset_index(drop=True)
    logger.info("simulated %d encounters (%d cases; subgroup sizes %s)", N, n_cases, sizes.tolist())
    return Simulation(encounters, obs_out, diagnoses.reset_index(drop=True),
                      procedures.reset_index(drop=True), meds_out.reset_index(drop=True), truth, spec)
