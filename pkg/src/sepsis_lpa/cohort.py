"""Cohort loading, windowed feature extraction, missingness profiling and imputation.

Timestamps are held internally as hours since admission. Input files may carry
either numeric hours or absolute timestamps (converted against ``admit_time``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
import yaml

logger = logging.getLogger(__name__)

WINDOWS = ("6h", "12h", "24h", "whole_LOS", "post_onset")
WINDOW_HOURS = {"6h": 6.0, "12h": 12.0, "24h": 24.0}
AGGREGATIONS = ("median", "min", "max")
AGE_FEATURE = "age"

REQUIRED_COLUMNS = {
    "encounters": ("encounter_id", "age_years", "admit_time", "los_hours", "died"),
    "observations": ("encounter_id", "feature", "time", "value"),
    "diagnoses": ("encounter_id", "icd_version", "code"),
    "procedures": ("encounter_id", "icd_version", "code"),
    "meds": ("encounter_id", "drug", "time"),
}

DEFAULT_VASOPRESSORS = (
    "dopamine", "dobutamine", "epinephrine", "norepinephrine", "phenylephrine", "vasopressin",
)


class SchemaError(ValueError):
    """Input files or configuration do not follow the documented schema."""


@dataclass(frozen=True)
class FeatureDef:
    name: str
    label: str = ""
    unit: str = ""
    aggregation: str = "median"


@dataclass(frozen=True)
class CohortSchema:
    features: Mapping[str, FeatureDef]
    vasopressors: frozenset = frozenset(DEFAULT_VASOPRESSORS)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "CohortSchema":
        feats = {}
        for name, spec in (raw.get("features") or {}).items():
            spec = spec or {}
            agg = spec.get("aggregation", "median")
            if agg not in AGGREGATIONS:
                raise SchemaError(f"feature {name!r}: unknown aggregation {agg!r}")
            feats[name] = FeatureDef(name, spec.get("label", name), spec.get("unit", ""), agg)
        if AGE_FEATURE not in feats:
            feats[AGE_FEATURE] = FeatureDef(AGE_FEATURE, "Age, yrs.", "years")
        vaso = raw.get("vasopressors", DEFAULT_VASOPRESSORS)
        return cls(feats, frozenset(str(v).lower() for v in vaso))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "CohortSchema":
        if path is None:
            path = Path(__file__).parent / "data" / "features.yaml"
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


def normalize_code(code) -> str:
    """'287.5' -> '2875'. Codes are compared period-free and upper-case."""
    return str(code).strip().replace(".", "").upper()


@dataclass(frozen=True)
class Encounter:
    encounter_id: str
    age_years: float
    admit_time: pd.Timestamp | None
    los_hours: float
    observations: tuple = ()  # (feature, hour, value)
    diagnosis_codes: tuple = ()
    procedure_codes: tuple = ()
    vasopressor_events: tuple = ()  # (drug, hour)
    died: bool = False
    icd10_diagnosis_codes: tuple = ()
    icd10_procedure_codes: tuple = ()


@dataclass(frozen=True)
class Cohort:
    encounters: tuple
    schema: CohortSchema
    load_report: Mapping = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.encounters)

    @property
    def ids(self) -> tuple:
        return tuple(e.encounter_id for e in self.encounters)

    @cached_property
    def _index(self) -> dict:
        return {e.encounter_id: i for i, e in enumerate(self.encounters)}

    def get(self, encounter_id: str) -> Encounter:
        return self.encounters[self._index[encounter_id]]

    def subset(self, ids: Iterable[str]) -> "Cohort":
        keep = set(ids)
        return Cohort(tuple(e for e in self.encounters if e.encounter_id in keep), self.schema,
                      self.load_report)

    @cached_property
    def observation_frame(self) -> pd.DataFrame:
        rows, feats, times, vals = [], [], [], []
        for i, enc in enumerate(self.encounters):
            for feat, t, v in enc.observations:
                rows.append(i)
                feats.append(feat)
                times.append(t)
                vals.append(v)
        return pd.DataFrame({
            "row": np.asarray(rows, dtype=np.int64),
            "feature": pd.Series(feats, dtype=object),
            "time": np.asarray(times, dtype=float),
            "value": np.asarray(vals, dtype=float),
        })


# --------------------------------------------------------------------------- loading

def _read_csv(path: Path, kind: str) -> pd.DataFrame:
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in REQUIRED_COLUMNS[kind] if c not in df.columns]
    if missing:
        raise SchemaError(f"{path.name}: missing required column {missing[0]!r}")
    return df


def _skip(report: dict, kind: str, lines: Iterable[int], reason: str, level: int = logging.WARNING) -> None:
    lines = list(lines)
    if not lines:
        return
    report[kind]["dropped"] += len(lines)
    report[kind].setdefault("reasons", {})
    report[kind]["reasons"][reason] = report[kind]["reasons"].get(reason, 0) + len(lines)
    shown = ", ".join(str(n) for n in lines[:10])
    more = "" if len(lines) <= 10 else f" (+{len(lines) - 10} more)"
    logger.log(level, "%s: %d row(s) skipped (%s) at line(s) %s%s", kind, len(lines), reason, shown, more)


def _to_float(s: pd.Series) -> pd.Series:
    """Exact (round-trip) float parsing; unparseable entries become NaN.

    ``pd.to_numeric`` uses a fast parser that can be off by one ulp, which would
    break load/write/load round trips.
    """
    try:
        return s.astype(float)
    except ValueError:
        def conv(v):
            try:
                return float(v)
            except ValueError:
                return np.nan
        return s.map(conv).astype(float)


def _parse_bool(s: pd.Series) -> pd.Series:
    lut = {"1": True, "0": False, "true": True, "false": False, "yes": True, "no": False}
    return s.str.strip().str.lower().map(lut)


def _hours_since_admit(raw: pd.Series, admit: pd.Series) -> pd.Series:
    """Numeric entries are hours; anything else is parsed as a timestamp."""
    hours = _to_float(raw)
    need = hours.isna() & (raw.str.strip() != "")
    if need.any():
        ts = pd.to_datetime(raw[need], errors="coerce", format="ISO8601")
        delta = (ts - admit[need]).dt.total_seconds() / 3600.0
        hours.loc[need] = delta
    return hours


def hours_between(admit: pd.Timestamp, when: pd.Timestamp) -> float:
    return (when - admit).total_seconds() / 3600.0


def load_cohort(encounters_path, observations_path, diagnoses_path, procedures_path, meds_path,
                schema_config: CohortSchema | Mapping | str | Path | None = None) -> Cohort:
    """Read the five cohort CSVs into a :class:`Cohort` ordered by encounter_id.

    Rows that cannot be parsed are skipped and logged with their line number
    (header is line 1). Missing columns and duplicate encounter ids are fatal.
    """
    if isinstance(schema_config, CohortSchema):
        schema = schema_config
    elif isinstance(schema_config, Mapping):
        schema = CohortSchema.from_dict(schema_config)
    else:
        schema = CohortSchema.load(schema_config)

    paths = {
        "encounters": Path(encounters_path), "observations": Path(observations_path),
        "diagnoses": Path(diagnoses_path), "procedures": Path(procedures_path),
        "meds": Path(meds_path),
    }
    frames = {k: _read_csv(p, k) for k, p in paths.items()}
    report = {k: {"read": len(df), "dropped": 0} for k, df in frames.items()}

    enc = frames["encounters"]
    line = enc.index.to_series() + 2
    dup = enc["encounter_id"].duplicated(keep=False)
    if dup.any():
        first = enc.loc[dup, "encounter_id"].iloc[0]
        raise SchemaError(f"duplicate encounter_id {first!r} at lines "
                          f"{', '.join(map(str, line[dup & (enc['encounter_id'] == first)]))}")
    age = _to_float(enc["age_years"])
    los = _to_float(enc["los_hours"])
    admit = pd.to_datetime(enc["admit_time"], errors="coerce", format="ISO8601")
    died = _parse_bool(enc["died"])
    bad = age.isna() | (age < 0) | los.isna() | (los <= 0) | admit.isna() | died.isna() \
        | (enc["encounter_id"].str.strip() == "")
    _skip(report, "encounters", line[bad], "unparseable")
    enc = enc.assign(age=age, los=los, admit=admit, died_b=died)[~bad]
    if (enc["age"] > 18).any():
        logger.warning("%d encounter(s) older than 18 years; kept but outside the pediatric range",
                       int((enc["age"] > 18).sum()))
    known = set(enc["encounter_id"])
    admit_by_id = enc.set_index("encounter_id")["admit"]
    los_by_id = enc.set_index("encounter_id")["los"]

    def attach(kind: str) -> pd.DataFrame:
        df = frames[kind]
        ln = df.index.to_series() + 2
        orphan = ~df["encounter_id"].isin(known)
        _skip(report, kind, ln[orphan], "unknown encounter_id")
        return df[~orphan].assign(line=ln[~orphan])

    # observations
    obs = attach("observations")
    obs = obs.assign(feature=obs["feature"].str.strip())
    val = _to_float(obs["value"])
    hrs = _hours_since_admit(obs["time"], obs["encounter_id"].map(admit_by_id))
    bad = val.isna() | hrs.isna() | ~np.isfinite(val)
    _skip(report, "observations", obs["line"][bad], "unparseable")
    unknown = ~bad & ~obs["feature"].isin(schema.features.keys())
    _skip(report, "observations", obs["line"][unknown], "feature not in dictionary")
    out_win = ~bad & ~unknown & ((hrs < 0) | (hrs > obs["encounter_id"].map(los_by_id)))
    _skip(report, "observations", obs["line"][out_win], "outside [admit, discharge]")
    ok = ~(bad | unknown | out_win)
    obs = obs.assign(hours=hrs, val=val)[ok]

    # codes
    code_groups = {}
    for kind in ("diagnoses", "procedures"):
        df = attach(kind)
        ver = pd.to_numeric(df["icd_version"], errors="coerce")
        bad = ~ver.isin([9, 10]) | (df["code"].str.strip() == "")
        _skip(report, kind, df["line"][bad], "unparseable")
        df = df[~bad].assign(ver=ver[~bad].astype(int), norm=df["code"][~bad].map(normalize_code))
        code_groups[kind] = {
            v: df[df["ver"] == v].groupby("encounter_id")["norm"].agg(tuple).to_dict() for v in (9, 10)
        }

    # vasopressors
    meds = attach("meds")
    drug = meds["drug"].str.strip().str.lower()
    hrs = _hours_since_admit(meds["time"], meds["encounter_id"].map(admit_by_id))
    bad = hrs.isna()
    _skip(report, "meds", meds["line"][bad], "unparseable")
    other = ~bad & ~drug.isin(schema.vasopressors)
    _skip(report, "meds", meds["line"][other], "not a configured vasopressor", logging.INFO)
    out_win = ~bad & ~other & ((hrs < 0) | (hrs > meds["encounter_id"].map(los_by_id)))
    _skip(report, "meds", meds["line"][out_win], "outside [admit, discharge]")
    meds = meds.assign(drug=drug, hours=hrs)[~(bad | other | out_win)]

    obs_by = {k: tuple(zip(g["feature"], g["hours"].astype(float), g["val"].astype(float)))
              for k, g in obs.sort_values(["encounter_id", "hours", "feature"], kind="stable")
              .groupby("encounter_id", sort=False)}
    med_by = {k: tuple(zip(g["drug"], g["hours"].astype(float)))
              for k, g in meds.sort_values(["encounter_id", "hours", "drug"], kind="stable")
              .groupby("encounter_id", sort=False)}

    encounters = []
    for row in enc.sort_values("encounter_id", kind="stable").itertuples(index=False):
        eid = row.encounter_id
        encounters.append(Encounter(
            encounter_id=eid,
            age_years=float(row.age),
            admit_time=row.admit,
            los_hours=float(row.los),
            observations=obs_by.get(eid, ()),
            diagnosis_codes=code_groups["diagnoses"][9].get(eid, ()),
            procedure_codes=code_groups["procedures"][9].get(eid, ()),
            vasopressor_events=med_by.get(eid, ()),
            died=bool(row.died_b),
            icd10_diagnosis_codes=code_groups["diagnoses"][10].get(eid, ()),
            icd10_procedure_codes=code_groups["procedures"][10].get(eid, ()),
        ))
    for kind, r in report.items():
        logger.info("%s: %d rows read, %d dropped", kind, r["read"], r["dropped"])
    return Cohort(tuple(encounters), schema, report)


def load_cohort_dir(directory, schema_config=None) -> Cohort:
    d = Path(directory)
    return load_cohort(d / "encounters.csv", d / "observations.csv", d / "diagnoses.csv",
                       d / "procedures.csv", d / "meds.csv", schema_config)


def write_cohort(cohort: Cohort, directory) -> None:
    """Serialize a cohort to the five input CSVs (times as hours since admission)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    encs = cohort.encounters
    pd.DataFrame({
        "encounter_id": [e.encounter_id for e in encs],
        "age_years": [e.age_years for e in encs],
        "admit_time": [e.admit_time.isoformat() for e in encs],
        "los_hours": [e.los_hours for e in encs],
        "died": [int(e.died) for e in encs],
    }).to_csv(d / "encounters.csv", index=False)
    pd.DataFrame(
        [(e.encounter_id, f, t, v) for e in encs for f, t, v in e.observations],
        columns=["encounter_id", "feature", "time", "value"],
    ).to_csv(d / "observations.csv", index=False)
    for fname, nine, ten in (("diagnoses.csv", "diagnosis_codes", "icd10_diagnosis_codes"),
                             ("procedures.csv", "procedure_codes", "icd10_procedure_codes")):
        rows = [(e.encounter_id, 9, c) for e in encs for c in getattr(e, nine)]
        rows += [(e.encounter_id, 10, c) for e in encs for c in getattr(e, ten)]
        pd.DataFrame(rows, columns=["encounter_id", "icd_version", "code"]).to_csv(d / fname, index=False)
    pd.DataFrame(
        [(e.encounter_id, drug, t) for e in encs for drug, t in e.vasopressor_events],
        columns=["encounter_id", "drug", "time"],
    ).to_csv(d / "meds.csv", index=False)


# --------------------------------------------------------------------------- features

@dataclass(frozen=True)
class FeatureSpec:
    names: tuple
    aggregation: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def from_config(cls, raw, schema: CohortSchema | None = None) -> "FeatureSpec":
        if isinstance(raw, Mapping):
            names = tuple(raw["names"])
            overrides = dict(raw.get("aggregation") or {})
        else:
            names, overrides = tuple(raw), {}
        agg = {}
        for n in names:
            default = schema.features[n].aggregation if schema and n in schema.features else "median"
            agg[n] = overrides.get(n, default)
        return cls(names, agg)

    def stat(self, name: str) -> str:
        return self.aggregation.get(name, "median")


@dataclass(frozen=True)
class FeatureMatrix:
    """Rows are encounters, columns named features; masked slots hold NaN."""
    row_ids: tuple
    feature_names: tuple
    values: np.ndarray
    missing_mask: np.ndarray
    window: str
    aggregation: tuple
    notes: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.values.setflags(write=False)
        self.missing_mask.setflags(write=False)

    @property
    def shape(self):
        return self.values.shape

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.feature_names.index(name)]

    def take_rows(self, index) -> "FeatureMatrix":
        index = np.asarray(index)
        return replace(self, row_ids=tuple(np.asarray(self.row_ids, dtype=object)[index]),
                       values=self.values[index].copy(), missing_mask=self.missing_mask[index].copy())

    def select(self, names: Sequence[str]) -> "FeatureMatrix":
        cols = [self.feature_names.index(n) for n in names]
        return replace(self, feature_names=tuple(names), values=self.values[:, cols].copy(),
                       missing_mask=self.missing_mask[:, cols].copy(),
                       aggregation=tuple(self.aggregation[c] for c in cols))

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(np.where(self.missing_mask, np.nan, self.values),
                          columns=list(self.feature_names))
        df.insert(0, "encounter_id", list(self.row_ids))
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame, window: str, aggregation=None) -> "FeatureMatrix":
        names = tuple(c for c in df.columns if c != "encounter_id")
        vals = df[list(names)].to_numpy(dtype=float)
        agg = tuple(aggregation) if aggregation is not None else ("median",) * len(names)
        return cls(tuple(df["encounter_id"].astype(str)), names, vals, np.isnan(vals), window, agg)


def extract_features(cohort: Cohort, window: str, feature_spec: FeatureSpec,
                     onsets: Mapping[str, float] | None = None) -> FeatureMatrix:
    """Aggregate in-window observations per encounter and feature.

    Fixed windows cover [0, H] hours after admission; ``post_onset`` covers
    [onset, LOS] and needs ``onsets``. Exact-duplicate timestamps of a feature
    are averaged before aggregation.
    """
    if window not in WINDOWS:
        raise ValueError(f"unknown window {window!r}; expected one of {WINDOWS}")
    unknown = [n for n in feature_spec.names if n not in cohort.schema.features]
    if unknown:
        raise SchemaError(f"feature spec names unknown feature {unknown[0]!r}")
    for n in feature_spec.names:
        if feature_spec.stat(n) not in AGGREGATIONS:
            raise SchemaError(f"feature {n!r}: unknown aggregation {feature_spec.stat(n)!r}")
    if window == "post_onset" and onsets is None:
        raise ValueError("post_onset window needs onset hours")

    n, names = len(cohort), feature_spec.names
    values = np.full((n, len(names)), np.nan)
    obs = cohort.observation_frame
    obs = obs[obs["feature"].isin(names)]
    if window in WINDOW_HOURS:
        obs = obs[obs["time"] <= WINDOW_HOURS[window]]
    elif window == "post_onset":
        start = np.array([onsets.get(e.encounter_id, np.nan) for e in cohort.encounters], dtype=float)
        no_onset = int(np.isnan(start).sum())
        if no_onset:
            logger.warning("post_onset: %d encounter(s) without onset; rows fully masked", no_onset)
        obs = obs[obs["time"].to_numpy() >= start[obs["row"].to_numpy()]]

    dedup = obs.groupby(["row", "feature", "time"], sort=False)["value"].mean().reset_index()
    n_dupes = len(obs) - len(dedup)
    col_of = {name: j for j, name in enumerate(names)}
    if len(dedup):
        for stat in AGGREGATIONS:
            feats = [f for f in names if feature_spec.stat(f) == stat and f != AGE_FEATURE]
            part = dedup[dedup["feature"].isin(feats)]
            if part.empty:
                continue
            agg = part.groupby(["row", "feature"], sort=False)["value"].agg(stat)
            rows = agg.index.get_level_values(0).to_numpy()
            cols = np.array([col_of[f] for f in agg.index.get_level_values(1)])
            values[rows, cols] = agg.to_numpy()
    if AGE_FEATURE in col_of:
        values[:, col_of[AGE_FEATURE]] = [e.age_years for e in cohort.encounters]

    mask = np.isnan(values)
    empty = [names[j] for j in range(len(names)) if n and mask[:, j].all()]
    for name in empty:
        logger.warning("window %s: feature %r has no observations in any encounter", window, name)
    notes = {"duplicate_timestamps_averaged": int(n_dupes), "fully_masked": empty}
    if n_dupes:
        logger.info("window %s: %d same-timestamp duplicate observation(s) averaged", window, n_dupes)
    return FeatureMatrix(cohort.ids, tuple(names), values, mask, window,
                         tuple(feature_spec.stat(f) for f in names), notes)


# --------------------------------------------------------------------------- profiling / imputation

def missingness_profile(matrix: FeatureMatrix, labels: Mapping[str, str] | None = None) -> pd.DataFrame:
    """Per-feature %missing and summary statistics over unmasked cells."""
    n = matrix.values.shape[0]
    if n == 0:
        raise ValueError("missingness_profile needs a nonempty matrix")
    rows = []
    for j, name in enumerate(matrix.feature_names):
        obs = matrix.values[~matrix.missing_mask[:, j], j]
        row = {"variable": (labels or {}).get(name, name),
               "pct_missing": round(100.0 * (n - obs.size) / n, 1)}
        if obs.size:
            row.update(mean=float(obs.mean()),
                       sd=float(obs.std(ddof=1)) if obs.size > 1 else np.nan,
                       min=float(obs.min()), median=float(np.median(obs)), max=float(obs.max()))
        else:
            row.update(mean=np.nan, sd=np.nan, min=np.nan, median=np.nan, max=np.nan)
        rows.append(row)
    return pd.DataFrame(rows, columns=["variable", "pct_missing", "mean", "sd", "min", "median", "max"])


def format_profile_row(row: Mapping, digits: int = 1, undefined: str = "NA") -> str:
    """Render one profile row as in a printed table: ``Age, yrs. 0.0 10.3 7.2 ...``."""
    parts = [str(row["variable"]), f"{row['pct_missing']:.1f}"]
    for key in ("mean", "sd", "min", "median", "max"):
        v = row[key]
        parts.append(undefined if v is None or not np.isfinite(v) else f"{v:.{digits}f}")
    return " ".join(parts)


def column_medians(matrix: FeatureMatrix) -> np.ndarray:
    """Median of the unmasked cells of each column (NaN when fully masked)."""
    out = np.full(matrix.values.shape[1], np.nan)
    for j in range(out.size):
        obs = matrix.values[~matrix.missing_mask[:, j], j]
        if obs.size:
            out[j] = np.median(obs)
    return out


def impute_median(matrix: FeatureMatrix, medians_source="self",
                  drop_if_all_missing: Iterable[str] = ()) -> FeatureMatrix:
    """Replace masked cells by column medians, computed on ``matrix`` itself
    ("self") or taken from a precomputed vector (e.g. training-fold medians).

    The result carries ``notes['imputed_counts']`` and ``notes['medians']``.
    """
    droppable = set(drop_if_all_missing)
    if isinstance(medians_source, str):
        if medians_source != "self":
            raise ValueError("medians_source must be 'self' or a median vector")
        medians = column_medians(matrix)
        dead = [n for j, n in enumerate(matrix.feature_names) if np.isnan(medians[j])]
        fatal = [n for n in dead if n not in droppable]
        if fatal:
            raise ValueError(f"cannot impute fully missing column {fatal[0]!r} "
                             "(list it in drop_if_all_missing to drop it)")
        if dead:
            logger.warning("dropping fully missing column(s): %s", ", ".join(dead))
            keep = [n for n in matrix.feature_names if n not in dead]
            matrix = matrix.select(keep)
            medians = column_medians(matrix)
    else:
        medians = np.asarray(medians_source, dtype=float)
        if medians.shape != (matrix.values.shape[1],):
            raise ValueError("median vector length does not match the matrix columns")
        if np.isnan(medians).any():
            j = int(np.flatnonzero(np.isnan(medians))[0])
            raise ValueError(f"no median available for column {matrix.feature_names[j]!r}")

    counts = {n: int(matrix.missing_mask[:, j].sum()) for j, n in enumerate(matrix.feature_names)}
    notes = dict(matrix.notes)
    notes["imputed_counts"] = counts
    notes["medians"] = [float(m) for m in medians]
    if not matrix.missing_mask.any():
        return replace(matrix, values=matrix.values.copy(), missing_mask=matrix.missing_mask.copy(),
                       notes=notes)
    values = np.where(matrix.missing_mask, medians[None, :], matrix.values)
    return replace(matrix, values=values, missing_mask=np.zeros_like(matrix.missing_mask), notes=notes)
