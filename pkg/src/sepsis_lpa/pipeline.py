"""End-to-end orchestration: screen, features, LPA, profile report, train, evaluate.

Every stage reads its inputs from the output directory written by the stages
before it, so a single stage can be rerun on its own. ``manifest.json`` records
per-stage status and the sha256 of every artifact; it carries no timestamps, so
identical configurations give byte-identical bundles.
"""
from __future__ import annotations

import fcntl
import hashlib
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .cohort import (Cohort, CohortSchema, FeatureMatrix, FeatureSpec, extract_features, impute_median,
                     load_cohort)
from .config import ConfigError, PipelineConfig
from .evalstats import (EvalReport, UndefinedStatistic, bootstrap_metrics, delong_paired,
                        delong_unpaired)
from .learners import SmoteConfig, TrainedEnsemble, cv_tune, oversample, train_test_split, variable_importance
from .learners.tuning import FITTERS
from .lpa import SelectionFailed, assign_profiles, model_select, posterior
from .profiles import boxplot_data, describe_by_profile
from .screen import SofaThresholds, screen_cohort
from .transforms import fit_transform_spec

logger = logging.getLogger(__name__)

STAGES = ("screen", "features", "lpa", "profile-report", "train", "evaluate")
MANIFEST = "manifest.json"
LOCK = ".lock"
POOLED = "all"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def model_label(name: str) -> str:
    return "All profiles" if name == POOLED else f"Profile {name.split('_')[1]}"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return None if not np.isfinite(v) else float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _clean(obj):
    """Replace non-finite floats by None so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


# ------------------------------------------------------------------ workspace

class Workspace:
    """Output directory with an exclusive lock and a completeness manifest."""

    def __init__(self, root, config: PipelineConfig):
        self.root = Path(root)
        self.config = config
        self._written: list = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_text(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        p.write_text(text)
        self._written.append(rel)
        return p

    def write_csv(self, rel: str, df: pd.DataFrame, **kw) -> Path:
        p = self.path(rel)
        df.to_csv(p, index=False, lineterminator="\n", **kw)
        self._written.append(rel)
        return p

    def write_json(self, rel: str, obj) -> Path:
        return self.write_text(rel, _dump_json(_clean(obj)))

    def register(self, rel: str) -> None:
        self._written.append(rel)

    def require(self, rel: str, stage: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise StageError(stage, f"missing input {rel}; run the upstream stage first")
        return p

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        fh = open(self.root / LOCK, "w")
        try:
            try:
                fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError as exc:
                raise StageError("lock", f"output directory {self.root} is in use by another process") from exc
            yield self
        finally:
            fh.close()
            try:
                os.remove(self.root / LOCK)
            except FileNotFoundError:
                pass

    # manifest --------------------------------------------------------------
    def manifest(self) -> dict:
        p = self.root / MANIFEST
        if p.exists():
            return json.loads(p.read_text())
        return {}

    def _fresh_manifest(self) -> dict:
        return {"config_hash": self.config.hash, "seed": self.config.seed, "version": __version__,
                "stages": {s: {"status": "not_run", "artifacts": {}, "error": None} for s in STAGES},
                "complete": False}

    def check_config(self, stage: str) -> None:
        man = self.manifest()
        if man and man.get("config_hash") != self.config.hash:
            raise StageError(stage, "existing outputs were produced with a different configuration "
                                    f"(hash {man.get('config_hash', '?')[:12]}); run `all` or use a new --out")

    def begin(self, fresh: bool = False) -> None:
        man = self.manifest()
        if fresh or not man or man.get("config_hash") != self.config.hash:
            man = self._fresh_manifest()
        self._save(man)

    def record(self, stage: str, error: BaseException | None = None) -> None:
        man = self.manifest() or self._fresh_manifest()
        arts = {rel: _sha256(self.root / rel) for rel in sorted(set(self._written))
                if (self.root / rel).exists()}
        self._written = []
        prev = man["stages"][stage]
        man["stages"][stage] = {"status": "failed" if error else "complete", "artifacts": arts,
                                "error": None if error is None else str(error)}
        if error is not None or prev.get("artifacts") != arts:
            # downstream outputs were computed from the previous version of this stage
            for later in STAGES[STAGES.index(stage) + 1:]:
                if man["stages"][later]["status"] == "complete":
                    man["stages"][later]["status"] = "stale"
        man["complete"] = all(v["status"] == "complete" for v in man["stages"].values())
        self._save(man)

    def write_config(self) -> None:
        """Resolved configuration (minus the output location) next to the manifest."""
        p = self.root / "config.yaml"
        p.write_text(_bundle_config(self.config))
        man = self.manifest()
        man["config_sha256"] = _sha256(p)
        self._save(man)

    def _save(self, man: dict) -> None:
        (self.root / MANIFEST).write_text(_dump_json(man))


# ------------------------------------------------------------------ helpers

def _load_cohort(cfg: PipelineConfig) -> Cohort:
    paths = cfg.input_paths()
    for k, p in paths.items():
        if not p.exists():
            raise FileNotFoundError(f"input file {p} not found")
    return load_cohort(*(paths[k] for k in ("encounters", "observations", "diagnoses", "procedures", "meds")),
                       schema_config=cfg.resolve(cfg["schema"]))


def _thresholds(cfg: PipelineConfig) -> SofaThresholds:
    return SofaThresholds.from_csv(cfg.resolve(cfg["thresholds"]))


def _read_matrix(path: Path, window: str, aggregation=None) -> FeatureMatrix:
    df = pd.read_csv(path, dtype={"encounter_id": str})
    return FeatureMatrix.from_frame(df, window, aggregation)


def _read_screening(ws: Workspace, stage: str) -> pd.DataFrame:
    return pd.read_csv(ws.require("screen/screening.csv", stage), dtype={"encounter_id": str})


# ------------------------------------------------------------------ stages

def stage_screen(cfg: PipelineConfig, ws: Workspace) -> None:
    cohort = _load_cohort(cfg)
    screened = screen_cohort(cohort, _thresholds(cfg))
    ws.write_csv("screen/screening.csv", screened)
    ws.write_json("screen/load_report.json", {"config_hash": cfg.hash, "load_report": cohort.load_report,
                                              "n_encounters": len(cohort.encounters),
                                              "n_sepsis": int(screened["sepsis"].sum()),
                                              "n_without_onset": int((screened["sepsis"].astype(bool)
                                                                      & screened["onset_hour"].isna()).sum())})
    logger.info("screened %d encounters: %d sepsis cases", len(screened), int(screened["sepsis"].sum()))


def stage_features(cfg: PipelineConfig, ws: Workspace) -> None:
    cohort = _load_cohort(cfg)
    screened = _read_screening(ws, "features")
    cases = screened[screened["sepsis"].astype(bool) & screened["onset_hour"].notna()]
    if cases.empty:
        raise ValueError("no sepsis case with a detected onset; nothing to profile")
    onsets = dict(zip(cases["encounter_id"], cases["onset_hour"].astype(float)))
    lpa_spec = FeatureSpec.from_config(cfg["features"]["lpa"], cohort.schema)
    lpa_m = extract_features(cohort.subset(onsets), "post_onset", lpa_spec, onsets)
    ws.write_csv("features/lpa_post_onset.csv", lpa_m.to_frame())
    meta = {"config_hash": cfg.hash, "lpa": {"window": "post_onset", "aggregation": dict(zip(lpa_m.feature_names, lpa_m.aggregation))}}
    pred_spec = FeatureSpec.from_config(cfg["features"]["predictive"], cohort.schema)
    for w in cfg.windows:
        m = extract_features(cohort, w, pred_spec)
        ws.write_csv(f"features/predictive_{w}.csv", m.to_frame())
        meta[f"predictive_{w}"] = {"window": w, "aggregation": dict(zip(m.feature_names, m.aggregation))}
    # outcome and treatment flags for the profile table
    drugs = sorted(cohort.schema.vasopressors)
    rows = []
    for e in cohort.subset(onsets).encounters:
        used = {d for d, _ in e.vasopressor_events}
        rows.append(dict({"encounter_id": e.encounter_id, "died": int(e.died)},
                         **{d: int(d in used) for d in drugs}))
    ws.write_csv("features/case_outcomes.csv", pd.DataFrame(rows, columns=["encounter_id", "died"] + drugs))
    ws.write_json("features/meta.json", meta)


def stage_lpa(cfg: PipelineConfig, ws: Workspace) -> None:
    raw = _read_matrix(ws.require("features/lpa_post_onset.csv", "lpa"), "post_onset")
    imputed = impute_median(raw, drop_if_all_missing=raw.feature_names)
    X = imputed.values
    names = list(imputed.feature_names)
    sd = X.std(axis=0)
    constant = [n for n, s in zip(names, sd) if not s > 0]
    if constant:
        logger.warning("dropping constant LPA variables after imputation: %s", ", ".join(constant))
        keep = sd > 0
        X, names = X[:, keep], [n for n, k in zip(names, keep) if k]
    if not names:
        raise ValueError("no LPA variable varies across cases")
    lp = cfg["lpa"]
    spec = fit_transform_spec(X, names, kinds=lp.get("transforms") or {}, standardize=bool(lp["standardize"]))
    Z = spec.transform(X)
    try:
        grid, model = model_select(Z, cfg.G_range, lp["families"], tol=float(lp["tol"]),
                                   max_iter=int(lp["max_iter"]), restarts=int(lp["restarts"]),
                                   seed=cfg.lpa_seed)
    except SelectionFailed as exc:
        raise ValueError(str(exc)) from exc
    labels = assign_profiles(model, Z)
    post = posterior(model, Z)
    assign = pd.DataFrame({"encounter_id": list(raw.row_ids), "profile": labels})
    for g in range(model.G):
        assign[f"posterior_{g + 1}"] = post[:, g]
    ws.write_csv("lpa/grid.csv", grid.cells)
    ws.write_text("lpa/model.json", model.to_json() + "\n")
    ws.write_text("lpa/transform.json", spec.to_json() + "\n")
    ws.write_csv("lpa/assignments.csv", assign)
    ws.write_json("lpa/summary.json", {
        "config_hash": cfg.hash, "best_family": model.family, "best_G": model.G, "bic": model.bic(),
        "n_cases": int(Z.shape[0]), "variables": names, "dropped_constant": constant,
        "imputed_counts": imputed.notes.get("imputed_counts"),
        "profile_sizes": {str(g): int(np.sum(labels == g)) for g in range(1, model.G + 1)},
    })


def stage_profile_report(cfg: PipelineConfig, ws: Workspace) -> None:
    raw = _read_matrix(ws.require("features/lpa_post_onset.csv", "profile-report"), "post_onset")
    assign = pd.read_csv(ws.require("lpa/assignments.csv", "profile-report"), dtype={"encounter_id": str})
    outcomes = pd.read_csv(ws.require("features/case_outcomes.csv", "profile-report"),
                           dtype={"encounter_id": str}).set_index("encounter_id")
    if list(assign["encounter_id"]) != list(raw.row_ids):
        raise ValueError("profile assignments do not match the LPA feature matrix rows")
    labels = assign["profile"].to_numpy()
    outcomes = outcomes.loc[list(raw.row_ids)]
    categorical = {d.capitalize(): outcomes[d].to_numpy() for d in outcomes.columns if d != "died"}
    categorical["Death"] = outcomes["died"].to_numpy()
    schema = CohortSchema.load(cfg.resolve(cfg["schema"]))
    flabels = {n: f.label for n, f in schema.features.items() if getattr(f, "label", None)}
    summary = describe_by_profile(raw, labels, categorical=categorical, feature_labels=flabels, seed=cfg.seed)
    summary.metadata["config_hash"] = cfg.hash
    ws.write_csv("profiles/profile_summary.csv", summary.table)
    ws.write_text("profiles/profile_summary.json", summary.to_json() + "\n")
    ws.write_csv("profiles/boxplot.csv", boxplot_data(raw, labels))


# training ---------------------------------------------------------------------

@dataclass
class ModelFit:
    name: str
    kind: str
    params: dict
    cv_tables: dict                 # kind -> CVResult
    model: TrainedEnsemble
    threshold: float
    train_rows: np.ndarray
    test_rows: np.ndarray
    scores: np.ndarray              # on test_rows


@dataclass
class WindowFit:
    train_idx: np.ndarray
    test_idx: np.ndarray
    medians: np.ndarray
    fits: dict = field(default_factory=dict)   # name -> ModelFit
    skipped: dict = field(default_factory=dict)


def split_strata(profile: np.ndarray) -> np.ndarray:
    """Stratum per row for the train/test split: 0 for controls, the profile for
    cases; profiles with fewer than two cases are pooled into one stratum."""
    strata = profile.copy()
    vals, counts = np.unique(profile[profile > 0], return_counts=True)
    small = vals[counts < 2]
    if small.size:
        strata[np.isin(profile, small)] = -1
        if np.sum(strata == -1) < 2:
            # a single stray case joins the largest profile
            strata[strata == -1] = vals[np.argmax(counts)]
    return strata


def train_window(X, y, profile, learners: dict, seed: int = 0, feature_names=None,
                 models: str | list = "all") -> WindowFit:
    """Split, impute with training medians, then tune and fit the pooled model and
    one model per profile (all controls + that profile's cases).

    ``X`` may contain NaN for missing cells. ``profile`` is 0 for controls and
    1..G for cases. ``learners`` follows the ``learners`` config section.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    profile = np.asarray(profile).astype(int)
    if np.any((profile > 0) != (y == 1)):
        raise ValueError("profile must be positive exactly for cases")
    tr, te = train_test_split(y, float(learners["test_frac"]), strata=split_strata(profile), seed=seed)
    observed = ~np.isnan(X[tr])
    dead = np.flatnonzero(~observed.any(axis=0))
    if dead.size:
        raise ValueError(f"feature columns {dead.tolist()} have no observed training value")
    med = np.array([np.median(X[tr][observed[:, j], j]) for j in range(X.shape[1])])
    Xi = np.where(np.isnan(X), med[None, :], X)
    out = WindowFit(tr, te, med)
    sm = learners.get("smote")
    folds = int(learners["folds"])
    names = [POOLED] + [f"profile_{g}" for g in sorted(np.unique(profile[profile > 0]))]
    if models != "all":
        names = [n for n in names if n in models]
    for name in names:
        if name == POOLED:
            rows_tr, rows_te = tr, te
        else:
            g = int(name.split("_")[1])
            rows_tr = tr[(profile[tr] == 0) | (profile[tr] == g)]
            rows_te = te[(profile[te] == 0) | (profile[te] == g)]
        n_case = int(y[rows_tr].sum())
        if n_case < max(int(learners["min_profile_cases"]), folds) or y[rows_te].sum() == 0:
            out.skipped[name] = f"{n_case} training cases, {int(y[rows_te].sum())} test cases"
            logger.warning("no dedicated model for %s: %s", name, out.skipped[name])
            continue
        out.fits[name] = _fit_one(name, Xi, y, rows_tr, rows_te, learners, sm, folds, seed, feature_names)
    return out


def _fit_one(name, Xi, y, rows_tr, rows_te, learners, sm, folds, seed, feature_names) -> ModelFit:
    smote = None if sm is None else SmoteConfig(int(sm.get("k_neighbors", 5)), sm.get("amount"),
                                                float(sm.get("target_ratio", 0.5)), seed)
    cvs = {}
    for kind in learners["kinds"]:
        grid = learners["gbm_grid"] if kind == "gbm" else learners["rf_grid"]
        cvs[kind] = cv_tune(Xi[rows_tr], y[rows_tr], kind, grid, folds=folds, seed=seed, smote=smote)
    # first listed learner wins ties
    kind = max(learners["kinds"], key=lambda k: (cvs[k].best_auc, -learners["kinds"].index(k)))
    Xtr, ytr = Xi[rows_tr], y[rows_tr]
    if smote is not None:
        Xtr, ytr, _ = oversample(Xtr, ytr, smote)
    model = FITTERS[kind](Xtr, ytr, cvs[kind].best_params, seed=seed, feature_names=feature_names)
    scores = model.predict_proba(Xi[rows_te])
    logger.info("%s: %s chosen (CV AUC %.4f)", name, kind, cvs[kind].best_auc)
    return ModelFit(name, kind, dict(cvs[kind].best_params), cvs, model, cvs[kind].threshold,
                    rows_tr, rows_te, scores)


def stage_train(cfg: PipelineConfig, ws: Workspace) -> None:
    screened = _read_screening(ws, "train")
    assign = pd.read_csv(ws.require("lpa/assignments.csv", "train"), dtype={"encounter_id": str})
    prof = dict(zip(assign["encounter_id"], assign["profile"]))
    for w in cfg.windows:
        m = _read_matrix(ws.require(f"features/predictive_{w}.csv", "train"), w)
        scr = screened.set_index("encounter_id").loc[list(m.row_ids)]
        is_case = scr["sepsis"].astype(bool).to_numpy()
        profile = np.array([int(prof.get(e, -1)) if c else 0 for e, c in zip(m.row_ids, is_case)])
        keep = profile >= 0
        if not keep.all():
            logger.warning("%s: %d sepsis cases without a profile (no onset) are left out",
                           w, int((~keep).sum()))
        m = m.take_rows(np.flatnonzero(keep))
        profile = profile[keep]
        y = (profile > 0).astype(int)
        X = np.where(m.missing_mask, np.nan, m.values)
        fit = train_window(X, y, profile, cfg["learners"], seed=cfg.seed, feature_names=list(m.feature_names))
        ids = np.asarray(m.row_ids)
        part = np.full(len(ids), "train", dtype=object)
        part[fit.test_idx] = "test"
        ws.write_csv(f"train/{w}/split.csv", pd.DataFrame({"encounter_id": ids, "profile": profile,
                                                           "label": y, "part": part}))
        score_rows, summary = [], {"config_hash": cfg.hash, "window": w, "models": {},
                                   "skipped": fit.skipped,
                                   "medians": dict(zip(m.feature_names, fit.medians.tolist()))}
        for name, f in fit.fits.items():
            tables = []
            for kind, cv in f.cv_tables.items():
                t = cv.table.copy()
                t.insert(0, "learner", kind)
                tables.append(t)
            ws.write_csv(f"train/{w}/{name}_cv.csv", pd.concat(tables, ignore_index=True))
            ws.write_text(f"train/{w}/{name}_model.json", f.model.to_json() + "\n")
            variable_importance(f.model).to_csv(ws.path(f"train/{w}/{name}_importance.csv"))
            ws.register(f"train/{w}/{name}_importance.csv")
            score_rows.append(pd.DataFrame({"model": name, "encounter_id": ids[f.test_rows],
                                            "profile": profile[f.test_rows], "label": y[f.test_rows],
                                            "score": f.scores}))
            summary["models"][name] = {"learner": f.kind, "params": f.params, "threshold": f.threshold,
                                       "cv_auc": {k: cv.best_auc for k, cv in f.cv_tables.items()},
                                       "n_train_case": int(y[f.train_rows].sum()),
                                       "n_train_control": int((1 - y[f.train_rows]).sum()),
                                       "n_test_case": int(y[f.test_rows].sum()),
                                       "n_test_control": int((1 - y[f.test_rows]).sum())}
        ws.write_csv(f"train/{w}/scores.csv", pd.concat(score_rows, ignore_index=True))
        ws.write_json(f"train/{w}/summary.json", summary)


# evaluation -----------------------------------------------------------------

def compare_to_pooled(scores: pd.DataFrame, name: str) -> tuple:
    """Paired DeLong on the profile's test rows (both models score them) and
    unpaired DeLong against the pooled model's full test set."""
    mine = scores[scores["model"] == name]
    pooled = scores[scores["model"] == POOLED].set_index("encounter_id")
    common = pooled.loc[mine["encounter_id"]]
    paired = delong_paired(mine["score"].to_numpy(), common["score"].to_numpy(), mine["label"].to_numpy())
    unpaired = delong_unpaired(mine["score"].to_numpy(), mine["label"].to_numpy(),
                               pooled["score"].to_numpy(), pooled["label"].to_numpy())
    return paired, unpaired


def evaluate_scores(scores: pd.DataFrame, summary: dict, window: str, ev: dict, seed: int,
                    report: EvalReport) -> None:
    B, alpha = int(ev["B"]), float(ev["alpha"])
    for name in [n for n in [POOLED] + sorted(k for k in summary["models"] if k != POOLED)
                 if n in summary["models"]]:
        sub = scores[scores["model"] == name]
        s, lab = sub["score"].to_numpy(), sub["label"].to_numpy()
        info = summary["models"][name]
        thr = info["threshold"] if ev["threshold_policy"] == "youden" else float(ev["fixed_threshold"])
        metrics = bootstrap_metrics(s, lab, thr, B=B, alpha=alpha, seed=seed)
        label = model_label(name)
        n_case, n_ctrl = int(lab.sum()), int((1 - lab).sum())
        report.add_model(window, label, metrics, thr, n_case, n_ctrl, ev["threshold_policy"])
        if ev["threshold_policy"] == "youden":
            fixed = float(ev["fixed_threshold"])
            alt = bootstrap_metrics(s, lab, fixed, B=B, alpha=alpha, seed=seed)
            alt.pop("auc")
            report.add_model(window, label, alt, fixed, n_case, n_ctrl, "fixed")
        if name == POOLED or POOLED not in summary["models"]:
            continue
        try:
            paired, unpaired = compare_to_pooled(scores, name)
        except (ValueError, UndefinedStatistic) as exc:
            logger.warning("%s %s: comparison undefined (%s)", window, name, exc)
            continue
        report.add_comparison(window, label, model_label(POOLED), paired, "delong_paired")
        report.add_comparison(window, label, model_label(POOLED), unpaired, "delong_unpaired")


def stage_evaluate(cfg: PipelineConfig, ws: Workspace) -> None:
    ev = cfg["evaluation"]
    report = EvalReport(metadata={"config_hash": cfg.hash, "seed": cfg.seed, "B": int(ev["B"]),
                                  "alpha": float(ev["alpha"]), "threshold_policy": ev["threshold_policy"],
                                  "fixed_threshold": float(ev["fixed_threshold"]),
                                  "test_set_is_validation_set": True,
                                  "reference": model_label(POOLED)})
    for w in cfg.windows:
        scores = pd.read_csv(ws.require(f"train/{w}/scores.csv", "evaluate"), dtype={"encounter_id": str})
        summary = json.loads(ws.require(f"train/{w}/summary.json", "evaluate").read_text())
        evaluate_scores(scores, summary, w, ev, cfg.seed, report)
    ws.write_csv("evaluate/eval_report.csv", report.table(ev["threshold_policy"], "delong_paired"))
    ws.write_csv("evaluate/eval_report_unpaired.csv", report.table(ev["threshold_policy"], "delong_unpaired"))
    ws.write_csv("evaluate/metrics.csv", report.frame())
    ws.write_csv("evaluate/comparisons.csv", pd.DataFrame(report.comparisons))
    ws.write_text("evaluate/eval_report.json", report.to_json() + "\n")


def stage_plots(cfg: PipelineConfig, ws: Workspace) -> None:
    from .plots import bic_plot, profile_boxplot
    grid = pd.read_csv(ws.require("lpa/grid.csv", "plots"))
    bic_plot(grid, ws.path("plots/bic.svg"))
    ws.register("plots/bic.svg")
    box = pd.read_csv(ws.require("profiles/boxplot.csv", "profile-report"))
    profile_boxplot(box, ws.path("plots/profile_boxplots.svg"))
    ws.register("plots/profile_boxplots.svg")


STAGE_FUNCS = {
    "screen": stage_screen, "features": stage_features, "lpa": stage_lpa,
    "profile-report": stage_profile_report, "train": stage_train, "evaluate": stage_evaluate,
}


def run_stage(cfg: PipelineConfig, stage: str, out=None, plots: bool | None = None,
              fresh: bool = False) -> Path:
    """Run one stage under the directory lock and record it in the manifest."""
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}")
    ws = Workspace(out or cfg.output_dir, cfg)
    with ws.lock():
        if not fresh:
            ws.check_config(stage)
        ws.begin(fresh)
        ws.write_config()
        _run(cfg, ws, stage)
        if stage == "profile-report" and (cfg["output"]["plots"] if plots is None else plots):
            try:
                stage_plots(cfg, ws)
            except Exception as exc:
                ws.record(stage, exc)
                raise StageError("plots", exc) from exc
            ws.record(stage)
    return ws.root


def _run(cfg: PipelineConfig, ws: Workspace, stage: str) -> None:
    logger.info("stage %s", stage)
    try:
        STAGE_FUNCS[stage](cfg, ws)
    except StageError as exc:
        ws.record(stage, exc.cause)
        raise
    except Exception as exc:  # any failure halts the run with the stage name
        ws.record(stage, exc)
        raise StageError(stage, exc) from exc
    ws.record(stage)


def run_pipeline(cfg: PipelineConfig, out=None, plots: bool | None = None) -> Path:
    """Run every stage in order into a fresh manifest; returns the output directory."""
    ws = Workspace(out or cfg.output_dir, cfg)
    want_plots = cfg["output"]["plots"] if plots is None else plots
    with ws.lock():
        ws.begin(fresh=True)
        ws.write_config()
        for stage in STAGES:
            _run(cfg, ws, stage)
            if stage == "profile-report" and want_plots:
                try:
                    stage_plots(cfg, ws)
                except Exception as exc:
                    ws.record(stage, exc)
                    raise StageError("plots", exc) from exc
                ws.record(stage)
    return ws.root


def _bundle_config(cfg: PipelineConfig) -> str:
    import yaml
    raw = json.loads(json.dumps(cfg.raw, default=str))
    raw.get("output", {}).pop("dir", None)
    raw.get("input", {}).pop("dir", None)
    return "# resolved configuration; hash " + cfg.hash + "\n" + yaml.safe_dump(raw, sort_keys=True)
