"""Pipeline configuration: YAML loading, validation and a stable content hash."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .cohort import WINDOWS
from .learners.tuning import FITTERS
from .lpa import FAMILY_CODES
from .transforms import KINDS as TRANSFORM_KINDS

logger = logging.getLogger(__name__)

PREDICTIVE_WINDOWS = tuple(w for w in WINDOWS if w != "post_onset")
THRESHOLD_POLICIES = ("youden", "fixed")
INPUT_FILES = ("encounters", "observations", "diagnoses", "procedures", "meds")


class ConfigError(ValueError):
    """Invalid configuration; raised before any stage runs."""


def default_config_path() -> Path:
    return Path(str(resources.files("sepsis_lpa") / "data" / "pipeline.yaml"))


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _check_grid(name: str, grid, allowed: set) -> None:
    _require(isinstance(grid, dict) and grid, f"learners.{name} must be a nonempty mapping")
    for k, vals in grid.items():
        _require(k in allowed, f"learners.{name}: unknown hyperparameter {k!r}")
        _require(isinstance(vals, list) and vals, f"learners.{name}.{k} must be a nonempty list")


@dataclass
class PipelineConfig:
    raw: dict                              # fully merged settings
    base_dir: Path = field(default_factory=Path.cwd)

    # ----------------------------------------------------------------- loading
    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "PipelineConfig":
        """Read ``path`` (YAML) on top of the bundled defaults and validate."""
        defaults = yaml.safe_load(default_config_path().read_text())
        user, base = {}, Path.cwd()
        if path is not None:
            p = Path(path)
            try:
                user = yaml.safe_load(p.read_text()) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {p}: {exc}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"config {p} is not valid YAML: {exc}") from exc
            _require(isinstance(user, dict), "config root must be a mapping")
            base = p.resolve().parent
        raw = _merge(defaults, user)
        if overrides:
            raw = _merge(raw, overrides)
        cfg = cls(raw, base)
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, raw: dict, base_dir=None) -> "PipelineConfig":
        defaults = yaml.safe_load(default_config_path().read_text())
        cfg = cls(_merge(defaults, raw), Path(base_dir) if base_dir else Path.cwd())
        cfg.validate()
        return cfg

    # -------------------------------------------------------------- validation
    def validate(self) -> None:
        r = self.raw
        _require(isinstance(r.get("seed"), int) and r["seed"] >= 0, "seed must be a nonnegative integer")
        windows = r.get("windows")
        _require(isinstance(windows, list) and len(windows) > 0, "windows must be a nonempty list")
        for w in windows:
            _require(w in PREDICTIVE_WINDOWS, f"unknown window {w!r}; expected one of {PREDICTIVE_WINDOWS}")
        _require(len(set(windows)) == len(windows), "windows contains duplicates")
        for key in ("lpa", "predictive"):
            spec = r.get("features", {}).get(key)
            names = spec.get("names") if isinstance(spec, dict) else spec
            _require(isinstance(names, list) and names, f"features.{key} must list feature names")
            _require(len(set(names)) == len(names), f"features.{key} has duplicate names")
        lpa = r["lpa"]
        g = lpa.get("G_range")
        _require(isinstance(g, list) and len(g) == 2 and all(isinstance(v, int) for v in g)
                 and 1 <= g[0] <= g[1], "lpa.G_range must be [lo, hi] with 1 <= lo <= hi")
        fams = lpa.get("families")
        _require(isinstance(fams, list) and fams, "lpa.families must be a nonempty list")
        for f in fams:
            _require(f in FAMILY_CODES, f"unknown covariance family {f!r}")
        _require(float(lpa["tol"]) > 0, "lpa.tol must be positive")
        _require(int(lpa["max_iter"]) >= 1 and int(lpa["restarts"]) >= 1,
                 "lpa.max_iter and lpa.restarts must be at least 1")
        for feat, kind in (lpa.get("transforms") or {}).items():
            _require(kind in TRANSFORM_KINDS, f"lpa.transforms.{feat}: unknown transform {kind!r}")
        lr = r["learners"]
        kinds = lr.get("kinds")
        _require(isinstance(kinds, list) and kinds and all(k in FITTERS for k in kinds),
                 f"learners.kinds must be a nonempty subset of {sorted(FITTERS)}")
        _require(int(lr["folds"]) >= 2, "learners.folds must be at least 2")
        _require(0.0 < float(lr["test_frac"]) < 1.0, "learners.test_frac must lie in (0, 1)")
        _require(int(lr["min_profile_cases"]) >= 2, "learners.min_profile_cases must be at least 2")
        _check_grid("gbm_grid", lr["gbm_grid"], {"n_trees", "interaction_depth", "learning_rate", "min_node_obs"})
        _check_grid("rf_grid", lr["rf_grid"], {"n_trees", "mtry", "min_node_obs", "bootstrap"})
        for lr_ in lr["gbm_grid"].get("learning_rate", []):
            _require(0.0 < float(lr_) <= 1.0, "learning_rate values must lie in (0, 1]")
        sm = lr.get("smote")
        _require(sm is None or (isinstance(sm, dict) and int(sm.get("k_neighbors", 5)) >= 1),
                 "learners.smote must be null or a mapping with k_neighbors >= 1")
        ev = r["evaluation"]
        _require(int(ev["B"]) >= 100, "evaluation.B must be at least 100")
        _require(0.0 < float(ev["alpha"]) < 1.0, "evaluation.alpha must lie in (0, 1)")
        _require(ev["threshold_policy"] in THRESHOLD_POLICIES,
                 f"evaluation.threshold_policy must be one of {THRESHOLD_POLICIES}")
        _require(0.0 <= float(ev["fixed_threshold"]) <= 1.0, "evaluation.fixed_threshold must lie in [0, 1]")

    # ---------------------------------------------------------------- accessors
    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def windows(self) -> list:
        return list(self.raw["windows"])

    @property
    def lpa_seed(self) -> int:
        s = self.raw["lpa"].get("seed")
        return self.seed if s is None else int(s)

    @property
    def G_range(self) -> tuple:
        lo, hi = self.raw["lpa"]["G_range"]
        return tuple(range(lo, hi + 1))

    def resolve(self, value) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def input_dir(self) -> Path | None:
        return self.resolve(self.raw.get("input", {}).get("dir"))

    def input_paths(self) -> dict:
        d = self.input_dir
        if d is None:
            raise ConfigError("no input directory configured (input.dir or --input)")
        return {k: d / f"{k}.csv" for k in INPUT_FILES}

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.raw["output"]["dir"])

    @property
    def hash(self) -> str:
        """sha256 over the canonical JSON of the analysis settings. The input location
        and the output section (directory, plot switch) are left out: the data itself
        is tracked by artifact hashes and plots do not change any analysis result."""
        payload = copy.deepcopy(self.raw)
        payload.pop("output", None)
        payload.get("input", {}).pop("dir", None)
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(text.encode()).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)
