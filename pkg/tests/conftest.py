import logging
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from sepsis_lpa.cohort import load_cohort_dir


def write_fileset(directory: Path, encounters, observations=(), diagnoses=(), procedures=(), meds=()):
    """Write the five cohort CSVs from lists of row tuples."""
    directory.mkdir(parents=True, exist_ok=True)
    specs = {
        "encounters": (["encounter_id", "age_years", "admit_time", "los_hours", "died"], encounters),
        "observations": (["encounter_id", "feature", "time", "value"], observations),
        "diagnoses": (["encounter_id", "icd_version", "code"], diagnoses),
        "procedures": (["encounter_id", "icd_version", "code"], procedures),
        "meds": (["encounter_id", "drug", "time"], meds),
    }
    for name, (cols, rows) in specs.items():
        pd.DataFrame(list(rows), columns=cols).to_csv(directory / f"{name}.csv", index=False)
    return directory


@pytest.fixture
def fileset(tmp_path):
    def make(**kw):
        return write_fileset(tmp_path / "cohort", **kw)
    return make


@pytest.fixture
def toy_cohort(fileset):
    d = fileset(
        encounters=[("a", 9.0, "2015-01-01T00:00:00", 48.0, 0), ("b", 3.0, "2015-01-02T00:00:00", 30.0, 1)],
        observations=[("a", "hr", 2.0, 110.0), ("a", "hr", 10.0, 130.0), ("b", "hr", 1.0, 150.0),
                      ("b", "platelet", 5.0, 40.0), ("b", "gcs", 4.0, 12.0)],
        diagnoses=[("b", 9, "038.9"), ("b", 9, "287.5"), ("a", 9, "401.9")],
    )
    return load_cohort_dir(d)


@pytest.fixture(scope="session")
def small_sim(tmp_path_factory):
    """A small simulated cohort written to disk (shared, read-only)."""
    from sepsis_lpa.simulate import SimSpec, simulate_cohort
    sim = simulate_cohort(SimSpec(n_controls=900, n_cases=60, seed=11))
    d = tmp_path_factory.mktemp("sim")
    sim.write(d)
    return sim, d


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.INFO)


def rng(seed=0):
    return np.random.default_rng(seed)


# A desk-scale pipeline configuration: two windows, a reduced mixture grid and small learner grids.
SMALL_CONFIG = {
    "windows": ["24h", "whole_LOS"],
    "lpa": {"G_range": [1, 3], "families": ["EII", "VEI", "VVI", "EEE"], "restarts": 2, "max_iter": 200},
    "learners": {"kinds": ["gbm", "rf"], "folds": 3,
                 "gbm_grid": {"n_trees": [20, 50], "interaction_depth": [2], "learning_rate": [0.1],
                              "min_node_obs": [10]},
                 "rf_grid": {"n_trees": [30]}},
    "evaluation": {"B": 200},
}


def small_config(input_dir, **extra):
    from sepsis_lpa.config import PipelineConfig, _merge
    raw = _merge(SMALL_CONFIG, {"input": {"dir": str(input_dir)}})
    return PipelineConfig.from_dict(_merge(raw, extra))


@pytest.fixture(scope="session")
def pipeline_run(small_sim, tmp_path_factory):
    """One complete pipeline run on the small simulated cohort (shared, read-only)."""
    from sepsis_lpa.pipeline import run_pipeline
    _, d = small_sim
    cfg = small_config(d)
    out = run_pipeline(cfg, out=tmp_path_factory.mktemp("run") / "out")
    return cfg, out


# acceptance results, one line per criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
