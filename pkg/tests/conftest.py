"""Shared fixtures.

The Monte Carlo campaigns are expensive, so they are computed once per session
and shared.  Replicate ``r`` always draws from stream ``(seed, r)``, so the
first 200 Model 1 replicates of the size campaign are exactly the recovery
campaign and the beta_1 = 1.6 point of the power grid; the Model 2 campaign
is the beta_1 = 2.2 grid point.
"""

from __future__ import annotations

import csv
from dataclasses import replace

import pytest

from binagree.data import LongDataset, pair_up

from binagree.simulation import MODEL_1, MODEL_2, DEFAULT_SPECS, beta_grid, run_replicates

N_SIZE = 300
N_RECOVERY = 200
N_POWER = 200

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def write_paired_csv(path, ds: LongDataset) -> None:
    """Write ``ds`` in the wide input layout (Positive/Negative labels)."""
    label = {1: "Positive", 0: "Negative"}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time", "method1", "method2", "rater1", "rater2"])
        for r in pair_up(ds):
            w.writerow([r.subject_id, f"{r.time:g}", label[r.outcome_m1], label[r.outcome_m2], r.rater_m1, r.rater_m2])


@pytest.fixture(scope="session")
def size_campaign():
    """Model 1, both models, 300 replicates."""
    return run_replicates(MODEL_1, N_SIZE, DEFAULT_SPECS)


@pytest.fixture(scope="session")
def model1_records(size_campaign):
    return size_campaign["with_rater"][:N_RECOVERY]


@pytest.fixture(scope="session")
def model2_records():
    return run_replicates(MODEL_2, N_RECOVERY, {"with_rater": DEFAULT_SPECS["with_rater"]})["with_rater"]


@pytest.fixture(scope="session")
def power_curve(model1_records, model2_records):
    """(beta_1, with-rater records) over the 1.6:0.1:2.8 grid."""
    spec = {"with_rater": DEFAULT_SPECS["with_rater"]}
    out = []
    for b1 in beta_grid():
        if b1 == MODEL_1.beta_1:
            recs = model1_records
        elif b1 == MODEL_2.beta_1:
            recs = model2_records
        else:
            recs = run_replicates(replace(MODEL_1, beta_1=b1), N_POWER, spec)["with_rater"]
        out.append((b1, recs))
    return out
