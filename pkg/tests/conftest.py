"""Shared, session-scoped artefacts: baseline data and the fitted mismatch models."""
from types import SimpleNamespace

import pytest

from lmpcc.config import RunConfig
from lmpcc.sim import generate_training_runs
from lmpcc.stp import build_training_set, fit_all

M_MAX = 150


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    cfg = RunConfig()
    train, test = generate_training_runs(cfg, out)
    ds = build_training_set(train, M_MAX)
    floors = cfg.plant.noise_floors()
    models = {kind: fit_all(ds, kind, seed=cfg.seed, noise_floors=floors) for kind in ("stp", "gp")}
    return SimpleNamespace(cfg=cfg, out=out, train=train, test=test, dataset=ds, models=models)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
