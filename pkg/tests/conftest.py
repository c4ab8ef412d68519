import csv
import os

import numpy as np
import pytest

from tapsync.model import sample_instance
from tapsync.scalar import scalar_constants


@pytest.fixture(scope="session")
def inst50():
    return sample_instance(50, 1.5, "GOE", seed=11)


@pytest.fixture(scope="session")
def inst500():
    return sample_instance(500, 1.5, "GOE", seed=7)


@pytest.fixture(scope="session")
def const15():
    return scalar_constants(1.5, k_max=200)


def interior(rng, n, bound=0.9):
    return rng.uniform(-bound, bound, size=n)


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


# Full-scale experiment runs (n=500, 10 replicates, master seed 0), shared by the
# experiment examples and the acceptance criteria.

def _run(tmp_path_factory, name, **kw):
    from tapsync.experiments import ExperimentConfig, run_experiment

    out = tmp_path_factory.mktemp(name)
    cfg = ExperimentConfig(name, output_dir=str(out), workers=os.cpu_count() or 1, **kw)
    return out, run_experiment(cfg)


@pytest.fixture(scope="session")
def convergence_run(tmp_path_factory):
    return _run(tmp_path_factory, "convergence")


@pytest.fixture(scope="session")
def universality_run(tmp_path_factory):
    return _run(tmp_path_factory, "universality", lambdas=[1.05, 1.5])


@pytest.fixture(scope="session")
def tap_vs_vb_run(tmp_path_factory):
    return _run(tmp_path_factory, "tap_vs_vb", lambdas=[1.2, 2.0])


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# One PASS/FAIL line per acceptance criterion, printed after the test session.

def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def criterion(request):
    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
