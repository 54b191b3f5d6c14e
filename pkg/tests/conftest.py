import numpy as np
import pytest

from otgcd.benchmarks import ablation_overrides, reference_config, reference_spec
from otgcd.data import generate
from otgcd.metrics import class_count_report
from otgcd.trainer import initialize_state, predict_unlabeled, train


class ReferenceRuns:
    """Memoized reference-benchmark runs shared by every test in the session."""

    def __init__(self):
        self._runs = {}

    def get(self, variant="full", rho=5.0, seed=0):
        key = (variant, float(rho), seed)
        if key not in self._runs:
            ds = generate(reference_spec(seed, rho=rho))
            cfg = reference_config(seed, **ablation_overrides(variant))
            result = train(ds, cfg)
            init = initialize_state(ds, cfg)
            init_counts = class_count_report(predict_unlabeled(init, ds, cfg), ds.num_classes)
            self._runs[key] = (ds, cfg, result, init_counts)
        return self._runs[key]


@pytest.fixture(scope="session")
def reference_runs():
    return ReferenceRuns()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_results():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
