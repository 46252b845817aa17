import numpy as np
import pytest

from topoid.model import PredictorSchema, TopologyLabel, fit
from topoid.simgen import generate_dataset, reference_feeder


def random_spd(rng, n, cond=20.0):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = np.exp(rng.uniform(0.0, np.log(cond), n))
    return (q * eig) @ q.T


def labels(k):
    return [TopologyLabel(f"C{i + 1}", ()) for i in range(k)]


def schema(n):
    return PredictorSchema(tuple(f"U{i}.X" for i in range(n)))


@pytest.fixture(scope="session")
def feeder():
    return reference_feeder()


@pytest.fixture(scope="session")
def small_data(feeder):
    return generate_dataset(feeder, 200, seed=11)


@pytest.fixture(scope="session")
def small_model(small_data):
    train, _ = small_data
    return fit(train.values, train.labels, train.schema, classes=train.classes)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
