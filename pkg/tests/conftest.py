import sys

import numpy as np
import pytest

from panelwald.estimator import SampleMoments
from panelwald.simulator import generate_data, get_scenario, rng_for


def population_moments(name, n=10_000):
    sc = get_scenario(name)
    return sc, SampleMoments(sc.sigma().sigma, n, sc.var_names)


def sampled_moments(name, n, seed=1, rep=0):
    sc = get_scenario(name)
    X = generate_data(sc.sigma(), n, rng_for(seed, rep))
    return sc, SampleMoments.from_data(X, sc.var_names)


@pytest.fixture(scope="session")
def baseline():
    return get_scenario("Baseline4w")


@pytest.fixture(scope="session")
def baseline_sample():
    return sampled_moments("Baseline4w", 10_000, seed=2024)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])
