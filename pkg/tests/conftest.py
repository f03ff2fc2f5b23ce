import numpy as np
import pytest

from multicomb.fluct import linearize, output_amplitudes, output_covariance
from multicomb.meanfield import steady_state
from multicomb.model import build_cavity, fig2_spec


@pytest.fixture(scope="session")
def fig2():
    spec = fig2_spec()
    model = build_cavity(spec)
    ss = steady_state(model)
    drift = linearize(model, ss)
    cov = output_covariance(drift)
    return dict(spec=spec, model=model, steady=ss, drift=drift, cov=cov,
                amps=output_amplitudes(model, ss))


@pytest.fixture(scope="session")
def fig2_linear():
    spec = fig2_spec(beta0=0.0)
    model = build_cavity(spec)
    ss = steady_state(model)
    return dict(spec=spec, model=model, steady=ss, drift=linearize(model, ss))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running reproduction runs")
    config.addinivalue_line("markers", "acceptance: exit criteria")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
