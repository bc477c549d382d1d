from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pensionkit.config import load_config, loads
from pensionkit.population import Population

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BASE_TEXT = """\
seed = 11
n_workers = 2000
earnings_law.log_mean = 0.0
earnings_law.log_sd = 0.6
consumption_link.c1_intercept = -0.1
consumption_link.c1_slope = 0.85
consumption_link.c1_noise_sd = 0.15
consumption_link.drop_intercept = 0.3
consumption_link.drop_slope = -0.08
consumption_link.drop_noise_sd = 0.05
behavioral.eps_net_of_tax = 0.38
behavioral.eps_link = 0.22
behavioral.eps_benefit = 0.11
behavioral.mpc = 0.79
behavioral.gamma = 4
behavioral.theta = 0.62
behavioral.beta = 0.82
policy.kappa = 0.10
policy.phi = 0.3
policy.E_bar = 0.01
"""


def make_config(extra: str = ""):
    """Linear-rule scenario; ``extra`` lines override or add keys."""
    lines = {}
    for line in (BASE_TEXT + extra).splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            lines[k] = v
    return loads("".join(f"{k} = {v}\n" for k, v in lines.items()))


@pytest.fixture(scope="session")
def example_cfg():
    return load_config(CONFIGS / "example.cfg")


@pytest.fixture(scope="session")
def linear_cfg():
    return make_config()


def random_population(rng: np.random.Generator, n: int, recipients: bool = False) -> Population:
    z = np.exp(rng.normal(0.0, 0.5, n))
    c1 = 0.8 * z ** 0.8 * np.exp(rng.normal(0.0, 0.1, n))
    c2 = c1 * np.exp(-(0.3 - 0.08 * np.log(z)) + rng.normal(0.0, 0.05, n))
    rec = rng.random(n) < 0.4 if recipients else np.zeros(n, bool)
    return Population.from_arrays(z, c1, c2, rec)


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not report.failed:
        return
    number, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    status = "PASS" if report.passed else "FAIL"
    if _CRITERIA.get(number, ("PASS",))[0] != "FAIL":
        _CRITERIA[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
