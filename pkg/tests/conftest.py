import numpy as np
import pytest

from pgcn.model import PgcnConfig, init_params
from pgcn.montage import build_static_graph, ring_montage

TOY = dict(n_channels=8, n_bands=3, order=3, dyn_dim_coarse=4, static_dim_coarse=4, dyn_dim_fine=6, static_dim_fine=6,
           n_coarse=3, n_fine=5)


def toy_config(**overrides) -> PgcnConfig:
    return PgcnConfig(**{**TOY, **overrides})


def ring_graph(n: int) -> np.ndarray:
    return build_static_graph(ring_montage(n), 1.1 * 2 * np.pi / n)


@pytest.fixture
def toy():
    config = toy_config()
    return config, init_params(config), ring_graph(config.n_channels)


# acceptance reporting: one line per criterion at the end of the run
ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def measured(request):
    """Dict the test fills with the numbers it checked; printed in the summary."""
    marker = request.node.get_closest_marker("criterion")
    entry = ACCEPTANCE.setdefault(marker.args[0], {"title": marker.args[1], "values": {}})
    return entry["values"]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    entry = ACCEPTANCE.setdefault(marker.args[0], {"title": marker.args[1], "values": {}})
    entry["passed"] = entry.get("passed", True) and report.passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[number]
        status = "PASS" if entry.get("passed") else "FAIL"
        values = ", ".join(f"{k}={v}" for k, v in entry["values"].items())
        terminalreporter.write_line(f"[{status}] {number:2d}. {entry['title']}" + (f" ({values})" if values else ""))
