import pytest
import torch

from partseg.backbone import ToyBackbone

CRITERIA = {
    1: "attention normalization",
    2: "WAS mass conservation",
    3: "oracle equivalence",
    4: "gradient check",
    5: "end-to-end toy overfit",
    6: "frozen-state guarantees",
    7: "data-prep fixtures",
    8: "reproducibility",
    9: "SD 2.1 table reproduction (hardware-gated)",
}
_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): test backing acceptance criterion n")


def pytest_runtest_logreport(report):
    ids = [v for k, v in report.user_properties if k == "acceptance"]
    if not ids:
        return
    n = ids[0]
    if report.skipped:
        _outcomes.setdefault(n, "SKIP")
    elif report.when == "call" or report.failed:
        prev = _outcomes.get(n)
        state = "PASS" if report.passed else "FAIL"
        _outcomes[n] = "FAIL" if "FAIL" in (prev, state) else state


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            item.user_properties.append(("acceptance", int(m.args[0])))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n in _outcomes:
            terminalreporter.write_line(f"criterion {n} ({CRITERIA[n]}): {_outcomes[n]}")


@pytest.fixture(scope="session")
def toy():
    return ToyBackbone(seed=0)


@pytest.fixture(scope="session")
def toy64():
    return ToyBackbone(seed=0, dtype=torch.float64)
