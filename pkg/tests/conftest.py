import pytest

from psairl import roadnet as rn
from psairl.simcore import DynamicsConfig


@pytest.fixture
def dyn():
    return DynamicsConfig()


@pytest.fixture
def corridor2():
    net, plan = rn.gen_corridor(2, 200.0, 11.0, 30, 30)
    flow = rn.gen_flow(10, (0, 1), 6)
    return net, plan, flow




ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
