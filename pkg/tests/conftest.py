import numpy as np
import pytest

from cranlink.channel import ChannelParams, NetworkLayout

_ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    _ACCEPTANCE_LINES.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def params():
    return ChannelParams()


def make_layout(rrh, devices=(), scatterers=(), blockers=(), radii=None, orient=None, side=1000.0):
    rrh = np.asarray(rrh, dtype=float).reshape(-1, 2)
    blockers = np.asarray(blockers, dtype=float).reshape(-1, 2)
    return NetworkLayout(
        rrh,
        np.zeros(len(rrh)) if orient is None else np.asarray(orient, dtype=float),
        np.asarray(devices, dtype=float).reshape(-1, 2),
        np.asarray(scatterers, dtype=float).reshape(-1, 2),
        blockers,
        np.full(len(blockers), 2.0) if radii is None else np.asarray(radii, dtype=float),
        side,
    )
