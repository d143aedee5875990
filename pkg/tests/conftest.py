import numpy as np
import pytest

from incidentflow.network import StationGraph
from incidentflow.panel_io import DayMeta, ODPanel

# lines appended by the acceptance suite, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def make_meta(n_days, weekend=None, sunny=None):
    weekend = weekend if weekend is not None else [False] * n_days
    sunny = sunny if sunny is not None else [True] * n_days
    return tuple(DayMeta(d, bool(weekend[d]), bool(sunny[d]), f"2024-01-{d + 1:02d}") for d in range(n_days))


def make_panel(flows, weekend=None, sunny=None, pairs=None):
    flows = np.asarray(flows)
    n_od, n_days = flows.shape[:2]
    pairs = pairs or tuple((f"O{i}", f"D{i}") for i in range(n_od))
    return ODPanel(pairs, flows, make_meta(n_days, weekend, sunny))


@pytest.fixture
def path_graph():
    """A-B-C-D-E-F on one line."""
    return StationGraph.from_lines({"L1": list("ABCDEF")})
