import copy

import pytest

from saddlelmm.cli import select_runs
from saddlelmm.config import load_config
from saddlelmm.driver import find_sequence


def coarse_plan(preset, labels, resolution, method=None):
    cfg = load_config(preset)
    if method:
        cfg = cfg.with_method(method)
    cfg = copy.deepcopy(cfg)
    cfg.domain["resolution"] = resolution
    return select_runs(cfg, labels).plan()


@pytest.fixture(scope="session")
def nlse_coarse():
    """Converged NLSE u1, u2, u4 on a 33 x 33 grid, keyed by label."""
    recs = find_sequence(coarse_plan("nlse-table1", ["u2", "u4"], 33))
    out = {}
    for rec in recs:
        assert not isinstance(rec, Exception), rec
        out[rec.label] = rec
    return out


ACCEPTANCE_LINES: list = []


def report_criterion(name: str, ok: bool, detail: str = "") -> None:
    """Record one PASS/FAIL line; they are printed again at the end of the run."""
    line = f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
