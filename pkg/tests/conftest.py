import numpy as np
import pytest

from rvcdet.fdv import compute_grid

CRITERIA = {
    1: "scatter ops match a per-bucket loop oracle",
    2: "voxelizer is lossless and matches a hard voxelizer",
    3: "voxelize+features time scales linearly",
    4: "finite-difference gradient checks for the classifier zoo",
    5: "classifier parameter counts match the layer plan",
    6: "sub-head refinement beats raw and filter baselines",
    7: "MLP-2 at 9x9 beats MLP-1 at 1x1 by 2 points",
    8: "rotated IoU matches a Monte-Carlo oracle",
    9: "bit-identical outputs across runs and RVC_THREADS",
}
OUT_OF_SCOPE = {10: "Waymo/KITTI mAP tables need a trained full detector"}

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test checks")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or report.outcome != "passed":
        ok = report.outcome == "passed"
        _results.setdefault(crit, []).append(ok)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, desc in CRITERIA.items():
        if n not in _results:
            tr.write_line(f"criterion {n}: NOT RUN  {desc}")
        else:
            status = "PASS" if all(_results[n]) else "FAIL"
            tr.write_line(f"criterion {n}: {status}  {desc}")
    for n, why in OUT_OF_SCOPE.items():
        tr.write_line(f"criterion {n}: n/a  {why}")


# -- shared fixtures ---------------------------------------------------------

@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_grid():
    """[0,1]^2 pillars of 0.5 m, z in [0,1)."""
    return compute_grid(((0, 1), (0, 1), (0, 1)), (0.5, 0.5))

