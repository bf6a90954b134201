import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kmstn.config import chain_bundle  # noqa: E402
from kmstn.deploy import Mesh  # noqa: E402

# criterion id -> list of (test nodeid, outcome)
_AC_RESULTS = {}


@pytest.fixture
def mesh_factory(tmp_path):
    """Start chain meshes in simulated time; all are closed at teardown."""
    meshes = []

    def make(n_islands=4, profiles=None, seed=1, mesh=None, prefill=True):
        bundle = chain_bundle(n_islands, profiles=profiles, seed=seed,
                              mesh={"time_mode": "sim", "ack_timeout_s": 10.0, **(mesh or {})})
        m = Mesh(bundle, tmp_path / f"mesh{len(meshes)}")
        meshes.append(m)
        m.start()
        if prefill:
            for pair in m.pairs.values():
                pair.fill()
        return m

    yield make
    for m in meshes:
        m.close()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion checked by a test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for mark in getattr(report, "criteria", ()):
        _AC_RESULTS.setdefault(mark, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    report.criteria = [m.args[0] for m in item.iter_markers("criterion")]


def pytest_terminal_summary(terminalreporter):
    if not _AC_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for ac in sorted(_AC_RESULTS, key=lambda s: int(s[2:])):
        outcomes = _AC_RESULTS[ac]
        verdict = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"{ac} {verdict}")
