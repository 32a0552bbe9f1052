import os

import pytest
from hypothesis import HealthCheck, settings

from ckptf.clock import VirtualClock
from ckptf.coordinator import ControlPlane, Topology
from ckptf.fabric import Fabric, FabricConfig

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _no_env_overrides(monkeypatch):
    monkeypatch.delenv("CKPTF_DIR", raising=False)
    monkeypatch.delenv("CKPTF_COORD", raising=False)


class World:
    """A virtual-clock fabric plus a flat control plane with one session per rank."""

    def __init__(self, ranks=2, nodes=None, seed=0, mode="flat", **fabric_kw):
        nodes = nodes or ranks
        self.clock = VirtualClock()
        self.fabric = Fabric(FabricConfig(rng_seed=seed, **fabric_kw), nodes=nodes, clock=self.clock)
        self.hcas = [self.fabric.create_hca(n) for n in range(nodes)]
        self.plane = ControlPlane(Topology(mode, nodes, ranks // nodes), self.clock)
        self.sessions = [self.plane.open_session(r) for r in range(ranks)]
        self.rpn = ranks // nodes

    def hca_of(self, rank):
        return self.fabric.hca(rank // self.rpn)

    def settle(self):
        """Move time far enough that everything sent so far is deliverable."""
        self.clock.advance(int(self.fabric.config.latency_max) + 1)


@pytest.fixture(scope="session")
def world():
    return World


@pytest.fixture
def ckpt_dir(tmp_path):
    d = tmp_path / "ckpt"
    d.mkdir()
    return d


# -- acceptance summary -----------------------------------------------------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        verdict = "PASS" if rep.outcome == "passed" else "FAIL"
        previous = _criteria.get(number, ("PASS", title))[0]
        _criteria[number] = ("FAIL" if "FAIL" in (verdict, previous) else "PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        verdict, title = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")
