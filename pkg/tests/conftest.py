import socket

import pytest
from hypothesis import HealthCheck, settings

from spamwall.dns import StaticZone

from factories import FIXTURE_ZONE

settings.register_profile("spamwall", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("spamwall")

_criteria: dict[str, str] = {}


@pytest.fixture
def zone():
    return StaticZone.from_text(FIXTURE_ZONE)


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Fail any attempt to reach a non-loopback address."""
    real_connect = socket.socket.connect
    real_sendto = socket.socket.sendto

    def _check(address):
        host = address[0] if isinstance(address, tuple) else address
        if isinstance(host, str) and not (host.startswith("127.") or host in ("localhost", "::1")):
            raise AssertionError(f"test tried to reach the network: {address!r}")

    def connect(self, address):
        _check(address)
        return real_connect(self, address)

    def sendto(self, data, *args):
        _check(args[-1])
        return real_sendto(self, data, *args)

    monkeypatch.setattr(socket.socket, "connect", connect)
    monkeypatch.setattr(socket.socket, "sendto", sendto)


def pytest_runtest_logreport(report):
    criterion = dict(report.user_properties).get("criterion")
    if criterion is None:
        return
    if (report.when == "call" or report.failed) and _criteria.get(criterion) != "FAIL":
        _criteria[criterion] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_criteria, key=lambda c: int(c.split()[0])):
        terminalreporter.write_line(f"{_criteria[criterion]}  criterion {criterion}")
