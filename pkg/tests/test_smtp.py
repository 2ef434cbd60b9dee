import smtplib

import pytest

from spamwall.dns import StaticZone
from spamwall.pipeline import Final, PipelineConfig, Stage, Stores
from spamwall.smtp import ListenerConfig, ServerContext, start_background
from spamwall.source_filters import BlocklistConfig

ZONE = """\
1.0.0.127.in-addr.arpa PTR localhost.test
66.0.0.127.in-addr.arpa PTR spammer.test
66.0.0.127.bl.test A 127.0.0.2
"""

MESSAGE = b"From: a@sender.test\r\nSubject: hello\r\n\r\nsee you soon\r\n"


class Clock:
    def __init__(self, now=1_000_000.0):
        self.now = now

    def __call__(self):
        return self.now


@pytest.fixture
def server(tmp_path):
    clock = Clock()
    config = PipelineConfig(dnsbl_lists=(BlocklistConfig("t", "bl.test"),))
    listener = ListenerConfig(port=0, inbox=tmp_path / "inbox", trap=tmp_path / "trap", max_data_bytes=2000)
    ctx = ServerContext(listener, config, Stores(), StaticZone.from_text(ZONE), clock)
    srv, thread = start_background(ctx)
    yield ctx, srv.port, clock
    srv.shutdown()
    srv.server_close()
    thread.join(5)


def client(port, source="127.0.0.1"):
    smtp = smtplib.SMTP(timeout=5, source_address=(source, 0))
    smtp.connect("127.0.0.1", port)
    return smtp


def test_listed_client_gets_550(server):
    ctx, port, _ = server
    with client(port, "127.0.0.66") as smtp:
        smtp.helo("spammer.test")
        smtp.mail("x@sender.test")
        code, text = smtp.rcpt("bob@corp.example")
    assert code == 550 and b"dnsbl" in text
    assert ctx.verdicts[-1].final is Final.REJECTED


def test_greylisted_then_accepted(server):
    ctx, port, clock = server
    with client(port) as smtp:
        smtp.helo("localhost.test")
        smtp.mail("a@sender.test")
        assert smtp.rcpt("bob@corp.example")[0] == 451
    clock.now += 60
    with client(port) as smtp:
        smtp.helo("localhost.test")
        smtp.mail("a@sender.test")
        assert smtp.rcpt("bob@corp.example")[0] == 250
        assert smtp.data(MESSAGE)[0] == 250
    assert ctx.verdicts[-1].final is Final.DELIVERED
    assert len(list((ctx.listener.inbox / "new").iterdir())) == 1


def test_bad_sequences_get_503(server):
    ctx, port, _ = server
    with client(port) as smtp:
        assert smtp.docmd("MAIL", "FROM:<a@sender.test>")[0] == 503
        smtp.helo("localhost.test")
        assert smtp.docmd("RCPT", "TO:<bob@corp.example>")[0] == 503
        assert smtp.docmd("DATA")[0] == 503
        assert smtp.docmd("BOGUS")[0] == 500


def test_oversize_data_gets_552(server):
    ctx, port, _ = server
    ctx.config.enabled -= {Stage.GREYLIST}
    with client(port) as smtp:
        smtp.helo("localhost.test")
        smtp.mail("a@sender.test")
        assert smtp.rcpt("bob@corp.example")[0] == 250
        assert smtp.data(MESSAGE + b"x" * 3000 + b"\r\n")[0] == 552
        # the session survives and the next transaction works
        smtp.mail("a@sender.test")
        smtp.rcpt("bob@corp.example")
        assert smtp.data(MESSAGE)[0] == 250
