"""Minimal SMTP listener in front of the pipeline.

Connection stages run at RCPT time, one recipient at a time (so greylisting
is per triplet); data stages run after DATA.  Accepted mail lands in the
inbox or trap maildir.
"""

from __future__ import annotations

import logging
import re
import socketserver
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .dns import Resolver
from .guard import AliasMode
from .message import EmailAddress, Envelope, ParseError, format_corpus_bytes, parse_message
from .pipeline import (Decision, Final, PipelineConfig, StageOutcome, Stores, TERMINAL, Verdict,
                       assemble_verdict, maildir_deliver, run_connection_stages, run_data_stages)

log = logging.getLogger(__name__)

_FROM_RE = re.compile(r"^FROM:\s*<([^>]*)>", re.IGNORECASE)
_TO_RE = re.compile(r"^TO:\s*<([^>]*)>", re.IGNORECASE)


@dataclass
class ListenerConfig:
    host: str = "127.0.0.1"
    port: int = 2525
    inbox: Path = Path("inbox")
    trap: Path = Path("trap")
    max_data_bytes: int = 10 * 1024 * 1024
    hostname: str = "spamwall.local"


@dataclass
class ServerContext:
    listener: ListenerConfig
    config: PipelineConfig
    stores: Stores
    resolver: Resolver
    clock: Callable[[], float] = time.time
    verdicts: list[Verdict] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def record(self, verdict: Verdict):
        with self.lock:
            self.verdicts.append(verdict)


def _reject_reply(outcome: StageOutcome) -> str:
    if outcome.decision is Decision.TEMP_REJECT:
        return "451 4.7.1 greylisted, try again later"
    return f"550 5.7.1 rejected by {outcome.stage.value.lower()}: {outcome.detail}"


class SmtpHandler(socketserver.StreamRequestHandler):
    ctx: ServerContext

    def setup(self):
        super().setup()
        self.ctx = self.server.ctx
        self.helo = None
        self._reset()

    def _reset(self):
        self.mail_from = None
        self.rcpts: list[EmailAddress] = []
        self.conn_outcomes: list[StageOutcome] | None = None

    def reply(self, line: str):
        self.wfile.write(line.encode("ascii", errors="replace") + b"\r\n")
        self.wfile.flush()

    def handle(self):
        self.reply(f"220 {self.ctx.listener.hostname} ESMTP spamwall")
        while True:
            raw = self.rfile.readline(4096)
            if not raw:
                return
            line = raw.decode("utf-8", errors="replace").rstrip("\r\n")
            verb, _, arg = line.partition(" ")
            verb = verb.upper()
            handler = getattr(self, f"smtp_{verb}", None)
            if handler is None:
                self.reply("500 5.5.2 command not recognized")
                continue
            if handler(arg.strip()) is False:
                return

    def smtp_HELO(self, arg):
        if not arg:
            return self.reply("501 5.5.4 HELO requires a hostname")
        self.helo = arg
        self._reset()
        self.reply(f"250 {self.ctx.listener.hostname}")

    def smtp_EHLO(self, arg):
        if not arg:
            return self.reply("501 5.5.4 EHLO requires a hostname")
        self.helo = arg
        self._reset()
        self.wfile.write(f"250-{self.ctx.listener.hostname}\r\n".encode())
        self.reply(f"250 SIZE {self.ctx.listener.max_data_bytes}")

    def smtp_MAIL(self, arg):
        if self.helo is None or self.mail_from is not None:
            return self.reply("503 5.5.1 bad sequence of commands")
        m = _FROM_RE.match(arg)
        if not m:
            return self.reply("501 5.5.4 syntax: MAIL FROM:<address>")
        try:
            self.mail_from = EmailAddress.parse(m.group(1))
        except ParseError:
            return self.reply("501 5.1.7 bad sender address")
        self.reply("250 2.1.0 ok")

    def smtp_RCPT(self, arg):
        if self.mail_from is None:
            return self.reply("503 5.5.1 bad sequence of commands")
        m = _TO_RE.match(arg)
        if not m:
            return self.reply("501 5.5.4 syntax: RCPT TO:<address>")
        try:
            rcpt = EmailAddress.parse(m.group(1))
        except ParseError:
            return self.reply("501 5.1.3 bad recipient address")
        ctx = self.ctx
        alias = ctx.stores.aliases.get(rcpt)
        if alias is not None and alias.mode is AliasMode.BOUNCE_OLD:
            return self.reply(f"550 5.1.1 {rcpt} retired")
        env = Envelope(self.helo, self.client_address[0], self.mail_from, (rcpt,))
        outcomes = run_connection_stages(env, ctx.clock(), ctx.config, ctx.stores, ctx.resolver)
        if outcomes[-1].decision in TERMINAL:
            ctx.record(assemble_verdict(outcomes, ctx.clock()))
            return self.reply(_reject_reply(outcomes[-1]))
        if self.conn_outcomes is None:
            self.conn_outcomes = outcomes
        self.rcpts.append(rcpt)
        self.reply("250 2.1.5 ok")

    def smtp_DATA(self, arg):
        if not self.rcpts:
            return self.reply("503 5.5.1 need RCPT before DATA")
        self.reply("354 end data with <CR><LF>.<CR><LF>")
        chunks, size, too_big = [], 0, False
        while True:
            raw = self.rfile.readline(65536)
            if not raw:
                return False
            line = raw.rstrip(b"\r\n")
            if line == b".":
                break
            if line.startswith(b".."):
                line = line[1:]
            size += len(line) + 1
            if size > self.ctx.listener.max_data_bytes:
                too_big = True
            elif not too_big:
                chunks.append(line)
        try:
            if too_big:
                return self.reply("552 5.3.4 message size exceeds fixed limit")
            self._accept(b"\n".join(chunks))
        finally:
            self._reset()

    def _accept(self, raw: bytes):
        ctx = self.ctx
        env = Envelope(self.helo, self.client_address[0], self.mail_from, tuple(self.rcpts))
        now = ctx.clock()
        try:
            msg = parse_message(raw, env, now)
        except ParseError as exc:
            return self.reply(f"550 5.6.0 malformed message: {exc}")
        outcomes = list(self.conn_outcomes or []) + run_data_stages(msg, ctx.config, ctx.stores, ctx.resolver)
        verdict = assemble_verdict(outcomes, now)
        ctx.record(verdict)
        if verdict.final is Final.DELIVERED:
            maildir_deliver(ctx.listener.inbox, format_corpus_bytes(msg))
            return self.reply("250 2.0.0 queued")
        if verdict.final is Final.QUARANTINED:
            maildir_deliver(ctx.listener.trap, format_corpus_bytes(msg))
            return self.reply("250 2.0.0 queued")
        self.reply(_reject_reply(verdict.terminal_outcome))

    def smtp_RSET(self, arg):
        self._reset()
        self.reply("250 2.0.0 ok")

    def smtp_NOOP(self, arg):
        self.reply("250 2.0.0 ok")

    def smtp_QUIT(self, arg):
        self.reply("221 2.0.0 bye")
        return False


class SmtpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, ctx: ServerContext):
        self.ctx = ctx
        super().__init__((ctx.listener.host, ctx.listener.port), SmtpHandler)

    @property
    def port(self) -> int:
        return self.server_address[1]


def smtp_serve(listener: ListenerConfig, config: PipelineConfig, stores: Stores, resolver: Resolver,
               clock: Callable[[], float] = time.time) -> ServerContext:
    """Serve until interrupted; return the context holding every verdict."""
    ctx = ServerContext(listener, config, stores, resolver, clock)
    with SmtpServer(ctx) as server:
        log.info("listening on %s:%d", listener.host, server.port)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return ctx


def start_background(ctx: ServerContext) -> tuple[SmtpServer, threading.Thread]:
    server = SmtpServer(ctx)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread
