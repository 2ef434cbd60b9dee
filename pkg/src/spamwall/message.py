"""Mail message model and the simplified wire/corpus formats.

A raw message is a header block, a blank line and a body.  Attachments are
carried inside the body as pseudo-MIME blocks introduced by a delimiter line::

    --ATTACH filename=Update_KB2546_*86.BAK.exe size=143360

Everything after the delimiter up to the next delimiter, an ``--END`` line or
the end of the body belongs to the attachment and is not part of the body text.

Corpus files prepend one envelope line to the raw message::

    ENVELOPE ip=192.0.2.7 helo=mx.example from=a@b.example to=c@d.example[,...] [at=<epoch>]
"""

from __future__ import annotations

import ipaddress
import os
import re
from dataclasses import dataclass, field
from email.utils import parseaddr
from pathlib import Path
from typing import Iterator


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class EmailAddress:
    local_part: str
    domain: str

    def __post_init__(self):
        if not self.local_part or not self.domain:
            raise ValueError("empty local part or domain")
        if "@" in self.local_part or "@" in self.domain:
            raise ValueError("address must contain exactly one '@'")
        if any(c.isspace() for c in self.domain) or any(c.isspace() for c in self.local_part):
            raise ValueError("whitespace in address")
        object.__setattr__(self, "domain", self.domain.lower())

    @classmethod
    def parse(cls, text: str) -> "EmailAddress":
        text = text.strip()
        if text.startswith("<") and text.endswith(">"):
            text = text[1:-1]
        if text.count("@") != 1:
            raise ParseError(f"malformed address: {text!r}")
        local, domain = text.split("@")
        try:
            return cls(local, domain)
        except ValueError as exc:
            raise ParseError(f"malformed address {text!r}: {exc}") from None

    def __str__(self):
        return f"{self.local_part}@{self.domain}"


@dataclass(frozen=True)
class Envelope:
    helo_host: str
    client_ip: str
    mail_from: EmailAddress
    rcpt_to: tuple[EmailAddress, ...]

    def __post_init__(self):
        if not self.rcpt_to:
            raise ValueError("envelope needs at least one recipient")
        object.__setattr__(self, "rcpt_to", tuple(self.rcpt_to))
        # raises ValueError on anything that is not a dotted quad
        object.__setattr__(self, "client_ip", str(ipaddress.IPv4Address(self.client_ip)))


@dataclass(frozen=True)
class Attachment:
    filename: str
    size_bytes: int
    declared_type: str = ""

    def __post_init__(self):
        if self.size_bytes < 0:
            raise ValueError("negative attachment size")


@dataclass(frozen=True)
class Message:
    envelope: Envelope
    subject: str
    header_from: EmailAddress
    body_text: str
    attachments: tuple[Attachment, ...] = ()
    received_at: float = 0.0
    headers: tuple[tuple[str, str], ...] = field(default=(), compare=False)

    def with_envelope(self, envelope: Envelope) -> "Message":
        return Message(envelope, self.subject, self.header_from, self.body_text,
                       self.attachments, self.received_at, self.headers)

    def at(self, when: float) -> "Message":
        return Message(self.envelope, self.subject, self.header_from, self.body_text,
                       self.attachments, when, self.headers)


_ATTACH_RE = re.compile(
    r"^--ATTACH filename=(?P<name>\S(?:.*?\S)?) size=(?P<size>\d+)(?: type=(?P<type>\S+))?\s*$")
_HEADER_RE = re.compile(r"^(?P<name>[!-9;-~]+):\s?(?P<value>.*)$")


def _split_head(text: str) -> tuple[str, str]:
    text = text.replace("\r\n", "\n")
    if text.startswith("\n"):
        return "", text[1:]
    head, sep, body = text.partition("\n\n")
    if not sep:
        raise ParseError("missing blank line between headers and body")
    return head, body


def parse_message(raw: bytes, envelope: Envelope, now: float) -> Message:
    text = raw.decode("utf-8", errors="replace")
    head, body = _split_head(text)

    headers = []
    for line in head.split("\n"):
        m = _HEADER_RE.match(line)
        if not m:
            raise ParseError(f"malformed header line: {line!r}")
        headers.append((m["name"], m["value"].strip()))
    lookup = {name.lower(): value for name, value in reversed(headers)}

    if "from" not in lookup:
        raise ParseError("missing From header")
    _, addr = parseaddr(lookup["from"])
    if not addr:
        raise ParseError(f"malformed From header: {lookup['from']!r}")
    header_from = EmailAddress.parse(addr)

    body_lines = []
    attachments = []
    in_attachment = False
    for line in body.split("\n"):
        if line.startswith("--ATTACH"):
            m = _ATTACH_RE.match(line)
            if not m:
                raise ParseError(f"malformed attachment delimiter: {line!r}")
            attachments.append(Attachment(m["name"], int(m["size"]), m["type"] or ""))
            in_attachment = True
        elif in_attachment and line == "--END":
            in_attachment = False
        elif not in_attachment:
            body_lines.append(line)

    return Message(
        envelope=envelope,
        subject=lookup.get("subject", ""),
        header_from=header_from,
        body_text="\n".join(body_lines),
        attachments=tuple(attachments),
        received_at=float(now),
        headers=tuple(headers),
    )


def format_message(msg: Message) -> bytes:
    """Serialize back to the raw format accepted by parse_message."""
    lines = [f"From: {msg.header_from}"]
    if msg.subject:
        lines.append(f"Subject: {msg.subject}")
    for name, value in msg.headers:
        if name.lower() not in ("from", "subject"):
            lines.append(f"{name}: {value}")
    lines.append("")
    lines.append(msg.body_text)
    for att in msg.attachments:
        delim = f"--ATTACH filename={att.filename} size={att.size_bytes}"
        if att.declared_type:
            delim += f" type={att.declared_type}"
        lines.append(delim)
        lines.append("--END")
    return "\n".join(lines).encode("utf-8")


# --- URL extraction -------------------------------------------------------

_URL_RE = re.compile(r"https?://(?P<host>[^\s/:?#<>\"'\\]+)", re.IGNORECASE)
_WWW_RE = re.compile(r"(?<![\w./@-])(?P<host>www\.[a-z0-9.-]+)", re.IGNORECASE)
_LABEL_RE = re.compile(r"^[a-z0-9](?:[a-z0-9-]{0,61}[a-z0-9])?$")


def is_ipv4(text: str) -> bool:
    try:
        ipaddress.IPv4Address(text)
    except ValueError:
        return False
    return True


def _clean_host(host: str) -> str | None:
    host = host.lower().rstrip(".")
    if "@" in host:
        return None
    if is_ipv4(host):
        return host
    labels = host.split(".")
    if len(labels) < 2 or not all(_LABEL_RE.match(label) for label in labels):
        return None
    if labels[-1].isdigit():
        return None
    return host


def extract_urls(body_text: str) -> list[tuple[str, bool]]:
    found = []
    for m in _URL_RE.finditer(body_text):
        found.append((m.start(), m["host"]))
    for m in _WWW_RE.finditer(body_text):
        found.append((m.start(), m["host"]))
    found.sort()

    hosts = []
    seen = set()
    for _, candidate in found:
        host = _clean_host(candidate)
        if host is None or host in seen:
            continue
        seen.add(host)
        hosts.append((host, is_ipv4(host)))
    return hosts


# --- corpus files ---------------------------------------------------------

def parse_envelope_line(line: str) -> tuple[Envelope, float | None]:
    parts = line.strip().split()
    if not parts or parts[0] != "ENVELOPE":
        raise ParseError("corpus file must start with an ENVELOPE line")
    fields = {}
    for token in parts[1:]:
        key, sep, value = token.partition("=")
        if not sep:
            raise ParseError(f"malformed envelope token: {token!r}")
        fields[key] = value
    missing = {"ip", "helo", "from", "to"} - fields.keys()
    if missing:
        raise ParseError(f"envelope missing {sorted(missing)}")
    try:
        envelope = Envelope(
            helo_host=fields["helo"],
            client_ip=fields["ip"],
            mail_from=EmailAddress.parse(fields["from"]),
            rcpt_to=tuple(EmailAddress.parse(a) for a in fields["to"].split(",") if a),
        )
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    at = float(fields["at"]) if "at" in fields else None
    return envelope, at


def format_envelope_line(env: Envelope, at: float | None = None) -> str:
    line = (f"ENVELOPE ip={env.client_ip} helo={env.helo_host} from={env.mail_from} "
            f"to={','.join(str(r) for r in env.rcpt_to)}")
    if at is not None:
        line += f" at={int(at)}" if float(at).is_integer() else f" at={float(at)!r}"
    return line


def parse_corpus_bytes(data: bytes, default_time: float = 0.0) -> Message:
    first, sep, rest = data.partition(b"\n")
    envelope, at = parse_envelope_line(first.decode("utf-8", errors="replace"))
    return parse_message(rest, envelope, default_time if at is None else at)


def format_corpus_bytes(msg: Message) -> bytes:
    return format_envelope_line(msg.envelope, msg.received_at).encode() + b"\n" + format_message(msg)


def read_corpus_file(path: str | os.PathLike) -> Message:
    path = Path(path)
    data = path.read_bytes()
    return parse_corpus_bytes(data, default_time=path.stat().st_mtime)


def iter_corpus(directory: str | os.PathLike) -> Iterator[tuple[Path, Message]]:
    """Yield (path, message) for every regular file in name order."""
    for path in sorted(Path(directory).iterdir()):
        if path.is_file() and not path.name.startswith("."):
            yield path, read_corpus_file(path)
