"""Resolver abstraction: a static zone for offline use and a UDP client."""

from __future__ import annotations

import enum
import ipaddress
import random
import socket
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

DEFAULT_TIMEOUT = 2.0
MAX_UDP = 512


class RType(enum.IntEnum):
    A = 1
    PTR = 12
    MX = 15
    TXT = 16


class Status(enum.Enum):
    FOUND = "Found"
    NXDOMAIN = "NxDomain"
    TIMEOUT = "Timeout"
    SERVFAIL = "ServFail"


@dataclass(frozen=True)
class DnsQuestion:
    name: str
    rtype: RType

    def __post_init__(self):
        name = self.name.rstrip(".").lower()
        if len(name) > 253:
            raise ValueError(f"name too long: {name[:40]}...")
        for label in name.split("."):
            if not 1 <= len(label.encode()) <= 63:
                raise ValueError(f"bad label in {name!r}")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "rtype", RType(self.rtype))


@dataclass(frozen=True)
class DnsAnswer:
    status: Status
    a_records: tuple[str, ...] = ()
    txt_records: tuple[str, ...] = ()
    ptr_records: tuple[str, ...] = ()
    mx_records: tuple[tuple[int, str], ...] = ()

    @property
    def found(self) -> bool:
        return self.status is Status.FOUND

    def only(self, rtype: RType) -> "DnsAnswer":
        """Drop records that do not belong to ``rtype``; empty Found becomes NxDomain."""
        keep = {
            RType.A: dict(a_records=self.a_records),
            RType.TXT: dict(txt_records=self.txt_records),
            RType.PTR: dict(ptr_records=self.ptr_records),
            RType.MX: dict(mx_records=self.mx_records),
        }[rtype]
        if self.status is Status.FOUND and not any(keep.values()):
            return NXDOMAIN
        if self.status is not Status.FOUND:
            return DnsAnswer(self.status)
        return DnsAnswer(self.status, **keep)


NXDOMAIN = DnsAnswer(Status.NXDOMAIN)
TIMEOUT = DnsAnswer(Status.TIMEOUT)
SERVFAIL = DnsAnswer(Status.SERVFAIL)


class Resolver(Protocol):
    def resolve(self, q: DnsQuestion, timeout: float = DEFAULT_TIMEOUT) -> DnsAnswer: ...


def reverse_name(ip: str) -> str:
    octets = str(ipaddress.IPv4Address(ip)).split(".")
    return ".".join(reversed(octets)) + ".in-addr.arpa"


def reversed_octets(ip: str) -> str:
    return ".".join(reversed(str(ipaddress.IPv4Address(ip)).split(".")))


# --- static zone ----------------------------------------------------------

class StaticZone:
    """Immutable table of answers keyed by (name, rtype).

    Absent keys answer NxDomain.  The special values ``TIMEOUT`` and
    ``SERVFAIL`` in a zone file make a name fail in that way.
    """

    def __init__(self, entries: dict[tuple[str, RType], DnsAnswer] | None = None):
        self._entries = {(name.rstrip(".").lower(), RType(rtype)): answer
                         for (name, rtype), answer in (entries or {}).items()}
        self._lock = threading.Lock()
        self.queries = 0

    def resolve(self, q: DnsQuestion, timeout: float = DEFAULT_TIMEOUT) -> DnsAnswer:
        with self._lock:
            self.queries += 1
        return self._entries.get((q.name, q.rtype), NXDOMAIN)

    def __len__(self):
        return len(self._entries)

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "StaticZone":
        records: dict[tuple[str, RType], dict] = {}
        failures: dict[tuple[str, RType], DnsAnswer] = {}
        for lineno, raw in enumerate(lines, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 2)
            if len(parts) != 3:
                raise ValueError(f"zone line {lineno}: expected '<name> <rtype> <value>'")
            name, rtype_text, value = parts
            try:
                rtype = RType[rtype_text.upper()]
            except KeyError:
                raise ValueError(f"zone line {lineno}: unknown rtype {rtype_text!r}") from None
            key = (name.rstrip(".").lower(), rtype)
            if value.upper() in ("TIMEOUT", "SERVFAIL"):
                failures[key] = TIMEOUT if value.upper() == "TIMEOUT" else SERVFAIL
                continue
            slot = records.setdefault(key, {"a": [], "txt": [], "ptr": [], "mx": []})
            if rtype is RType.A:
                slot["a"].append(str(ipaddress.IPv4Address(value)))
            elif rtype is RType.TXT:
                slot["txt"].append(value.strip().strip('"'))
            elif rtype is RType.PTR:
                slot["ptr"].append(value.rstrip(".").lower())
            else:
                pref, _, host = value.partition(" ")
                slot["mx"].append((int(pref), host.strip().rstrip(".").lower()))
        entries = {
            key: DnsAnswer(Status.FOUND, tuple(s["a"]), tuple(s["txt"]), tuple(s["ptr"]), tuple(s["mx"]))
            for key, s in records.items()
        }
        entries.update(failures)
        return cls(entries)

    @classmethod
    def from_file(cls, path) -> "StaticZone":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)

    @classmethod
    def from_text(cls, text: str) -> "StaticZone":
        return cls.from_lines(text.splitlines())


class MemoResolver:
    """Per-run memo in front of another resolver.  Failures are not cached."""

    def __init__(self, inner: Resolver):
        self.inner = inner
        self._memo: dict[DnsQuestion, DnsAnswer] = {}
        self._lock = threading.Lock()

    def resolve(self, q: DnsQuestion, timeout: float = DEFAULT_TIMEOUT) -> DnsAnswer:
        with self._lock:
            hit = self._memo.get(q)
        if hit is not None:
            return hit
        answer = self.inner.resolve(q, timeout)
        if answer.status in (Status.FOUND, Status.NXDOMAIN):
            with self._lock:
                self._memo[q] = answer
        return answer


# --- wire format ----------------------------------------------------------

class WireError(ValueError):
    pass


def encode_name(name: str) -> bytes:
    out = b""
    if name:
        for label in name.split("."):
            raw = label.encode("ascii")
            out += struct.pack("!B", len(raw)) + raw
    return out + b"\0"


def decode_name(data: bytes, offset: int) -> tuple[str, int]:
    """Decode a possibly compressed name; return (name, offset after it)."""
    labels = []
    end = None
    jumps = 0
    while True:
        if offset >= len(data):
            raise WireError("name runs past end of message")
        length = data[offset]
        if length & 0xC0 == 0xC0:
            if offset + 1 >= len(data):
                raise WireError("truncated pointer")
            if end is None:
                end = offset + 2
            offset = ((length & 0x3F) << 8) | data[offset + 1]
            jumps += 1
            if jumps > 32:
                raise WireError("compression loop")
            continue
        if length & 0xC0:
            raise WireError("unsupported label type")
        offset += 1
        if length == 0:
            break
        labels.append(data[offset:offset + length].decode("ascii", errors="replace"))
        offset += length
    return ".".join(labels).lower(), end if end is not None else offset


def encode_query(q: DnsQuestion, query_id: int, recursion_desired: bool = True) -> bytes:
    flags = 0x0100 if recursion_desired else 0
    header = struct.pack("!HHHHHH", query_id, flags, 1, 0, 0, 0)
    return header + encode_name(q.name) + struct.pack("!HH", int(q.rtype), 1)


@dataclass
class WireMessage:
    query_id: int
    flags: int
    questions: list[DnsQuestion] = field(default_factory=list)
    answer: DnsAnswer = NXDOMAIN

    @property
    def rcode(self) -> int:
        return self.flags & 0x000F

    @property
    def truncated(self) -> bool:
        return bool(self.flags & 0x0200)


def _encode_rdata(rtype: RType, value) -> bytes:
    if rtype is RType.A:
        return ipaddress.IPv4Address(value).packed
    if rtype is RType.TXT:
        raw = value.encode("utf-8")
        chunks = [raw[i:i + 255] for i in range(0, len(raw), 255)] or [b""]
        return b"".join(struct.pack("!B", len(c)) + c for c in chunks)
    if rtype is RType.PTR:
        return encode_name(value)
    pref, host = value
    return struct.pack("!H", pref) + encode_name(host)


def encode_response(query_id: int, q: DnsQuestion, answer: DnsAnswer, ttl: int = 300) -> bytes:
    """Build a response message (used by test servers and fixtures)."""
    rcode = {Status.FOUND: 0, Status.NXDOMAIN: 3, Status.SERVFAIL: 2, Status.TIMEOUT: 2}[answer.status]
    records = []
    if answer.found:
        values = {RType.A: answer.a_records, RType.TXT: answer.txt_records,
                  RType.PTR: answer.ptr_records, RType.MX: answer.mx_records}[q.rtype]
        for value in values:
            rdata = _encode_rdata(q.rtype, value)
            # 0xC00C points back at the question name
            records.append(struct.pack("!HHHIH", 0xC00C, int(q.rtype), 1, ttl, len(rdata)) + rdata)
    header = struct.pack("!HHHHHH", query_id, 0x8180 | rcode, 1, len(records), 0, 0)
    return header + encode_name(q.name) + struct.pack("!HH", int(q.rtype), 1) + b"".join(records)


def decode_message(data: bytes) -> WireMessage:
    if len(data) < 12:
        raise WireError("short header")
    qid, flags, qdcount, ancount, _, _ = struct.unpack("!HHHHHH", data[:12])
    offset = 12
    questions = []
    for _ in range(qdcount):
        name, offset = decode_name(data, offset)
        if offset + 4 > len(data):
            raise WireError("truncated question")
        rtype, _qclass = struct.unpack("!HH", data[offset:offset + 4])
        offset += 4
        try:
            questions.append(DnsQuestion(name, RType(rtype)))
        except ValueError:
            raise WireError(f"unsupported question type {rtype}") from None

    a, txt, ptr, mx = [], [], [], []
    for _ in range(ancount):
        _, offset = decode_name(data, offset)
        if offset + 10 > len(data):
            raise WireError("truncated record header")
        rtype, _rclass, _ttl, rdlength = struct.unpack("!HHIH", data[offset:offset + 10])
        offset += 10
        rdata_start = offset
        offset += rdlength
        if offset > len(data):
            raise WireError("truncated rdata")
        rdata = data[rdata_start:offset]
        if rtype == RType.A and rdlength == 4:
            a.append(str(ipaddress.IPv4Address(rdata)))
        elif rtype == RType.TXT:
            parts, i = [], 0
            while i < len(rdata):
                n = rdata[i]
                parts.append(rdata[i + 1:i + 1 + n].decode("utf-8", errors="replace"))
                i += 1 + n
            txt.append("".join(parts))
        elif rtype == RType.PTR:
            ptr.append(decode_name(data, rdata_start)[0])
        elif rtype == RType.MX:
            (pref,) = struct.unpack("!H", rdata[:2])
            mx.append((pref, decode_name(data, rdata_start + 2)[0]))

    rcode = flags & 0x000F
    if flags & 0x0200:
        status = Status.SERVFAIL
    elif rcode == 3:
        status = Status.NXDOMAIN
    elif rcode != 0:
        status = Status.SERVFAIL
    else:
        status = Status.FOUND
    answer = DnsAnswer(status, tuple(a), tuple(txt), tuple(ptr), tuple(mx))
    if status is Status.FOUND and questions:
        answer = answer.only(questions[0].rtype)
    return WireMessage(qid, flags, questions, answer)


class UdpResolver:
    """Query/response over UDP.  One retry by default; no TCP fallback, no EDNS."""

    def __init__(self, server: str, port: int = 53, retries: int = 1):
        self.server = server
        self.port = port
        self.retries = retries
        self._rng = random.SystemRandom()

    @classmethod
    def from_address(cls, address: str, retries: int = 1) -> "UdpResolver":
        host, sep, port = address.rpartition(":")
        if not sep:
            return cls(address, 53, retries)
        return cls(host, int(port), retries)

    @classmethod
    def from_system(cls) -> "UdpResolver":
        try:
            for line in Path("/etc/resolv.conf").read_text().splitlines():
                parts = line.split()
                if len(parts) >= 2 and parts[0] == "nameserver":
                    return cls(parts[1])
        except OSError:
            pass
        return cls("127.0.0.1")

    def resolve(self, q: DnsQuestion, timeout: float = DEFAULT_TIMEOUT) -> DnsAnswer:
        for _ in range(self.retries + 1):
            qid = self._rng.getrandbits(16)
            packet = encode_query(q, qid)
            with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
                sock.settimeout(timeout)
                try:
                    sock.sendto(packet, (self.server, self.port))
                    while True:
                        data, _ = sock.recvfrom(4096)
                        try:
                            reply = decode_message(data)
                        except WireError:
                            return SERVFAIL
                        if reply.query_id == qid and reply.questions[:1] == [q]:
                            return reply.answer
                except socket.timeout:
                    continue
                except OSError:
                    return SERVFAIL
        return TIMEOUT
