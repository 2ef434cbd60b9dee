"""Connection-level defenses: DNSBL, SURBL, SPF, greylisting and reverse DNS."""

from __future__ import annotations

import enum
import ipaddress
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Sequence

from .dns import DEFAULT_TIMEOUT, DnsQuestion, Resolver, RType, Status, reverse_name, reversed_octets
from .message import Message, extract_urls

log = logging.getLogger(__name__)

LOOPBACK_NET = ipaddress.IPv4Network("127.0.0.0/8")


class ListKind(enum.Enum):
    IP = "IpList"
    DOMAIN = "DomainList"


class ListStatus(enum.Enum):
    LISTED = "Listed"
    NOT_LISTED = "NotListed"
    UNAVAILABLE = "Unavailable"


@dataclass(frozen=True)
class BlocklistConfig:
    name: str
    zone: str
    kind: ListKind = ListKind.IP
    weight: int = 1
    enabled: bool = True

    def __post_init__(self):
        if not self.zone:
            raise ValueError(f"blocklist {self.name!r} has an empty zone")
        if self.weight < 1:
            raise ValueError(f"blocklist {self.name!r} weight must be >= 1")


@dataclass
class ListVerdict:
    listed: bool = False
    per_list: dict[str, ListStatus] = field(default_factory=dict)
    score: int = 0
    # SURBL only: distinct domains dropped by the per-message query cap
    skipped_domains: int = 0

    @property
    def all_unavailable(self) -> bool:
        return bool(self.per_list) and all(s is ListStatus.UNAVAILABLE for s in self.per_list.values())


def _lookup_listed(name: str, resolver: Resolver, timeout: float) -> ListStatus:
    answer = resolver.resolve(DnsQuestion(name, RType.A), timeout)
    if answer.status is Status.FOUND:
        if any(ipaddress.IPv4Address(a) in LOOPBACK_NET for a in answer.a_records):
            return ListStatus.LISTED
        return ListStatus.NOT_LISTED
    if answer.status is Status.NXDOMAIN:
        return ListStatus.NOT_LISTED
    return ListStatus.UNAVAILABLE


def _aggregate(per_list: dict[str, ListStatus], lists: Sequence[BlocklistConfig], threshold: int) -> ListVerdict:
    weights = {bl.name: bl.weight for bl in lists}
    score = sum(weights[name] for name, status in per_list.items() if status is ListStatus.LISTED)
    return ListVerdict(listed=score >= threshold, per_list=per_list, score=score)


def dnsbl_check(ip: str, lists: Sequence[BlocklistConfig], resolver: Resolver, threshold: int = 1,
                timeout: float = DEFAULT_TIMEOUT) -> ListVerdict:
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    prefix = reversed_octets(ip)
    per_list = {}
    for bl in lists:
        if bl.enabled and bl.kind is ListKind.IP:
            per_list[bl.name] = _lookup_listed(f"{prefix}.{bl.zone}", resolver, timeout)
    return _aggregate(per_list, lists, threshold)


# two-letter ccTLDs commonly delegate registrations one level down
CC_SECOND_LEVEL = frozenset({"co", "com", "ac", "org", "net"})


def registered_domain(host: str) -> str:
    labels = host.lower().rstrip(".").split(".")
    if len(labels) >= 3 and len(labels[-1]) == 2 and labels[-2] in CC_SECOND_LEVEL:
        return ".".join(labels[-3:])
    return ".".join(labels[-2:])


def surbl_check(msg: Message, lists: Sequence[BlocklistConfig], resolver: Resolver, threshold: int = 1,
                max_domains: int = 10, timeout: float = DEFAULT_TIMEOUT) -> ListVerdict:
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    targets = set()
    for host, is_ip in extract_urls(msg.body_text):
        targets.add(reversed_octets(host) if is_ip else registered_domain(host))
    if not targets:
        return ListVerdict()
    # sorted so the cap does not depend on where URLs sit in the body
    ordered = sorted(targets)
    queried, skipped = ordered[:max_domains], len(ordered) - max_domains

    per_list = {}
    for bl in lists:
        if not bl.enabled or bl.kind is not ListKind.DOMAIN:
            continue
        status = ListStatus.NOT_LISTED
        for target in queried:
            hit = _lookup_listed(f"{target}.{bl.zone}", resolver, timeout)
            if hit is ListStatus.LISTED:
                status = hit
                break
            if hit is ListStatus.UNAVAILABLE:
                status = hit
        per_list[bl.name] = status
    verdict = _aggregate(per_list, lists, threshold)
    verdict.skipped_domains = max(skipped, 0)
    return verdict


# --- SPF ------------------------------------------------------------------

class Qualifier(enum.Enum):
    PASS = "+"
    FAIL = "-"
    SOFTFAIL = "~"
    NEUTRAL = "?"


class SpfResult(enum.Enum):
    PASS = "Pass"
    FAIL = "Fail"
    SOFTFAIL = "SoftFail"
    NEUTRAL = "Neutral"
    NONE = "None"
    TEMPERROR = "TempError"
    PERMERROR = "PermError"


_QUALIFIER_RESULT = {
    Qualifier.PASS: SpfResult.PASS,
    Qualifier.FAIL: SpfResult.FAIL,
    Qualifier.SOFTFAIL: SpfResult.SOFTFAIL,
    Qualifier.NEUTRAL: SpfResult.NEUTRAL,
}

SPF_KINDS = ("ip4", "a", "mx", "include", "all")


class SpfPermError(ValueError):
    pass


@dataclass(frozen=True)
class Mechanism:
    qualifier: Qualifier
    kind: str
    argument: str = ""


@dataclass(frozen=True)
class SpfRecord:
    mechanisms: tuple[Mechanism, ...]


def is_spf_record(txt: str) -> bool:
    head = txt.strip()[:7].lower()
    return head == "v=spf1" or head == "v=spf1 "


def spf_parse(txt: str) -> SpfRecord:
    """Parse the supported mechanism subset.  Raises SpfPermError otherwise."""
    terms = txt.split()
    if not terms or terms[0].lower() != "v=spf1":
        raise SpfPermError("record does not start with v=spf1")
    mechanisms = []
    for term in terms[1:]:
        qualifier = Qualifier.PASS
        if term[0] in "+-~?":
            qualifier = Qualifier(term[0])
            term = term[1:]
        kind, sep, arg = term.partition(":")
        kind = kind.lower()
        if kind not in SPF_KINDS:
            raise SpfPermError(f"unsupported mechanism {term!r}")
        if kind == "ip4":
            try:
                ipaddress.IPv4Network(arg, strict=False)
            except ValueError:
                raise SpfPermError(f"malformed ip4 argument {arg!r}") from None
        elif kind == "include":
            if not arg:
                raise SpfPermError("include needs a domain")
        elif kind == "all":
            if sep:
                raise SpfPermError("all takes no argument")
        elif sep and not arg:
            raise SpfPermError(f"{kind}: empty domain")
        mechanisms.append(Mechanism(qualifier, kind, arg.lower()))
    if sum(m.kind == "all" for m in mechanisms) > 1:
        raise SpfPermError("more than one 'all'")
    return SpfRecord(tuple(mechanisms))


class _SpfAbort(Exception):
    def __init__(self, result: SpfResult):
        self.result = result


@dataclass
class _Budget:
    remaining: int

    def spend(self):
        self.remaining -= 1
        if self.remaining < 0:
            raise _SpfAbort(SpfResult.PERMERROR)


def _resolve_or_abort(resolver, name, rtype, timeout):
    try:
        answer = resolver.resolve(DnsQuestion(name, rtype), timeout)
    except ValueError:
        raise _SpfAbort(SpfResult.PERMERROR) from None
    if answer.status in (Status.TIMEOUT, Status.SERVFAIL):
        raise _SpfAbort(SpfResult.TEMPERROR)
    return answer


def _spf_check(ip, domain, resolver, budget, timeout) -> SpfResult:
    answer = _resolve_or_abort(resolver, domain, RType.TXT, timeout)
    records = [t for t in answer.txt_records if is_spf_record(t)]
    if not records:
        return SpfResult.NONE
    if len(records) > 1:
        return SpfResult.PERMERROR
    try:
        record = spf_parse(records[0])
    except SpfPermError:
        return SpfResult.PERMERROR

    for mech in record.mechanisms:
        if mech.kind == "all":
            matched = True
        elif mech.kind == "ip4":
            matched = ip in ipaddress.IPv4Network(mech.argument, strict=False)
        elif mech.kind == "a":
            budget.spend()
            a = _resolve_or_abort(resolver, mech.argument or domain, RType.A, timeout)
            matched = str(ip) in a.a_records
        elif mech.kind == "mx":
            budget.spend()
            mx = _resolve_or_abort(resolver, mech.argument or domain, RType.MX, timeout)
            matched = False
            for _, host in sorted(mx.mx_records)[:10]:
                a = _resolve_or_abort(resolver, host, RType.A, timeout)
                if str(ip) in a.a_records:
                    matched = True
                    break
        else:  # include
            budget.spend()
            inner = _spf_check(ip, mech.argument, resolver, budget, timeout)
            if inner in (SpfResult.TEMPERROR, SpfResult.PERMERROR):
                return inner
            if inner is SpfResult.NONE:
                return SpfResult.PERMERROR
            matched = inner is SpfResult.PASS
        if matched:
            return _QUALIFIER_RESULT[mech.qualifier]
    return SpfResult.NEUTRAL


def spf_evaluate(client_ip: str, mail_from_domain: str, resolver: Resolver, max_dns: int = 10,
                 timeout: float = DEFAULT_TIMEOUT) -> SpfResult:
    if not mail_from_domain:
        raise ValueError("mail_from_domain must be non-empty")
    ip = ipaddress.IPv4Address(client_ip)
    try:
        return _spf_check(ip, mail_from_domain.lower(), resolver, _Budget(max_dns), timeout)
    except _SpfAbort as abort:
        return abort.result


# --- greylisting ----------------------------------------------------------

class GreyState(enum.Enum):
    PENDING = "PENDING"
    CONFIRMED = "CONFIRMED"


class GreylistDecision(enum.Enum):
    TEMP_REJECT = "TempReject"
    ACCEPT = "Accept"
    UNAVAILABLE = "Unavailable"


GreyKey = tuple  # (client_ip, sender, recipient) as strings


@dataclass
class GreylistEntry:
    key: GreyKey
    state: GreyState
    first_seen: float
    last_seen: float
    pass_count: int = 0


DEFAULT_EXPIRE_SECS = 30 * 86400


def fmt_time(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


class GreylistStore:
    """Triplet store with an optional append-only transition log.

    Each check writes one line ``<epoch>\\t<PENDING|CONFIRMED|RESET>\\t<ip>\\t<sender>\\t<recipient>``;
    replaying the lines rebuilds first_seen, last_seen and pass_count exactly.
    """

    def __init__(self, path: str | os.PathLike | None = None, expire_secs: float = DEFAULT_EXPIRE_SECS):
        self.path = path
        self.expire_secs = expire_secs
        self.entries: dict[GreyKey, GreylistEntry] = {}
        self._locks: dict[GreyKey, threading.Lock] = {}
        self._guard = threading.Lock()
        self._log = None

    @staticmethod
    def make_key(ip: str, sender, recipient) -> GreyKey:
        return (str(ip), str(sender).lower(), str(recipient).lower())

    def lock_for(self, key: GreyKey) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    @classmethod
    def open(cls, path, now: float | None = None, expire_secs: float = DEFAULT_EXPIRE_SECS) -> "GreylistStore":
        store = cls(path, expire_secs)
        if path is not None and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.rstrip("\n")
                    if line:
                        store._replay_line(line, lineno)
            if now is not None:
                store.prune(now)
        return store

    def _replay_line(self, line: str, lineno: int):
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"greylist log line {lineno}: expected 5 fields")
        stamp, kind, ip, sender, rcpt = parts
        self.apply(float(stamp), kind, (ip, sender, rcpt))

    def apply(self, now: float, kind: str, key: GreyKey):
        entry = self.entries.get(key)
        if kind == "RESET" or (kind == "PENDING" and entry is None):
            self.entries[key] = GreylistEntry(key, GreyState.PENDING, now, now, 0)
        elif kind == "PENDING":
            entry.last_seen = now
        elif kind == "CONFIRMED":
            if entry is None:
                entry = self.entries[key] = GreylistEntry(key, GreyState.PENDING, now, now, 0)
            entry.state = GreyState.CONFIRMED
            entry.last_seen = now
            entry.pass_count += 1
        else:
            raise ValueError(f"unknown greylist transition {kind!r}")

    def record(self, now: float, kind: str, key: GreyKey):
        if self.path is not None:
            if self._log is None:
                self._log = open(self.path, "a", encoding="utf-8")
            self._log.write(f"{fmt_time(now)}\t{kind}\t{key[0]}\t{key[1]}\t{key[2]}\n")
            self._log.flush()
        self.apply(now, kind, key)

    def prune(self, now: float) -> int:
        stale = [k for k, e in self.entries.items() if now - e.last_seen > self.expire_secs]
        for key in stale:
            del self.entries[key]
        return len(stale)

    def compact(self):
        """Rewrite the log so it holds only the live entries."""
        if self.path is None:
            return
        self.close()
        tmp = f"{self.path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for key, e in sorted(self.entries.items(), key=lambda kv: (kv[1].first_seen, kv[0])):
                fields = "\t".join(key)
                fh.write(f"{fmt_time(e.first_seen)}\tRESET\t{fields}\n")
                if e.state is GreyState.PENDING and e.last_seen != e.first_seen:
                    fh.write(f"{fmt_time(e.last_seen)}\tPENDING\t{fields}\n")
                for _ in range(e.pass_count):
                    fh.write(f"{fmt_time(e.last_seen)}\tCONFIRMED\t{fields}\n")
        os.replace(tmp, self.path)

    def close(self):
        if self._log is not None:
            self._log.close()
            self._log = None


def greylist_check(key: GreyKey, now: float, store: GreylistStore, min_delay: float = 10,
                   max_window: float = 12 * 3600) -> GreylistDecision:
    key = GreylistStore.make_key(*key)
    with store.lock_for(key):
        entry = store.entries.get(key)
        if entry is None:
            kind, decision = "PENDING", GreylistDecision.TEMP_REJECT
        elif entry.state is GreyState.CONFIRMED:
            kind, decision = "CONFIRMED", GreylistDecision.ACCEPT
        else:
            age = now - entry.first_seen
            if age < min_delay:
                kind, decision = "PENDING", GreylistDecision.TEMP_REJECT
            elif age <= max_window:
                kind, decision = "CONFIRMED", GreylistDecision.ACCEPT
            else:
                kind, decision = "RESET", GreylistDecision.TEMP_REJECT
        try:
            store.record(now, kind, key)
        except OSError as exc:
            log.warning("greylist store unavailable: %s", exc)
            return GreylistDecision.UNAVAILABLE
    return decision


# --- reverse DNS ----------------------------------------------------------

class RdnsResult(enum.Enum):
    OK = "Ok"
    NO_PTR = "NoPtr"
    HELO_MISMATCH = "HeloMismatch"
    UNAVAILABLE = "Unavailable"


def rdns_check(client_ip: str, helo_host: str, resolver: Resolver, timeout: float = DEFAULT_TIMEOUT) -> RdnsResult:
    answer = resolver.resolve(DnsQuestion(reverse_name(client_ip), RType.PTR), timeout)
    if answer.status is Status.NXDOMAIN or (answer.found and not answer.ptr_records):
        return RdnsResult.NO_PTR
    if not answer.found:
        return RdnsResult.UNAVAILABLE
    helo = helo_host.lower().rstrip(".")
    helo_domain = registered_domain(helo)
    for ptr in answer.ptr_records:
        ptr = ptr.lower().rstrip(".")
        if ptr == helo or registered_domain(ptr) == helo_domain:
            return RdnsResult.OK
    return RdnsResult.HELO_MISMATCH

