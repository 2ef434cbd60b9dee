"""Traffic monitoring and administrator mitigations.

The monitor keeps per-window counters and raises three alert kinds:

* GroupMailStorm: one sender addressed group ids in ``storm_windows``
  consecutive windows (a worm mails every group once a minute).
* QueueSaturation: every queue sample in a closed window sat above
  ``saturation`` x capacity.
* LatencyDegradation: the rolling mean processing latency exceeds
  ``latency_factor`` x baseline.

Each (kind, subject) pair alerts at most once per window.
"""

from __future__ import annotations

import enum
import ipaddress
import os
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .message import EmailAddress


class AlertKind(enum.Enum):
    GROUP_MAIL_STORM = "GroupMailStorm"
    QUEUE_SATURATION = "QueueSaturation"
    LATENCY_DEGRADATION = "LatencyDegradation"


@dataclass(frozen=True)
class Alert:
    kind: AlertKind
    subject: str
    evidence: str
    raised_at: float

    def log_line(self) -> str:
        return f"{int(self.raised_at)}\t{self.kind.value}\t{self.subject}\t{self.evidence}"


@dataclass
class TrafficWindow:
    width: float = 60.0
    index: int | None = None
    per_sender: dict[str, int] = field(default_factory=dict)
    per_sender_group: dict[str, int] = field(default_factory=dict)
    queue_depth: int = 0


class Monitor:
    def __init__(self, width: float = 60.0, storm_windows: int = 3, capacity: int | None = None,
                 saturation: float = 0.8, latency_factor: float = 3.0, baseline_latency: float | None = None,
                 latency_samples: int = 20):
        self.window = TrafficWindow(width)
        self.storm_windows = storm_windows
        self.capacity = capacity
        self.saturation = saturation
        self.latency_factor = latency_factor
        self.baseline_latency = baseline_latency
        self._baseline_samples: list[float] = []
        self._latencies: deque[float] = deque(maxlen=latency_samples)
        self._group_windows: dict[str, deque[int]] = {}
        self._queue_min: float | None = None
        self._raised: set[tuple[AlertKind, str, int]] = set()
        self._lock = threading.Lock()

    def _index(self, now: float) -> int:
        return int(now // self.window.width)

    def _raise(self, kind, subject, evidence, now, index) -> list[Alert]:
        key = (kind, subject, index)
        if key in self._raised:
            return []
        self._raised.add(key)
        return [Alert(kind, subject, evidence, now)]

    def tick(self, now: float) -> list[Alert]:
        """Advance to ``now``, closing finished windows."""
        with self._lock:
            return self._advance(now)

    def _advance(self, now: float) -> list[Alert]:
        index = self._index(now)
        w = self.window
        alerts = []
        if w.index is None:
            w.index = index
        elif index > w.index:
            threshold = None if self.capacity is None else self.saturation * self.capacity
            if threshold is not None and self._queue_min is not None and self._queue_min > threshold:
                alerts += self._raise(AlertKind.QUEUE_SATURATION, "server",
                                      f"queue above {threshold:g} for window {w.index}", now, w.index)
            w.index = index
            w.per_sender = {}
            w.per_sender_group = {}
            self._queue_min = None
            # forget dedup keys from windows nobody can revisit
            self._raised = {k for k in self._raised if k[2] >= index - 1}
        return alerts

    def set_queue_depth(self, depth: int, now: float) -> list[Alert]:
        with self._lock:
            alerts = self._advance(now)
            self.window.queue_depth = depth
            self._queue_min = depth if self._queue_min is None else min(self._queue_min, depth)
            return alerts

    def observe(self, sender: str, to_group: bool, now: float, latency: float | None = None,
                queue_depth: int | None = None) -> list[Alert]:
        with self._lock:
            alerts = self._advance(now)
            w = self.window
            index = w.index
            sender = sender.lower()
            w.per_sender[sender] = w.per_sender.get(sender, 0) + 1
            if queue_depth is not None:
                w.queue_depth = queue_depth
                self._queue_min = queue_depth if self._queue_min is None else min(self._queue_min, queue_depth)

            if to_group:
                w.per_sender_group[sender] = w.per_sender_group.get(sender, 0) + 1
                hist = self._group_windows.setdefault(sender, deque(maxlen=self.storm_windows))
                if not hist or hist[-1] != index:
                    hist.append(index)
                if len(hist) == self.storm_windows and hist[-1] - hist[0] == self.storm_windows - 1:
                    alerts += self._raise(AlertKind.GROUP_MAIL_STORM, sender,
                                          f"group mail in {self.storm_windows} consecutive windows", now, index)

            if latency is not None:
                if self.baseline_latency is None:
                    self._baseline_samples.append(latency)
                    if len(self._baseline_samples) >= self._latencies.maxlen:
                        self.baseline_latency = sum(self._baseline_samples) / len(self._baseline_samples)
                else:
                    self._latencies.append(latency)
                    mean = sum(self._latencies) / len(self._latencies)
                    if mean > self.baseline_latency * self.latency_factor:
                        alerts += self._raise(AlertKind.LATENCY_DEGRADATION, "server",
                                              f"mean latency {mean:.4g}s vs baseline {self.baseline_latency:.4g}s",
                                              now, index)
            return alerts


def observe(event, window_monitor: Monitor, group_ids: Iterable[EmailAddress] = (),
            latency: float | None = None, queue_depth: int | None = None) -> list[Alert]:
    """Feed one processed message (a Message, or anything with an ``envelope``) to the monitor."""
    groups = {str(g).lower() for g in group_ids}
    env = event.envelope
    to_group = any(str(r).lower() in groups for r in env.rcpt_to)
    return window_monitor.observe(str(env.mail_from), to_group, event.received_at, latency, queue_depth)


# --- mitigation -----------------------------------------------------------

class AliasMode(enum.Enum):
    BOUNCE_OLD = "BounceOld"
    SILENT_DROP_OLD = "SilentDropOld"


@dataclass(frozen=True)
class AliasEntry:
    new: EmailAddress
    remapped_at: float
    mode: AliasMode = AliasMode.BOUNCE_OLD


class AlreadyRemapped(ValueError):
    pass


SUFFIX_WORDS = ("staff", "team", "users", "group", "members", "list", "dept", "office", "admins", "employees")


class AliasTable(dict):
    """old address -> AliasEntry.  No chains: a new address is never an old key."""

    def lookup(self, addr: EmailAddress) -> AliasEntry | None:
        return self.get(addr)

    def check_acyclic(self) -> bool:
        olds = set(self)
        return all(e.new not in olds and e.new != old for old, e in self.items())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for old, e in self.items():
                fh.write(f"{old}\t{e.new}\t{int(e.remapped_at)}\t{e.mode.value}\n")

    @classmethod
    def load(cls, path) -> "AliasTable":
        table = cls()
        if not os.path.exists(path):
            return table
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
                old, new, stamp, mode = parts
                table[EmailAddress.parse(old)] = AliasEntry(EmailAddress.parse(new), float(stamp), AliasMode(mode))
        return table


def _split_local(local: str) -> str:
    lowered = local.lower()
    for word in sorted(SUFFIX_WORDS, key=len, reverse=True):
        if lowered.endswith(word) and len(local) > len(word) and not local[:-len(word)].endswith("_"):
            return f"{local[:-len(word)]}_{local[-len(word):]}"
    return local + "_"


def remap_group(old: EmailAddress, table: AliasTable, now: float, mode: AliasMode = AliasMode.BOUNCE_OLD,
                group_ids: Iterable[EmailAddress] | None = None) -> EmailAddress:
    if group_ids is not None and old not in set(group_ids):
        raise ValueError(f"{old} is not a configured group id")
    if old in table:
        raise AlreadyRemapped(str(old))

    local = _split_local(old.local_part)
    new = EmailAddress(local, old.domain)
    taken = set(table) | {e.new for e in table.values()} | {old}
    while new in taken:
        local += "_"
        new = EmailAddress(local, old.domain)

    # remapping a previous alias target re-points its predecessors, keeping the table chain-free
    for prev, e in list(table.items()):
        if e.new == old:
            table[prev] = AliasEntry(new, e.remapped_at, e.mode)
    table[old] = AliasEntry(new, now, mode)
    return new


def quarantine_host(ip: str, reason: Alert | str | None, blocklist: set[str]) -> None:
    blocklist.add(str(ipaddress.IPv4Address(ip)))


def release_host(ip: str, blocklist: set[str]) -> None:
    blocklist.discard(str(ipaddress.IPv4Address(ip)))


# --- persisted state for the CLI -----------------------------------------

@dataclass
class GuardState:
    """Alias table, quarantined hosts and the alert log under one directory."""

    directory: Path
    aliases: AliasTable = field(default_factory=AliasTable)
    quarantined: dict[str, str] = field(default_factory=dict)

    @property
    def alias_path(self) -> Path:
        return self.directory / "aliases.tsv"

    @property
    def quarantine_path(self) -> Path:
        return self.directory / "quarantine.tsv"

    @property
    def alert_path(self) -> Path:
        return self.directory / "alerts.log"

    @classmethod
    def load(cls, directory) -> "GuardState":
        directory = Path(directory)
        state = cls(directory)
        state.aliases = AliasTable.load(state.alias_path)
        if state.quarantine_path.exists():
            for line in state.quarantine_path.read_text(encoding="utf-8").splitlines():
                if line:
                    ip, _, reason = line.partition("\t")
                    state.quarantined[ip] = reason
        return state

    def save(self):
        self.directory.mkdir(parents=True, exist_ok=True)
        self.aliases.save(self.alias_path)
        with open(self.quarantine_path, "w", encoding="utf-8") as fh:
            for ip, reason in sorted(self.quarantined.items()):
                fh.write(f"{ip}\t{reason}\n")

    def log_alerts(self, alerts: Iterable[Alert]):
        alerts = list(alerts)
        if not alerts:
            return
        self.directory.mkdir(parents=True, exist_ok=True)
        with open(self.alert_path, "a", encoding="utf-8") as fh:
            for alert in alerts:
                fh.write(alert.log_line() + "\n")

    def recent_alerts(self, limit: int = 20) -> list[str]:
        if not self.alert_path.exists():
            return []
        return self.alert_path.read_text(encoding="utf-8").splitlines()[-limit:]
