"""Content filter rules, attachment signatures and enforceable mail policy."""

from __future__ import annotations

import enum
import fcntl
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .message import EmailAddress, Message

log = logging.getLogger(__name__)

KB = 1024


class Target(enum.Enum):
    SUBJECT = "subject"
    BODY = "body"
    ATTACHMENT_NAME = "attachment"


class Action(enum.Enum):
    REJECT = "reject"
    QUARANTINE = "quarantine"


@dataclass(frozen=True)
class ContentRule:
    id: str
    target: Target
    patterns: tuple[str, ...]
    action: Action = Action.QUARANTINE

    def __post_init__(self):
        if not self.patterns or not all(self.patterns):
            raise ValueError(f"rule {self.id!r} needs non-empty patterns")
        object.__setattr__(self, "patterns", tuple(p.lower() for p in self.patterns))


class Violation(enum.Enum):
    BLOCKED_EXTENSION = "BlockedExtension"
    DOUBLE_EXTENSION = "DoubleExtension"
    SUSPICIOUS_SIZE = "SuspiciousSize"
    GROUP_SEND_DENIED = "GroupSendDenied"
    TOO_MANY_RECIPIENTS = "TooManyRecipients"
    ATTACHMENT_TOO_LARGE = "AttachmentTooLarge"


EXECUTABLE_EXTENSIONS = frozenset({"exe", "scr", "pif", "bat", "com"})


@dataclass(frozen=True)
class AttachmentRule:
    blocked_extensions: frozenset[str] = EXECUTABLE_EXTENSIONS
    block_double_extension: bool = True
    flag_size_range: tuple[int, int] | None = (140 * KB, 180 * KB)

    def __post_init__(self):
        object.__setattr__(self, "blocked_extensions",
                           frozenset(e.lower().lstrip(".") for e in self.blocked_extensions))
        if self.flag_size_range is not None:
            lo, hi = self.flag_size_range
            if lo > hi:
                raise ValueError("flag_size_range min exceeds max")


@dataclass
class PolicyConfig:
    group_send_allowlist: dict[str, set[str]] = field(default_factory=dict)
    max_rcpt_per_message: int = 50
    max_attachment_bytes: int = 10 * 1024 * KB
    trap_retention_days: int = 30

    def __post_init__(self):
        if min(self.max_rcpt_per_message, self.max_attachment_bytes, self.trap_retention_days) < 1:
            raise ValueError("policy bounds must be >= 1")


DEFAULT_RULES = (
    ContentRule("ddos-subjects", Target.SUBJECT, ("test", "server report", "status", "helo")),
    ContentRule("spam-words", Target.BODY, ("viagra", "install updates", "customer support service")),
)


def _fires(rule: ContentRule, msg: Message) -> bool:
    if rule.target is Target.SUBJECT:
        fields = [msg.subject]
    elif rule.target is Target.BODY:
        fields = [msg.body_text]
    else:
        fields = [a.filename for a in msg.attachments]
    return any(p in f.lower() for f in fields for p in rule.patterns)


def content_match(msg: Message, rules: Sequence[ContentRule]) -> list[tuple[str, Action]]:
    return [(rule.id, rule.action) for rule in rules if _fires(rule, msg)]


def _extensions(filename: str) -> list[str]:
    base = filename.rsplit("/", 1)[-1]
    return [part.lower() for part in base.split(".")[1:]]


def attachment_check(msg: Message, rule: AttachmentRule) -> list[Violation]:
    found = set()
    for att in msg.attachments:
        exts = _extensions(att.filename)
        if exts and exts[-1] in rule.blocked_extensions:
            found.add(Violation.BLOCKED_EXTENSION)
        if rule.block_double_extension and len(exts) >= 2 and exts[-1] in EXECUTABLE_EXTENSIONS:
            found.add(Violation.DOUBLE_EXTENSION)
        if rule.flag_size_range is not None:
            lo, hi = rule.flag_size_range
            if lo <= att.size_bytes <= hi:
                found.add(Violation.SUSPICIOUS_SIZE)
    return [v for v in Violation if v in found]


def policy_check(msg: Message, policy: PolicyConfig, group_ids: Iterable[EmailAddress]) -> list[Violation]:
    groups = {str(g).lower() for g in group_ids}
    sender = str(msg.envelope.mail_from).lower()
    found = []
    for rcpt in msg.envelope.rcpt_to:
        addr = str(rcpt).lower()
        if addr in groups and sender not in {a.lower() for a in policy.group_send_allowlist.get(addr, ())}:
            found.append(Violation.GROUP_SEND_DENIED)
            break
    if len(msg.envelope.rcpt_to) > policy.max_rcpt_per_message:
        found.append(Violation.TOO_MANY_RECIPIENTS)
    if any(a.size_bytes > policy.max_attachment_bytes for a in msg.attachments):
        found.append(Violation.ATTACHMENT_TOO_LARGE)
    return found


def prune_trap(trap_dir: str | os.PathLike, now: float, retention_days: int) -> int:
    """Delete trapped messages older than the retention period; return how many went."""
    trap_dir = Path(trap_dir)
    if not trap_dir.is_dir():
        raise FileNotFoundError(trap_dir)
    cutoff = now - retention_days * 86400
    deleted = 0
    with open(trap_dir / ".prune.lock", "w") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        for path in sorted(trap_dir.rglob("*")):
            if not path.is_file() or path.name.startswith("."):
                continue
            try:
                if path.stat().st_mtime < cutoff:
                    path.unlink()
                    deleted += 1
            except OSError as exc:
                log.error("cannot prune %s: %s", path, exc)
    return deleted


# --- rules file -----------------------------------------------------------

def parse_rules(lines: Iterable[str]) -> list[ContentRule]:
    """Parse ``<id>|<target>|<action>|<pattern>[,<pattern>...]`` lines.

    Patterns are separated by commas; a pattern may itself contain spaces
    ("server report").
    """
    rules = []
    seen = set()
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("|", 3)
        if len(parts) != 4:
            raise ValueError(f"rules line {lineno}: expected 4 '|'-separated fields")
        rule_id, target, action, patterns = (p.strip() for p in parts)
        if rule_id in seen:
            raise ValueError(f"rules line {lineno}: duplicate rule id {rule_id!r}")
        seen.add(rule_id)
        try:
            rules.append(ContentRule(
                rule_id,
                Target(target.lower()),
                tuple(p.strip() for p in patterns.split(",") if p.strip()),
                Action(action.lower()),
            ))
        except ValueError as exc:
            raise ValueError(f"rules line {lineno}: {exc}") from None
    return rules


def load_rules(path: str | os.PathLike) -> list[ContentRule]:
    with open(path, encoding="utf-8") as fh:
        return parse_rules(fh)
