"""Layered filter pipeline, per-session statistics and corpus replay."""

from __future__ import annotations

import csv
import enum
import heapq
import io
import math
import os
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import bayes
from .content import (Action, AttachmentRule, ContentRule, DEFAULT_RULES, PolicyConfig, attachment_check,
                      content_match, policy_check)
from .dns import DEFAULT_TIMEOUT, Resolver
from .guard import AliasMode, AliasTable
from .message import EmailAddress, Envelope, Message, format_corpus_bytes
from .source_filters import (BlocklistConfig, GreylistDecision, GreylistStore, ListKind, RdnsResult, SpfResult,
                             dnsbl_check, greylist_check, rdns_check, spf_evaluate, surbl_check)


class Stage(enum.Enum):
    DNSBL = "Dnsbl"
    RDNS = "Rdns"
    GREYLIST = "Greylist"
    SPF = "Spf"
    SURBL = "Surbl"
    CONTENT = "Content"
    POLICY = "Policy"
    BAYES = "Bayes"


STAGES = tuple(Stage)
CONNECTION_STAGES = STAGES[:4]
DATA_STAGES = STAGES[4:]


class Decision(enum.Enum):
    PASS = "Pass"
    TEMP_REJECT = "TempReject"
    REJECT = "Reject"
    QUARANTINE = "Quarantine"
    SKIPPED = "Skipped"
    UNAVAILABLE = "Unavailable"


TERMINAL = (Decision.REJECT, Decision.TEMP_REJECT)


class Final(enum.Enum):
    DELIVERED = "Delivered"
    TEMP_REJECTED = "TempRejected"
    REJECTED = "Rejected"
    QUARANTINED = "Quarantined"


SMTP_CODES = {Final.DELIVERED: 250, Final.QUARANTINED: 250, Final.REJECTED: 550, Final.TEMP_REJECTED: 451}


@dataclass(frozen=True)
class StageOutcome:
    stage: Stage
    decision: Decision
    detail: str = ""


@dataclass(frozen=True)
class Verdict:
    final: Final
    outcomes: tuple[StageOutcome, ...]
    smtp_code: int
    received_at: float = 0.0

    @property
    def trap_stage(self) -> Stage | None:
        if self.final is not Final.QUARANTINED:
            return None
        for o in self.outcomes:
            if o.decision is Decision.QUARANTINE:
                return o.stage
        return None

    @property
    def terminal_outcome(self) -> StageOutcome | None:
        for o in self.outcomes:
            if o.decision in TERMINAL:
                return o
        return None

    def outcome(self, stage: Stage) -> StageOutcome:
        return self.outcomes[STAGES.index(stage)]


@dataclass
class PipelineConfig:
    enabled: frozenset[Stage] = frozenset(STAGES)
    dnsbl_lists: tuple[BlocklistConfig, ...] = ()
    dnsbl_threshold: int = 1
    surbl_lists: tuple[BlocklistConfig, ...] = ()
    surbl_threshold: int = 1
    surbl_max_domains: int = 10
    spf_reject_softfail: bool = True
    spf_max_dns: int = 10
    greylist_min_delay: float = 10
    greylist_max_window: float = 12 * 3600
    rdns_reject_no_ptr: bool = True
    rdns_reject_helo_mismatch: bool = False
    content_rules: tuple[ContentRule, ...] = DEFAULT_RULES
    attachment_rule: AttachmentRule = field(default_factory=AttachmentRule)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    group_ids: frozenset[EmailAddress] = frozenset()
    bayes_threshold: float = bayes.DEFAULT_THRESHOLD
    dns_timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        self.enabled = frozenset(self.enabled)
        self.group_ids = frozenset(self.group_ids)

    def without(self, *stages: Stage) -> "PipelineConfig":
        from dataclasses import replace
        return replace(self, enabled=self.enabled - set(stages))

    def only(self, *stages: Stage) -> "PipelineConfig":
        from dataclasses import replace
        return replace(self, enabled=frozenset(stages))


@dataclass
class Stores:
    greylist: GreylistStore = field(default_factory=GreylistStore)
    dictionary: bayes.BayesDictionary | None = None
    quarantined_hosts: set[str] = field(default_factory=set)
    aliases: AliasTable = field(default_factory=AliasTable)


def _disabled(stage):
    return StageOutcome(stage, Decision.PASS, "disabled")


def _dnsbl(env, config, stores, resolver):
    if env.client_ip in stores.quarantined_hosts:
        return StageOutcome(Stage.DNSBL, Decision.REJECT, "host quarantined by administrator")
    if Stage.DNSBL not in config.enabled:
        return _disabled(Stage.DNSBL)
    v = dnsbl_check(env.client_ip, config.dnsbl_lists, resolver, config.dnsbl_threshold, config.dns_timeout)
    hits = ",".join(n for n, s in v.per_list.items() if s.value == "Listed")
    if v.listed:
        return StageOutcome(Stage.DNSBL, Decision.REJECT, f"listed score={v.score} [{hits}]")
    if v.all_unavailable:
        return StageOutcome(Stage.DNSBL, Decision.UNAVAILABLE, "all lists unavailable")
    return StageOutcome(Stage.DNSBL, Decision.PASS, f"score={v.score}")


def _rdns(env, config, resolver):
    if Stage.RDNS not in config.enabled:
        return _disabled(Stage.RDNS)
    result = rdns_check(env.client_ip, env.helo_host, resolver, config.dns_timeout)
    if result is RdnsResult.UNAVAILABLE:
        return StageOutcome(Stage.RDNS, Decision.UNAVAILABLE, result.value)
    if (result is RdnsResult.NO_PTR and config.rdns_reject_no_ptr) or \
            (result is RdnsResult.HELO_MISMATCH and config.rdns_reject_helo_mismatch):
        return StageOutcome(Stage.RDNS, Decision.REJECT, result.value)
    return StageOutcome(Stage.RDNS, Decision.PASS, result.value)


def _greylist(env, now, config, stores):
    if Stage.GREYLIST not in config.enabled:
        return _disabled(Stage.GREYLIST)
    decisions = [
        greylist_check((env.client_ip, env.mail_from, rcpt), now, stores.greylist,
                       config.greylist_min_delay, config.greylist_max_window)
        for rcpt in env.rcpt_to
    ]
    if GreylistDecision.TEMP_REJECT in decisions:
        return StageOutcome(Stage.GREYLIST, Decision.TEMP_REJECT, "greylisted, try again later")
    if GreylistDecision.UNAVAILABLE in decisions:
        return StageOutcome(Stage.GREYLIST, Decision.UNAVAILABLE, "store unavailable")
    return StageOutcome(Stage.GREYLIST, Decision.PASS, "known triplet")


def _spf(env, config, resolver):
    if Stage.SPF not in config.enabled:
        return _disabled(Stage.SPF)
    result = spf_evaluate(env.client_ip, env.mail_from.domain, resolver, config.spf_max_dns, config.dns_timeout)
    if result is SpfResult.FAIL or (result is SpfResult.SOFTFAIL and config.spf_reject_softfail):
        return StageOutcome(Stage.SPF, Decision.REJECT, result.value)
    if result is SpfResult.TEMPERROR:
        return StageOutcome(Stage.SPF, Decision.UNAVAILABLE, result.value)
    # PermError is treated like Neutral
    return StageOutcome(Stage.SPF, Decision.PASS, result.value)


def run_connection_stages(env: Envelope, now: float, config: PipelineConfig, stores: Stores,
                          resolver: Resolver) -> list[StageOutcome]:
    """Envelope-only stages; stops at the first terminal decision."""
    outcomes = []
    steps = (
        lambda: _dnsbl(env, config, stores, resolver),
        lambda: _rdns(env, config, resolver),
        lambda: _greylist(env, now, config, stores),
        lambda: _spf(env, config, resolver),
    )
    for step in steps:
        outcome = step()
        outcomes.append(outcome)
        if outcome.decision in TERMINAL:
            break
    return outcomes


def _surbl(msg, config, resolver):
    if Stage.SURBL not in config.enabled:
        return _disabled(Stage.SURBL)
    v = surbl_check(msg, config.surbl_lists, resolver, config.surbl_threshold, config.surbl_max_domains,
                    config.dns_timeout)
    extra = f" skipped={v.skipped_domains}" if v.skipped_domains else ""
    if v.listed:
        return StageOutcome(Stage.SURBL, Decision.QUARANTINE, f"listed score={v.score}{extra}")
    if v.all_unavailable:
        return StageOutcome(Stage.SURBL, Decision.UNAVAILABLE, "all lists unavailable")
    return StageOutcome(Stage.SURBL, Decision.PASS, f"score={v.score}{extra}")


def _content(msg, config):
    if Stage.CONTENT not in config.enabled:
        return _disabled(Stage.CONTENT)
    fired = content_match(msg, config.content_rules)
    violations = attachment_check(msg, config.attachment_rule)
    detail = ",".join([rid for rid, _ in fired] + [v.value for v in violations])
    if any(action is Action.REJECT for _, action in fired):
        return StageOutcome(Stage.CONTENT, Decision.REJECT, detail)
    if fired or violations:
        return StageOutcome(Stage.CONTENT, Decision.QUARANTINE, detail)
    return StageOutcome(Stage.CONTENT, Decision.PASS)


def _policy(msg, config, stores):
    # retired group aliases apply whether or not the policy stage is enabled
    for rcpt in msg.envelope.rcpt_to:
        entry = stores.aliases.get(rcpt)
        if entry is not None:
            if entry.mode is AliasMode.BOUNCE_OLD:
                return StageOutcome(Stage.POLICY, Decision.REJECT, f"{rcpt} retired")
            return StageOutcome(Stage.POLICY, Decision.QUARANTINE, f"{rcpt} retired (silent)")
    if Stage.POLICY not in config.enabled:
        return _disabled(Stage.POLICY)
    violations = policy_check(msg, config.policy, config.group_ids)
    if violations:
        return StageOutcome(Stage.POLICY, Decision.QUARANTINE, ",".join(v.value for v in violations))
    return StageOutcome(Stage.POLICY, Decision.PASS)


def _bayes(msg, config, stores):
    if Stage.BAYES not in config.enabled:
        return _disabled(Stage.BAYES)
    if stores.dictionary is None:
        return StageOutcome(Stage.BAYES, Decision.PASS, "no dictionary")
    try:
        is_spam, score = bayes.classify(msg, stores.dictionary, config.bayes_threshold)
    except bayes.DictionaryEmpty:
        return StageOutcome(Stage.BAYES, Decision.UNAVAILABLE, "dictionary empty")
    detail = f"p={score.probability:.4f}"
    return StageOutcome(Stage.BAYES, Decision.QUARANTINE if is_spam else Decision.PASS, detail)


def run_data_stages(msg: Message, config: PipelineConfig, stores: Stores, resolver: Resolver) -> list[StageOutcome]:
    outcomes = []
    steps = (
        lambda: _surbl(msg, config, resolver),
        lambda: _content(msg, config),
        lambda: _policy(msg, config, stores),
        lambda: _bayes(msg, config, stores),
    )
    for step in steps:
        outcome = step()
        outcomes.append(outcome)
        if outcome.decision in TERMINAL:
            break
    return outcomes


def assemble_verdict(outcomes: Sequence[StageOutcome], received_at: float) -> Verdict:
    outcomes = list(outcomes)
    done = {o.stage for o in outcomes}
    for stage in STAGES:
        if stage not in done:
            outcomes.append(StageOutcome(stage, Decision.SKIPPED))
    outcomes.sort(key=lambda o: STAGES.index(o.stage))

    decisions = [o.decision for o in outcomes]
    if Decision.TEMP_REJECT in decisions:
        final = Final.TEMP_REJECTED
    elif Decision.REJECT in decisions:
        final = Final.REJECTED
    elif Decision.QUARANTINE in decisions:
        final = Final.QUARANTINED
    else:
        final = Final.DELIVERED
    return Verdict(final, tuple(outcomes), SMTP_CODES[final], received_at)


def run_pipeline(msg: Message, config: PipelineConfig, stores: Stores, resolver: Resolver) -> Verdict:
    outcomes = run_connection_stages(msg.envelope, msg.received_at, config, stores, resolver)
    if outcomes[-1].decision not in TERMINAL:
        outcomes += run_data_stages(msg, config, stores, resolver)
    return assemble_verdict(outcomes, msg.received_at)


# --- sessions -------------------------------------------------------------

SESSION_SECS = 3 * 3600
TRAP_COLUMNS = ("trap_dnsbl", "trap_rdns", "trap_spf", "trap_surbl", "trap_content", "trap_policy", "trap_bayes")
CSV_HEADER = ("session_start", "delivered", "trapped", "rejected") + TRAP_COLUMNS
_TRAP_STAGE = {
    Stage.DNSBL: "trap_dnsbl", Stage.RDNS: "trap_rdns", Stage.SPF: "trap_spf", Stage.SURBL: "trap_surbl",
    Stage.CONTENT: "trap_content", Stage.POLICY: "trap_policy", Stage.BAYES: "trap_bayes",
}


@dataclass
class SessionStats:
    session_start: float
    session_len: float = SESSION_SECS
    delivered: int = 0
    trapped: int = 0
    rejected: int = 0
    trapped_by_stage: dict[Stage, int] = field(default_factory=dict)

    def add(self, verdict: Verdict):
        if verdict.final is Final.DELIVERED:
            self.delivered += 1
        elif verdict.final is Final.QUARANTINED:
            self.trapped += 1
            stage = verdict.trap_stage
            self.trapped_by_stage[stage] = self.trapped_by_stage.get(stage, 0) + 1
        else:
            self.rejected += 1

    @property
    def total(self) -> int:
        return self.delivered + self.trapped + self.rejected

    def row(self) -> dict[str, int]:
        row = {"session_start": int(self.session_start), "delivered": self.delivered,
               "trapped": self.trapped, "rejected": self.rejected}
        for col in TRAP_COLUMNS:
            row[col] = 0
        for stage, n in self.trapped_by_stage.items():
            row[_TRAP_STAGE[stage]] += n
        return row


def record_session(verdicts: Iterable[Verdict], session_len: float = SESSION_SECS,
                   start: float | None = None) -> list[SessionStats]:
    """Bucket verdicts into consecutive fixed-length sessions by received_at.

    Sessions start at ``start`` (default: the earliest verdict); empty
    sessions between busy ones are kept so the timeline stays contiguous.
    """
    verdicts = list(verdicts)
    if not verdicts:
        return []
    if start is None:
        start = min(v.received_at for v in verdicts)
    buckets: dict[int, SessionStats] = {}
    for v in verdicts:
        idx = math.floor((v.received_at - start) / session_len)
        if idx < 0:
            raise ValueError("verdict precedes the session start")
        stats = buckets.get(idx)
        if stats is None:
            stats = buckets[idx] = SessionStats(start + idx * session_len, session_len)
        stats.add(v)
    last = max(buckets)
    return [buckets.get(i) or SessionStats(start + i * session_len, session_len) for i in range(last + 1)]


def write_session_csv(sessions: Sequence[SessionStats], fh, extra: dict[str, Sequence] | None = None):
    extra = extra or {}
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_HEADER + tuple(extra))
    for i, s in enumerate(sessions):
        row = s.row()
        writer.writerow([row[c] for c in CSV_HEADER] + [extra[k][i] for k in extra])


def session_csv_text(sessions: Sequence[SessionStats], extra=None) -> str:
    buf = io.StringIO()
    write_session_csv(sessions, buf, extra)
    return buf.getvalue()


class SchemaError(ValueError):
    pass


def read_session_csv(path) -> list[dict[str, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        if header[:len(CSV_HEADER)] != CSV_HEADER:
            raise SchemaError(f"{path}: header does not match the session report schema")
        rows = []
        for lineno, raw in enumerate(reader, 2):
            try:
                rows.append({k: int(v) for k, v in raw.items()})
            except (TypeError, ValueError):
                raise SchemaError(f"{path}:{lineno}: non-integer field") from None
        return rows


# --- corpus replay --------------------------------------------------------

@dataclass
class ReplayResult:
    source: Path | None
    message: Message
    verdict: Verdict
    attempts: int = 1


def replay(items: Iterable[tuple[Path | None, Message]], config: PipelineConfig, stores: Stores,
           resolver: Resolver, retry_secs: float = 300) -> list[ReplayResult]:
    """Run a corpus through the pipeline in received_at order.

    Corpus messages are mail that a real MTA eventually handed over, so a
    greylist 451 is followed by one retry ``retry_secs`` later (0 disables
    retries and keeps the TempRejected verdict).
    """
    queue = []
    for seq, (path, msg) in enumerate(items):
        heapq.heappush(queue, (msg.received_at, seq, 1, path, msg))
    results = []
    while queue:
        when, seq, attempt, path, msg = heapq.heappop(queue)
        verdict = run_pipeline(msg.at(when), config, stores, resolver)
        if verdict.final is Final.TEMP_REJECTED and attempt == 1 and retry_secs > 0:
            heapq.heappush(queue, (when + retry_secs, seq, attempt + 1, path, msg))
            continue
        results.append(ReplayResult(path, msg, verdict, attempt))
    results.sort(key=lambda r: (r.verdict.received_at, str(r.source)))
    return results


def maildir_deliver(root: str | os.PathLike, data: bytes, name: str | None = None) -> Path:
    """Write ``data`` into ``root/new`` via ``root/tmp`` (maildir style)."""
    root = Path(root)
    for sub in ("tmp", "new", "cur"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    name = name or f"{uuid.uuid4().hex}.eml"
    tmp = root / "tmp" / name
    tmp.write_bytes(data)
    final = root / "new" / name
    os.replace(tmp, final)
    return final


def deliver(result_msg: Message, verdict: Verdict, inbox, trap, name: str | None = None) -> Path | None:
    if verdict.final is Final.DELIVERED:
        return maildir_deliver(inbox, format_corpus_bytes(result_msg), name)
    if verdict.final is Final.QUARANTINED:
        return maildir_deliver(trap, format_corpus_bytes(result_msg), name)
    return None


def lists_of_kind(lists: Iterable[BlocklistConfig], kind: ListKind) -> tuple[BlocklistConfig, ...]:
    return tuple(bl for bl in lists if bl.kind is kind)
