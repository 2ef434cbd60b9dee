"""Minute-stepped simulation of a group-mail worm outbreak against the pipeline.

Each minute:

1. every infected user mails every group id once (faked internal sender,
   double-extension .exe of 140-180 KB, a URL on the listed download site,
   a rotating innocuous subject); background spam arrives at a fixed rate;
2. arrivals join a FIFO queue holding at most ``queue_limit + queue_burst``
   messages; the rest are refused and counted as rejected;
3. the server takes ``server_capacity`` messages off the queue and runs each
   through the real pipeline;
4. each delivered worm message reaches the group's members, and every
   uninfected member runs the attachment with probability ``p_exec``;
5. the server is in a DoS condition once the queue has stayed above
   ``queue_limit`` for five consecutive minutes.

Per minute, ``emitted = delivered + trapped + rejected + (queue_after - queue_before)``.
"""

from __future__ import annotations

import csv
import io
import random
from collections import deque
from dataclasses import dataclass, field, replace

from .content import DEFAULT_RULES, AttachmentRule, PolicyConfig
from .dns import StaticZone
from .guard import AlertKind, AliasMode, AliasTable, Monitor, remap_group
from .message import Attachment, EmailAddress, Envelope, Message
from .pipeline import (CSV_HEADER, STAGES, Final, PipelineConfig, SessionStats, Stage, Stores, run_pipeline)
from .source_filters import BlocklistConfig, GreylistStore, ListKind

DOS_MINUTES = 5
WORM_SUBJECTS = ("test", "server report", "status", "helo")
WORM_ATTACHMENT = "Update_KB2546_*86.BAK.exe"
WORM_SIZE_RANGE = (140 * 1024, 180 * 1024)
WORM_HOSTS = ("www2", "www3", "www4", "www6")
WORM_DOMAIN = "xtinmdesachlion.com"
SPAM_LISTED_DOMAIN = "cheap-pills.example"
GATEWAY_IP = "192.0.2.25"
PROFILES = {"educated": 0.05, "untrained": 0.5}


@dataclass
class SimConfig:
    n_users: int = 200
    n_groups: int = 20
    group_membership: dict[int, frozenset[int]] | None = None
    p_exec: float = 0.5
    server_capacity: int = 50
    queue_limit: int = 500
    queue_burst: int = 500
    seed: int = 42
    defenses: frozenset[Stage] = frozenset(STAGES)
    duration_minutes: int = 900
    background_spam_rate: int = 2
    background_filterable_fraction: float = 0.6
    seed_infections: int = 1
    session_minutes: int = 180
    # stage -> ((first, last), ...) 1-based inclusive session ranges with the stage off
    disabled_sessions: dict[Stage, tuple[tuple[int, int], ...]] = field(default_factory=dict)
    remap_minute: int | None = None
    auto_mitigate: bool = False
    spammer_retry: bool = True
    domain: str = "corp.example"

    def __post_init__(self):
        if self.n_users < 1 or self.n_groups < 1:
            raise ValueError("need at least one user and one group")
        if self.server_capacity < 1 or self.queue_limit < 1 or self.queue_burst < 0:
            raise ValueError("capacities must be >= 1")
        if not 0 <= self.p_exec <= 1 or not 0 <= self.background_filterable_fraction <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.session_minutes < 1:
            raise ValueError("session_minutes must be >= 1")
        self.defenses = frozenset(self.defenses)

    def stages_at(self, minute: int) -> frozenset[Stage]:
        session = minute // self.session_minutes + 1
        off = {stage for stage, ranges in self.disabled_sessions.items()
               if any(a <= session <= b for a, b in ranges)}
        return self.defenses - off


def parse_disabled_sessions(text: str) -> dict[Stage, tuple[tuple[int, int], ...]]:
    """``surbl:3-7;content:2`` -> {Stage.SURBL: ((3, 7),), Stage.CONTENT: ((2, 2),)}"""
    by_name = {s.value.lower(): s for s in STAGES}
    out: dict[Stage, list] = {}
    for item in filter(None, (p.strip() for p in text.split(";"))):
        name, sep, span = item.partition(":")
        if not sep or name.strip().lower() not in by_name:
            raise ValueError(f"expected stage:first-last, got {item!r}")
        first, _, last = span.partition("-")
        out.setdefault(by_name[name.strip().lower()], []).append((int(first), int(last or first)))
    return {k: tuple(v) for k, v in out.items()}


@dataclass
class World:
    users: list[EmailAddress]
    hosts: list[tuple[str, str]]  # (ip, hostname)
    groups: list[EmailAddress]
    members: list[list[int]]
    zone: StaticZone
    base_config: PipelineConfig


def _group_name(j: int) -> str:
    return "allstaff" if j == 0 else f"dept{j:02d}staff"


def build_world(cfg: SimConfig) -> World:
    users = [EmailAddress(f"user{i:03d}", cfg.domain) for i in range(cfg.n_users)]
    hosts = [(f"10.{1 + i // 62500}.{(i // 250) % 250}.{i % 250 + 1}", f"pc{i:03d}.{cfg.domain}")
             for i in range(cfg.n_users)]
    groups = [EmailAddress(_group_name(j), cfg.domain) for j in range(cfg.n_groups)]
    if cfg.group_membership is not None:
        members = [sorted(cfg.group_membership.get(j, ())) for j in range(cfg.n_groups)]
    else:
        members = [[] for _ in range(cfg.n_groups)]
        for i in range(cfg.n_users):
            members[i * cfg.n_groups // cfg.n_users].append(i)

    lines = [f"{cfg.domain} TXT v=spf1 ip4:{GATEWAY_IP} -all"]
    for ip, name in hosts:
        octets = ip.split(".")
        lines.append(f"{'.'.join(reversed(octets))}.in-addr.arpa PTR {name}")
    for k in range(1, 251):
        lines.append(f"{k}.100.51.198.in-addr.arpa PTR mx{k}.bulk-sender.example")
    for domain in (WORM_DOMAIN, SPAM_LISTED_DOMAIN):
        lines.append(f"{domain}.ws.surbl.test A 127.0.0.2")
    zone = StaticZone.from_lines(lines)

    base = PipelineConfig(
        dnsbl_lists=(BlocklistConfig("local", "bl.test", ListKind.IP),),
        surbl_lists=tuple(BlocklistConfig(n, f"{n}.surbl.test", ListKind.DOMAIN) for n in ("sc", "ws", "ob", "ab")),
        content_rules=DEFAULT_RULES,
        attachment_rule=AttachmentRule(),
        policy=PolicyConfig(),
        group_ids=frozenset(groups),
    )
    return World(users, hosts, groups, members, zone, base)


@dataclass
class SimMessage:
    msg: Message
    kind: str  # "worm" or "spam"
    listed_url: bool
    group: int | None = None
    sender_user: int | None = None


@dataclass
class MinuteRecord:
    minute: int
    emitted: int
    delivered: int
    trapped: int
    rejected: int
    queue_before: int
    queue_after: int
    infected: int
    dos_active: bool
    worm_delivered: int


@dataclass
class SimSession(SessionStats):
    dos_active: bool = False
    emitted: int = 0
    worm_delivered: int = 0
    listed_delivered: int = 0
    listed_trapped: int = 0


@dataclass
class SimReport:
    config: SimConfig
    sessions: list[SimSession]
    timeline: list[MinuteRecord]
    infected: frozenset[int]
    dos_first_minute: int | None
    alerts: list = field(default_factory=list)
    worm_messages_delivered: int = 0

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER + ("dos_active",))
        for s in self.sessions:
            row = s.row()
            writer.writerow([row[c] for c in CSV_HEADER] + [int(s.dos_active)])
        return buf.getvalue()


@dataclass
class SimState:
    minute: int = 0
    infected: set[int] = field(default_factory=set)
    queue: deque = field(default_factory=deque)
    over_limit_streak: int = 0
    dos_active: bool = False
    background_sent: int = 0
    retries: list = field(default_factory=list)
    aliases: AliasTable = field(default_factory=AliasTable)
    remapped: bool = False


class Simulation:
    def __init__(self, config: SimConfig, rng: random.Random | None = None):
        self.config = config
        self.rng = rng if rng is not None else random.Random(config.seed)
        self.world = build_world(config)
        self.state = SimState()
        self.stores = Stores(greylist=GreylistStore(), aliases=self.state.aliases)
        self.monitor = Monitor(width=60, storm_windows=3) if config.auto_mitigate else None
        self.timeline: list[MinuteRecord] = []
        self.sessions: list[SimSession] = []
        self.alerts = []
        self.worm_delivered_total = 0
        seeds = min(config.seed_infections, config.n_users)
        self.state.infected.update(self.rng.sample(range(config.n_users), seeds))

    # -- message factories -------------------------------------------------

    def _worm_message(self, user: int, group: int, minute: int) -> SimMessage:
        ip, host = self.world.hosts[user]
        sender = EmailAddress("administrator", self.config.domain)
        url_host = WORM_HOSTS[(user + minute) % len(WORM_HOSTS)]
        subject = WORM_SUBJECTS[(user + minute) % len(WORM_SUBJECTS)]
        size = self.rng.randint(*WORM_SIZE_RANGE)
        body = (f"Dear colleague,\nplease run the attached antivirus update immediately.\n"
                f"Mirror: http://{url_host}.{WORM_DOMAIN}/kb{minute}{user}\nref {minute}-{user}-{group}\n")
        env = Envelope(host, ip, sender, (self.world.groups[group],))
        msg = Message(env, subject, sender, body, (Attachment(WORM_ATTACHMENT, size, "application/octet-stream"),),
                      minute * 60.0)
        return SimMessage(msg, "worm", True, group, user)

    def _spam_message(self, minute: int) -> SimMessage:
        k = self.state.background_sent
        self.state.background_sent += 1
        f = self.config.background_filterable_fraction
        # exact running proportion instead of a random draw
        filterable = int((k + 1) * f) > int(k * f)
        rcpt = self.world.users[self.rng.randrange(self.config.n_users)]
        octet = k % 250 + 1
        env = Envelope(f"mx{octet}.bulk-sender.example", f"198.51.100.{octet}",
                       EmailAddress(f"offers{k}", "bulk-sender.example"), (rcpt,))
        if filterable:
            body = f"Limited offer number {k}. Order now at http://shop.{SPAM_LISTED_DOMAIN}/o/{k}\n"
        else:
            body = f"Limited offer number {k}. Reply to this message to order.\n"
        msg = Message(env, f"Weekly offer {k}", env.mail_from, body, (), minute * 60.0)
        return SimMessage(msg, "spam", filterable)

    # -- stepping ----------------------------------------------------------

    def _session_for(self, minute: int) -> SimSession:
        idx = minute // self.config.session_minutes
        while len(self.sessions) <= idx:
            n = len(self.sessions)
            span = self.config.session_minutes * 60.0
            self.sessions.append(SimSession(n * span, span))
        return self.sessions[idx]

    def _remap_all(self, minute: int):
        for group in self.world.groups:
            if group not in self.state.aliases:
                remap_group(group, self.state.aliases, minute * 60.0, AliasMode.BOUNCE_OLD)
        self.state.remapped = True

    def step(self) -> MinuteRecord:
        cfg, st, world = self.config, self.state, self.world
        minute = st.minute
        if minute >= cfg.duration_minutes:
            raise RuntimeError("simulation already finished")
        session = self._session_for(minute)
        if cfg.remap_minute is not None and minute == cfg.remap_minute and not st.remapped:
            self._remap_all(minute)

        # 1-2: arrivals; worm mail is built lazily so refused copies cost nothing
        queue_before = len(st.queue)
        room = cfg.queue_limit + cfg.queue_burst - queue_before
        retries, st.retries = st.retries, []
        arrivals = [lambda m=m: m for m in retries]
        arrivals += [lambda m=self._spam_message(minute): m for _ in range(cfg.background_spam_rate)]
        for user in sorted(st.infected):
            for group in range(cfg.n_groups):
                arrivals.append(lambda u=user, g=group: self._worm_message(u, g, minute))
        emitted = len(arrivals)
        refused = max(0, emitted - room)
        for make in arrivals[:emitted - refused]:
            st.queue.append(make())

        delivered = trapped = worm_delivered = 0
        rejected = refused

        # 3: process
        pcfg = replace(world.base_config, enabled=cfg.stages_at(minute))
        newly = set()
        for _ in range(min(cfg.server_capacity, len(st.queue))):
            item = st.queue.popleft()
            msg = item.msg.at(minute * 60.0)
            verdict = run_pipeline(msg, pcfg, self.stores, world.zone)
            if self.monitor is not None:
                to_group = item.kind == "worm"
                for alert in self.monitor.observe(str(msg.envelope.mail_from), to_group, minute * 60.0):
                    self.alerts.append(alert)
                    if alert.kind is AlertKind.GROUP_MAIL_STORM and not st.remapped:
                        self._remap_all(minute)
            if verdict.final is Final.DELIVERED:
                delivered += 1
                if item.listed_url:
                    session.listed_delivered += 1
                if item.kind == "worm":
                    worm_delivered += 1
                    # 4: infection
                    for member in world.members[item.group]:
                        if member not in st.infected and member not in newly and self.rng.random() < cfg.p_exec:
                            newly.add(member)
            elif verdict.final is Final.QUARANTINED:
                trapped += 1
                if item.listed_url:
                    session.listed_trapped += 1
            else:
                rejected += 1
                if verdict.final is Final.TEMP_REJECTED and item.kind == "spam" and cfg.spammer_retry:
                    st.retries.append(item)
            session.add(verdict)
        session.rejected += refused
        session.emitted += emitted
        session.worm_delivered += worm_delivered
        self.worm_delivered_total += worm_delivered
        st.infected |= newly

        # 5: overload bookkeeping
        st.over_limit_streak = st.over_limit_streak + 1 if len(st.queue) > cfg.queue_limit else 0
        st.dos_active = st.over_limit_streak >= DOS_MINUTES
        session.dos_active |= st.dos_active

        record = MinuteRecord(minute, emitted, delivered, trapped, rejected, queue_before, len(st.queue),
                              len(st.infected), st.dos_active, worm_delivered)
        self.timeline.append(record)
        st.minute += 1
        return record

    def run(self) -> SimReport:
        while self.state.minute < self.config.duration_minutes:
            self.step()
        first_dos = next((r.minute for r in self.timeline if r.dos_active), None)
        return SimReport(self.config, self.sessions, self.timeline, frozenset(self.state.infected), first_dos,
                         self.alerts, self.worm_delivered_total)


def step(sim: Simulation) -> MinuteRecord:
    return sim.step()


def run_experiment(config: SimConfig) -> SimReport:
    return Simulation(config).run()


def sim_config_from_app(cfg) -> SimConfig:
    """Build a SimConfig from an AppConfig's ``sim.*`` keys."""
    p_exec = PROFILES.get(cfg["sim.profile"], cfg["sim.p_exec"])
    remap = cfg["sim.remap_minute"]
    return SimConfig(
        n_users=cfg["sim.n_users"],
        n_groups=cfg["sim.n_groups"],
        p_exec=p_exec,
        server_capacity=cfg["sim.server_capacity"],
        queue_limit=cfg["sim.queue_limit"],
        queue_burst=cfg["sim.queue_burst"],
        seed=cfg["sim.seed"],
        defenses=cfg["sim.defenses"],
        duration_minutes=cfg["sim.duration_minutes"],
        background_spam_rate=cfg["sim.background_spam_rate"],
        background_filterable_fraction=cfg["sim.background_filterable_fraction"],
        seed_infections=cfg["sim.seed_infections"],
        session_minutes=cfg["sim.session_minutes"],
        disabled_sessions=parse_disabled_sessions(cfg["sim.disabled_sessions"]),
        remap_minute=None if remap < 0 else remap,
        auto_mitigate=cfg["guard.auto_mitigate"],
        domain=cfg["sim.domain"],
    )
