"""INI-style configuration with a closed, documented key set.

Every key lives under a section (``[greylist]`` + ``min_delay_secs`` is
addressed as ``greylist.min_delay_secs``).  Unknown keys are an error.
"""

from __future__ import annotations

import configparser
import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from .content import AttachmentRule, DEFAULT_RULES, PolicyConfig, load_rules
from .dns import MemoResolver, StaticZone, UdpResolver
from .guard import AliasMode, GuardState
from .message import EmailAddress
from .pipeline import STAGES, PipelineConfig, Stage, Stores
from .source_filters import BlocklistConfig, GreylistStore, ListKind
from . import bayes


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _lists(kind: ListKind) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple[BlocklistConfig, ...]:
        out = []
        for item in filter(None, (p.strip() for p in text.split(","))):
            parts = item.split(":")
            if len(parts) not in (2, 3):
                raise ValueError(f"expected name:zone:weight, got {item!r}")
            weight = int(parts[2]) if len(parts) == 3 else 1
            out.append(BlocklistConfig(parts[0], parts[1], kind, weight))
        return tuple(out)
    return parse


def _csv(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _size_range(text: str) -> tuple[int, int] | None:
    if not text.strip():
        return None
    lo, _, hi = text.partition("-")
    return int(lo), int(hi)


def _stages(text: str) -> frozenset[Stage]:
    text = text.strip().lower()
    if text == "all":
        return frozenset(STAGES)
    if text in ("", "none"):
        return frozenset()
    by_name = {s.value.lower(): s for s in STAGES}
    try:
        return frozenset(by_name[name] for name in _csv(text))
    except KeyError as exc:
        raise ValueError(f"unknown stage {exc.args[0]!r}") from None


def _group_allow(text: str) -> dict[str, set[str]]:
    out = {}
    for item in filter(None, (p.strip() for p in text.split(";"))):
        group, sep, senders = item.partition("=")
        if not sep:
            raise ValueError(f"expected group=sender|sender, got {item!r}")
        out[group.strip().lower()] = {s.strip().lower() for s in senders.split("|") if s.strip()}
    return out


DEFAULT_DNSBL = ("spamhaus:zen.spamhaus.org:1,spamcop:bl.spamcop.net:1,"
                 "sorbs:dnsbl.sorbs.net:1,abuseat:cbl.abuseat.org:1")
DEFAULT_SURBL = "sc:sc.surbl.org:1,ws:ws.surbl.org:1,ob:ob.surbl.org:1,ab:ab.surbl.org:1"

# key -> (default text, parser, help)
KEYS: dict[str, tuple[str, Callable[[str], Any], str]] = {
    "dns.server": ("", str, "ip[:port] of the UDP resolver; empty = /etc/resolv.conf"),
    "dns.timeout_secs": ("2", float, "per-query timeout"),
    "dns.retries": ("1", int, "retries after a timeout"),

    "dnsbl.enabled": ("true", _bool, "run the DNSBL stage"),
    "dnsbl.lists": (DEFAULT_DNSBL, _lists(ListKind.IP), "name:zone:weight triples"),
    "dnsbl.threshold": ("1", int, "weighted score that blocks"),

    "surbl.enabled": ("true", _bool, "run the SURBL stage"),
    "surbl.lists": (DEFAULT_SURBL, _lists(ListKind.DOMAIN), "name:zone:weight triples"),
    "surbl.threshold": ("1", int, "weighted score that blocks"),
    "surbl.max_domains": ("10", int, "distinct domains queried per message"),

    "spf.enabled": ("true", _bool, "run the SPF stage"),
    "spf.reject_softfail": ("true", _bool, "reject on ~all as well as -all"),
    "spf.max_dns": ("10", int, "DNS-querying mechanisms allowed per evaluation"),

    "greylist.enabled": ("true", _bool, "run the greylist stage"),
    "greylist.min_delay_secs": ("10", float, "earliest accepted retry"),
    "greylist.max_window_secs": ("43200", float, "latest accepted retry"),
    "greylist.store": ("", str, "transition log path; empty = in memory"),
    "greylist.expire_days": ("30", float, "drop triplets idle this long on load"),
    "greylist.replay_retry_secs": ("300", float, "corpus replay: resubmit a 451'd message after this delay"),

    "rdns.enabled": ("true", _bool, "run the reverse DNS stage"),
    "rdns.reject_no_ptr": ("true", _bool, "reject clients without PTR"),
    "rdns.reject_helo_mismatch": ("false", _bool, "reject when PTR and HELO disagree"),

    "content.enabled": ("true", _bool, "run the content stage"),
    "content.rules": ("", str, "rules file; empty = built-in rules"),
    "content.blocked_extensions": ("exe,scr,pif,bat,com", _csv, "attachment extensions to block"),
    "content.block_double_extension": ("true", _bool, "flag name.ext.exe style names"),
    "content.flag_size_range": ("143360-184320", _size_range, "min-max bytes flagged as suspicious"),

    "policy.enabled": ("true", _bool, "run the policy stage"),
    "policy.group_ids": ("", _csv, "group distribution addresses"),
    "policy.group_allow": ("", _group_allow, "group=sender|sender;... allowed group senders"),
    "policy.max_rcpt_per_message": ("50", int, "recipient cap"),
    "policy.max_attachment_bytes": ("10485760", int, "attachment size cap"),
    "policy.trap_retention_days": ("30", int, "spam trap retention"),

    "bayes.enabled": ("true", _bool, "run the Bayes stage"),
    "bayes.dictionary": ("", str, "dictionary file; empty = stage passes"),
    "bayes.threshold": ("0.9", float, "spam probability threshold"),

    "session.length_secs": ("10800", float, "report session length"),

    "smtp.host": ("127.0.0.1", str, "listen address"),
    "smtp.port": ("2525", int, "listen port"),
    "smtp.inbox": ("inbox", str, "maildir for delivered mail"),
    "smtp.trap": ("trap", str, "maildir for trapped mail"),
    "smtp.max_data_bytes": ("10485760", int, "DATA size cap"),
    "smtp.report": ("", str, "session CSV written on shutdown"),

    "guard.state_dir": ("", str, "alias table, quarantine list and alert log"),
    "guard.window_secs": ("60", float, "monitor window width"),
    "guard.storm_windows": ("3", int, "consecutive windows of group mail that raise a storm alert"),
    "guard.queue_capacity": ("100", int, "queue capacity for saturation alerts"),
    "guard.saturation_fraction": ("0.8", float, "saturation threshold as a fraction of capacity"),
    "guard.latency_factor": ("3", float, "latency alert factor over baseline"),
    "guard.auto_mitigate": ("false", _bool, "remap groups automatically on a storm alert"),
    "guard.alias_mode": ("BounceOld", AliasMode, "what happens to mail for a retired alias"),

    "sim.n_users": ("200", int, "simulated users"),
    "sim.n_groups": ("20", int, "group ids (users split evenly)"),
    "sim.profile": ("", str, "educated (p_exec 0.05) or untrained (0.5); overrides p_exec"),
    "sim.p_exec": ("0.5", float, "chance a recipient runs the attachment"),
    "sim.server_capacity": ("50", int, "messages processed per minute"),
    "sim.queue_limit": ("500", int, "queue size above which the server is overloaded"),
    "sim.queue_burst": ("500", int, "extra queue room before arrivals are refused"),
    "sim.seed": ("42", int, "RNG seed"),
    "sim.seed_infections": ("1", int, "users infected at minute 0"),
    "sim.defenses": ("all", _stages, "enabled stages or all/none"),
    "sim.duration_minutes": ("900", int, "run length"),
    "sim.session_minutes": ("180", int, "session length"),
    "sim.background_spam_rate": ("2", int, "background spam per minute"),
    "sim.background_filterable_fraction": ("0.6", float, "share of background spam with a listed URL"),
    "sim.disabled_sessions": ("", str, "stage:first-last;... sessions (1-based) with a stage off"),
    "sim.remap_minute": ("-1", int, "minute at which all groups are remapped (-1 = never)"),
    "sim.domain": ("corp.example", str, "simulated organisation domain"),
}


@dataclass
class AppConfig:
    values: dict[str, Any] = field(default_factory=dict)
    source: str | None = None

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def load(cls, path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> "AppConfig":
        raw = {key: default for key, (default, _, _) in KEYS.items()}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
            try:
                with open(path, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from None
            for section in parser.sections():
                for key, value in parser.items(section):
                    raw[_known(f"{section}.{key}")] = value
        for key, value in (overrides or {}).items():
            raw[_known(key)] = value
        values = {}
        for key, text in raw.items():
            try:
                values[key] = KEYS[key][1](text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        cfg = cls(values, str(path) if path else None)
        cfg.validate()
        return cfg

    def validate(self):
        for key in ("dnsbl.threshold", "surbl.threshold", "surbl.max_domains", "smtp.max_data_bytes"):
            if self[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self["greylist.min_delay_secs"] > self["greylist.max_window_secs"]:
            raise ConfigError("greylist.min_delay_secs exceeds greylist.max_window_secs")
        if not 0 <= self["sim.p_exec"] <= 1:
            raise ConfigError("sim.p_exec must be within [0, 1]")
        if self["sim.profile"] not in ("", "educated", "untrained"):
            raise ConfigError("sim.profile must be educated or untrained")
        for key in ("policy.max_rcpt_per_message", "policy.max_attachment_bytes", "policy.trap_retention_days"):
            if self[key] < 1:
                raise ConfigError(f"{key} must be >= 1")


def _known(key: str) -> str:
    key = key.strip().lower()
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def documented_keys() -> list[tuple[str, str, str]]:
    return [(key, default, doc) for key, (default, _, doc) in KEYS.items()]


# --- wiring ---------------------------------------------------------------

def _enabled_stages(cfg: AppConfig) -> frozenset[Stage]:
    return frozenset(s for s in STAGES if cfg[f"{s.value.lower()}.enabled"])


def build_pipeline_config(cfg: AppConfig) -> PipelineConfig:
    if cfg["content.rules"]:
        try:
            rules = tuple(load_rules(cfg["content.rules"]))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"content.rules: {exc}") from None
    else:
        rules = DEFAULT_RULES
    try:
        group_ids = frozenset(EmailAddress.parse(g) for g in cfg["policy.group_ids"])
        attachment_rule = AttachmentRule(frozenset(cfg["content.blocked_extensions"]),
                                         cfg["content.block_double_extension"], cfg["content.flag_size_range"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return PipelineConfig(
        enabled=_enabled_stages(cfg),
        dnsbl_lists=cfg["dnsbl.lists"],
        dnsbl_threshold=cfg["dnsbl.threshold"],
        surbl_lists=cfg["surbl.lists"],
        surbl_threshold=cfg["surbl.threshold"],
        surbl_max_domains=cfg["surbl.max_domains"],
        spf_reject_softfail=cfg["spf.reject_softfail"],
        spf_max_dns=cfg["spf.max_dns"],
        greylist_min_delay=cfg["greylist.min_delay_secs"],
        greylist_max_window=cfg["greylist.max_window_secs"],
        rdns_reject_no_ptr=cfg["rdns.reject_no_ptr"],
        rdns_reject_helo_mismatch=cfg["rdns.reject_helo_mismatch"],
        content_rules=rules,
        attachment_rule=attachment_rule,
        policy=PolicyConfig(cfg["policy.group_allow"], cfg["policy.max_rcpt_per_message"],
                            cfg["policy.max_attachment_bytes"], cfg["policy.trap_retention_days"]),
        group_ids=group_ids,
        bayes_threshold=cfg["bayes.threshold"],
        dns_timeout=cfg["dns.timeout_secs"],
    )


def build_stores(cfg: AppConfig, now: float | None = None) -> Stores:
    now = time.time() if now is None else now
    store_path = cfg["greylist.store"] or None
    greylist = GreylistStore.open(store_path, now=now, expire_secs=cfg["greylist.expire_days"] * 86400)
    dictionary = bayes.BayesDictionary.load(cfg["bayes.dictionary"]) if cfg["bayes.dictionary"] else None
    stores = Stores(greylist=greylist, dictionary=dictionary)
    if cfg["guard.state_dir"]:
        state = GuardState.load(cfg["guard.state_dir"])
        stores.quarantined_hosts = set(state.quarantined)
        stores.aliases = state.aliases
    return stores


def build_resolver(cfg: AppConfig, zone_path: str | os.PathLike | None = None):
    if zone_path:
        return StaticZone.from_file(zone_path)
    if cfg["dns.server"]:
        return MemoResolver(UdpResolver.from_address(cfg["dns.server"], cfg["dns.retries"]))
    resolver = UdpResolver.from_system()
    resolver.retries = cfg["dns.retries"]
    return MemoResolver(resolver)


def config_path_from_env(explicit: str | None) -> str | None:
    return explicit or os.environ.get("SPAMWALL_CONFIG") or None
