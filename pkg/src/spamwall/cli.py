"""spamwall command line."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .bayes import Label, train
from .config import (AppConfig, ConfigError, build_pipeline_config, build_resolver, build_stores,
                     config_path_from_env, documented_keys)
from .content import prune_trap
from .guard import AliasMode, AlreadyRemapped, GuardState, quarantine_host, release_host, remap_group
from .message import EmailAddress, ParseError, iter_corpus
from .pipeline import (Final, SchemaError, maildir_deliver, read_session_csv, record_session,
                       replay, write_session_csv)

log = logging.getLogger("spamwall")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _overrides(pairs):
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _load_config(args) -> AppConfig:
    return AppConfig.load(config_path_from_env(getattr(args, "config", None)), _overrides(getattr(args, "set", None)))


# --- filter ---------------------------------------------------------------

def cmd_filter(args) -> int:
    cfg = _load_config(args)
    pconfig = build_pipeline_config(cfg)
    resolver = build_resolver(cfg, args.zone)
    corpus = list(iter_corpus(args.input))
    start = min((m.received_at for _, m in corpus), default=0.0)
    stores = build_stores(cfg, now=start)
    results = replay(corpus, pconfig, stores, resolver, cfg["greylist.replay_retry_secs"])
    stores.greylist.close()

    for r in results:
        if r.verdict.final is Final.DELIVERED:
            maildir_deliver(args.out_inbox, r.source.read_bytes(), r.source.name)
        elif r.verdict.final is Final.QUARANTINED:
            maildir_deliver(args.out_trap, r.source.read_bytes(), r.source.name)

    sessions = record_session([r.verdict for r in results], cfg["session.length_secs"])
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            write_session_csv(sessions, fh)
        if args.figure:
            from .plotting import session_figure
            session_figure(read_session_csv(args.report), args.figure)
    counts = {f: sum(r.verdict.final is f for r in results) for f in Final}
    print(f"messages: {len(results)}  delivered: {counts[Final.DELIVERED]}  "
          f"trapped: {counts[Final.QUARANTINED]}  rejected: {counts[Final.REJECTED]}  "
          f"tempfailed: {counts[Final.TEMP_REJECTED]}")
    return EXIT_OK


# --- serve ----------------------------------------------------------------

def cmd_serve(args) -> int:
    from .smtp import ListenerConfig, smtp_serve

    cfg = _load_config(args)
    listener = ListenerConfig(cfg["smtp.host"], args.port if args.port is not None else cfg["smtp.port"],
                              Path(cfg["smtp.inbox"]), Path(cfg["smtp.trap"]), cfg["smtp.max_data_bytes"])
    stores = build_stores(cfg)
    ctx = smtp_serve(listener, build_pipeline_config(cfg), stores, build_resolver(cfg, args.zone))
    stores.greylist.close()
    if cfg["smtp.report"] and ctx.verdicts:
        with open(cfg["smtp.report"], "w", encoding="utf-8") as fh:
            write_session_csv(record_session(ctx.verdicts, cfg["session.length_secs"]), fh)
    return EXIT_OK


# --- simulate -------------------------------------------------------------

def cmd_simulate(args) -> int:
    from dataclasses import replace
    from .sim import run_experiment, sim_config_from_app

    cfg = _load_config(args)
    try:
        sim_cfg = sim_config_from_app(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.seed is not None:
        sim_cfg = replace(sim_cfg, seed=args.seed)
    report = run_experiment(sim_cfg)
    text = report.csv_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.figure:
        from .plotting import session_figure
        rows = [dict(s.row(), dos_active=int(s.dos_active)) for s in report.sessions]
        session_figure(rows, args.figure, title="Simulated spam delivery per session")
    first = report.dos_first_minute
    print(f"infected: {len(report.infected)}/{sim_cfg.n_users}  worm delivered: {report.worm_messages_delivered}  "
          f"dos: {'minute ' + str(first) if first is not None else 'never'}", file=sys.stderr)
    return EXIT_OK


# --- train ----------------------------------------------------------------

def cmd_train(args) -> int:
    corpus = [(m, Label.SPAM) for _, m in iter_corpus(args.spam)]
    corpus += [(m, Label.HAM) for _, m in iter_corpus(args.ham)]
    if not corpus:
        raise UsageError("no messages found in --spam/--ham")
    d = train(corpus)
    d.save(args.out)
    print(f"trained on {d.spam_msgs} spam / {d.ham_msgs} ham; "
          f"{len(d.spam_counts)} spam tokens, {len(d.ham_counts)} ham tokens")
    return EXIT_OK


# --- guard ----------------------------------------------------------------

def _guard_state(args) -> GuardState:
    directory = args.state_dir
    if not directory:
        directory = _load_config(args)["guard.state_dir"]
    if not directory:
        raise ConfigError("guard.state_dir is not set (use --state-dir or the config)")
    return GuardState.load(directory)


def cmd_guard(args) -> int:
    state = _guard_state(args)
    if args.guard_cmd == "status":
        print("aliases:")
        for old, e in sorted(state.aliases.items(), key=lambda kv: str(kv[0])):
            print(f"  {old} -> {e.new} ({e.mode.value}, since {int(e.remapped_at)})")
        print("quarantined hosts:")
        for ip, reason in sorted(state.quarantined.items()):
            print(f"  {ip}  {reason}")
        print("recent alerts:")
        for line in state.recent_alerts():
            print(f"  {line}")
        return EXIT_OK
    if args.guard_cmd == "remap":
        try:
            old = EmailAddress.parse(args.address)
            new = remap_group(old, state.aliases, time.time(), AliasMode(args.mode))
        except (ParseError, AlreadyRemapped) as exc:
            print(f"spamwall: cannot remap: {exc}", file=sys.stderr)
            return EXIT_ERROR
        state.save()
        print(f"{old} -> {new}")
        return EXIT_OK
    if args.guard_cmd == "quarantine":
        hosts = set(state.quarantined)
        quarantine_host(args.ip, args.reason, hosts)
        for ip in hosts - set(state.quarantined):
            state.quarantined[ip] = args.reason or "operator"
        state.save()
        print(f"quarantined {args.ip}")
        return EXIT_OK
    hosts = set(state.quarantined)
    release_host(args.ip, hosts)
    state.quarantined = {ip: r for ip, r in state.quarantined.items() if ip in hosts}
    state.save()
    print(f"released {args.ip}")
    return EXIT_OK


# --- report ---------------------------------------------------------------

def format_table(rows) -> str:
    lines = [f"{'session':>7} {'start':>12} {'delivered':>9} {'trapped':>8} {'rejected':>8}"]
    for i, r in enumerate(rows, 1):
        lines.append(f"{i:>7} {r['session_start']:>12} {r['delivered']:>9} {r['trapped']:>8} {r['rejected']:>8}")
    lines.append(f"{'total':>7} {'':>12} {sum(r['delivered'] for r in rows):>9} "
                 f"{sum(r['trapped'] for r in rows):>8} {sum(r['rejected'] for r in rows):>8}")
    return "\n".join(lines)


def reduction_text(baseline_delivered: int, treated_delivered: int) -> str:
    if baseline_delivered == 0:
        return "reduction: n/a"
    return f"reduction: {100.0 * (baseline_delivered - treated_delivered) / baseline_delivered:.1f}%"


def cmd_report(args) -> int:
    if args.csv and (args.baseline or args.treated):
        raise UsageError("give either one report or --baseline with --treated")
    if args.csv:
        rows = read_session_csv(args.csv)
        print(format_table(rows))
        if args.figure:
            from .plotting import session_figure
            session_figure(rows, args.figure)
        return EXIT_OK
    if not (args.baseline and args.treated):
        raise UsageError("report needs a CSV, or both --baseline and --treated")
    base, treated = read_session_csv(args.baseline), read_session_csv(args.treated)
    print(f"baseline: {args.baseline}")
    print(format_table(base))
    print(f"treated: {args.treated}")
    print(format_table(treated))
    print(reduction_text(sum(r["delivered"] for r in base), sum(r["delivered"] for r in treated)))
    if args.figure:
        from .plotting import comparison_figure
        comparison_figure(base, treated, args.figure)
    return EXIT_OK


# --- prune / config -------------------------------------------------------

def cmd_prune(args) -> int:
    cfg = _load_config(args)
    days = args.days if args.days is not None else cfg["policy.trap_retention_days"]
    deleted = prune_trap(args.trap, time.time(), days)
    print(f"deleted {deleted}")
    return EXIT_OK


def cmd_config(args) -> int:
    if args.check:
        _load_config(args)
        print("ok")
        return EXIT_OK
    section = None
    for key, default, doc in documented_keys():
        sec, name = key.split(".", 1)
        if sec != section:
            print(f"\n[{sec}]" if section else f"[{sec}]")
            section = sec
        print(f"# {doc}")
        print(f"{name} = {default}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spamwall", description="Layered spam and spam-borne DDoS defense.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI config file (default: $SPAMWALL_CONFIG)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    f = with_config(sub.add_parser("filter", help="replay a corpus directory through the pipeline"))
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--out-inbox", required=True)
    f.add_argument("--out-trap", required=True)
    f.add_argument("--zone", help="static zone file (offline DNS)")
    f.add_argument("--report", help="session CSV to write")
    f.add_argument("--figure", help="also render the report as an image")
    f.set_defaults(func=cmd_filter)

    s = with_config(sub.add_parser("serve", help="run the SMTP front end"))
    s.add_argument("--zone")
    s.add_argument("--port", type=int)
    s.set_defaults(func=cmd_serve)

    m = with_config(sub.add_parser("simulate", help="run the worm outbreak simulation"))
    m.add_argument("--seed", type=int)
    m.add_argument("--out")
    m.add_argument("--figure")
    m.set_defaults(func=cmd_simulate)

    def add_train(sp):
        sp.add_argument("--spam", required=True)
        sp.add_argument("--ham", required=True)
        sp.add_argument("--out", required=True)
        sp.set_defaults(func=cmd_train)

    add_train(sub.add_parser("train", help="build a Bayes dictionary"))
    b = sub.add_parser("bayes", help="Bayes dictionary tools")
    bsub = b.add_subparsers(dest="bayes_cmd", required=True)
    add_train(bsub.add_parser("train", help="build a Bayes dictionary"))

    g = with_config(sub.add_parser("guard", help="monitoring state and mitigation"))
    g.add_argument("--state-dir")
    gsub = g.add_subparsers(dest="guard_cmd", required=True)
    gsub.add_parser("status")
    r = gsub.add_parser("remap")
    r.add_argument("address")
    r.add_argument("--mode", default=AliasMode.BOUNCE_OLD.value, choices=[m.value for m in AliasMode])
    q = gsub.add_parser("quarantine")
    q.add_argument("ip")
    q.add_argument("--reason", default="")
    rel = gsub.add_parser("release")
    rel.add_argument("ip")
    g.set_defaults(func=cmd_guard)

    rep = sub.add_parser("report", help="summarise session CSVs")
    rep.add_argument("csv", nargs="?")
    rep.add_argument("--baseline")
    rep.add_argument("--treated")
    rep.add_argument("--figure")
    rep.set_defaults(func=cmd_report)

    pr = with_config(sub.add_parser("prune", help="delete old messages from a spam trap"))
    pr.add_argument("--trap", required=True)
    pr.add_argument("--days", type=int)
    pr.set_defaults(func=cmd_prune)

    c = with_config(sub.add_parser("config", help="print documented keys, or --check a config"))
    c.add_argument("--check", action="store_true")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, UsageError) as exc:
        print(f"spamwall: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError, ValueError) as exc:
        print(f"spamwall: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
