import pytest
from hypothesis import given, strategies as st

from spamwall.bayes import Label, train
from spamwall.content import Action, ContentRule, Target
from spamwall.dns import StaticZone
from spamwall.guard import AliasMode, AliasTable, remap_group
from spamwall.message import Attachment
from spamwall.pipeline import (CSV_HEADER, STAGES, Decision, Final, PipelineConfig, SchemaError, Stage, Stores,
                               maildir_deliver, read_session_csv, record_session, replay, run_pipeline,
                               session_csv_text)
from spamwall.source_filters import BlocklistConfig, ListKind

from factories import FIXTURE_ZONE, addr, make_message

H = 3600


def base_config(**kw):
    return PipelineConfig(
        dnsbl_lists=(BlocklistConfig("ex", "bl.example"),),
        surbl_lists=(BlocklistConfig("ws", "ws.surbl.test", ListKind.DOMAIN),),
        group_ids=frozenset({addr("allstaff@corp.example")}),
        **kw,
    )


def clean(**kw):
    kw.setdefault("ip", "192.0.2.2")
    kw.setdefault("helo", "mail.corp.example")
    kw.setdefault("sender", "carol@corp.example")
    return make_message("see you at lunch", "Friday", **kw)


def twice(msg, config, stores, zone):
    """First attempt is greylisted; return the verdict of the retry a minute later."""
    first = run_pipeline(msg, config, stores, zone)
    assert first.final is Final.TEMP_REJECTED and first.smtp_code == 451
    return run_pipeline(msg.at(msg.received_at + 60), config, stores, zone)


def test_dnsbl_listed_is_rejected_and_rest_skipped(zone):
    v = run_pipeline(make_message(ip="192.0.2.10"), base_config(), Stores(), zone)
    assert v.final is Final.REJECTED and v.smtp_code == 550
    assert v.outcomes[0].stage is Stage.DNSBL and v.outcomes[0].decision is Decision.REJECT
    assert all(o.decision is Decision.SKIPPED for o in v.outcomes[1:])


def test_worm_with_forged_internal_sender_fails_spf(zone):
    worm = make_message("run it http://www2.xtinmdesachlion.com/", "status", ip="198.51.100.9",
                        helo="pc1.corp.example", sender="admin@corp.example", rcpt=("allstaff@corp.example",))
    zone_with_ptr = StaticZone.from_text(FIXTURE_ZONE + "9.100.51.198.in-addr.arpa PTR pc1.corp.example\n")
    v = twice(worm, base_config(), Stores(), zone_with_ptr)
    assert v.final is Final.REJECTED
    assert v.terminal_outcome.stage is Stage.SPF and v.terminal_outcome.detail == "Fail"


def test_clean_message_is_delivered(zone):
    v = twice(clean(), base_config(), Stores(), zone)
    assert v.final is Final.DELIVERED and v.smtp_code == 250
    assert [o.decision for o in v.outcomes] == [Decision.PASS] * 8
    assert [o.stage for o in v.outcomes] == list(STAGES)


def test_content_hit_quarantines_after_all_stages(zone):
    msg = make_message("please install updates", "hello", ip="192.0.2.2", helo="mail.corp.example",
                       sender="carol@corp.example")
    v = run_pipeline(msg, base_config().without(Stage.GREYLIST), Stores(), zone)
    assert v.final is Final.QUARANTINED and v.trap_stage is Stage.CONTENT
    assert v.outcome(Stage.BAYES).decision is Decision.PASS  # later stages still ran


def test_reject_rule_and_surbl_order(zone):
    cfg = base_config(content_rules=(ContentRule("hard", Target.BODY, ("wire money",), Action.REJECT),))
    cfg = cfg.without(Stage.GREYLIST)
    msg = make_message("wire money to http://www3.xtinmdesachlion.com", ip="192.0.2.2", helo="mail.corp.example",
                       sender="carol@corp.example")
    v = run_pipeline(msg, cfg, Stores(), zone)
    assert v.final is Final.REJECTED and v.terminal_outcome.stage is Stage.CONTENT
    assert v.outcome(Stage.SURBL).decision is Decision.QUARANTINE
    assert v.outcome(Stage.POLICY).decision is Decision.SKIPPED


def test_spf_softfail_toggle(zone):
    msg = make_message(ip="198.51.100.7", helo="x", sender="a@partner.example")
    z = StaticZone.from_text(FIXTURE_ZONE + "7.100.51.198.in-addr.arpa PTR mx.partner.example\n")
    cfg = base_config().only(Stage.SPF)
    assert run_pipeline(msg, cfg, Stores(), z).final is Final.REJECTED
    cfg.spf_reject_softfail = False
    assert run_pipeline(msg, cfg, Stores(), z).final is Final.DELIVERED


def test_rdns_toggles(zone):
    no_ptr = make_message(ip="192.0.2.77")
    cfg = base_config().only(Stage.RDNS)
    assert run_pipeline(no_ptr, cfg, Stores(), zone).final is Final.REJECTED
    cfg.rdns_reject_no_ptr = False
    assert run_pipeline(no_ptr, cfg, Stores(), zone).final is Final.DELIVERED
    mismatch = make_message(ip="192.0.2.2", helo="spam.other.example")
    assert run_pipeline(mismatch, cfg, Stores(), zone).final is Final.DELIVERED
    cfg.rdns_reject_helo_mismatch = True
    assert run_pipeline(mismatch, cfg, Stores(), zone).final is Final.REJECTED


def test_unavailable_stages_degrade_open():
    z = StaticZone.from_text("10.2.0.192.bl.example A TIMEOUT\n10.2.0.192.in-addr.arpa PTR TIMEOUT\n"
                             "partner.example TXT SERVFAIL\n")
    cfg = base_config().without(Stage.GREYLIST)
    v = run_pipeline(make_message(), cfg, Stores(), z)
    assert v.final is Final.DELIVERED
    assert [v.outcome(s).decision for s in (Stage.DNSBL, Stage.RDNS, Stage.SPF)] == [Decision.UNAVAILABLE] * 3


def test_policy_and_aliases(zone):
    cfg = base_config().without(Stage.GREYLIST)
    to_group = clean(rcpt=("allstaff@corp.example",))
    v = run_pipeline(to_group, cfg, Stores(), zone)
    assert v.final is Final.QUARANTINED and v.trap_stage is Stage.POLICY

    aliases = AliasTable()
    remap_group(addr("allstaff@corp.example"), aliases, 0)
    v = run_pipeline(to_group, cfg.without(Stage.POLICY), Stores(aliases=aliases), zone)
    assert v.final is Final.REJECTED and v.terminal_outcome.detail == "allstaff@corp.example retired"

    silent = AliasTable()
    remap_group(addr("allstaff@corp.example"), silent, 0, AliasMode.SILENT_DROP_OLD)
    assert run_pipeline(to_group, cfg, Stores(aliases=silent), zone).final is Final.QUARANTINED


def test_bayes_stage(zone):
    spam = [make_message(f"cheap pills offer {i}") for i in range(5)]
    ham = [make_message(f"meeting agenda item {i}") for i in range(5)]
    d = train([(m, Label.SPAM) for m in spam] + [(m, Label.HAM) for m in ham])
    cfg = base_config().without(Stage.GREYLIST)
    pitch = make_message("cheap pills offer today", ip="192.0.2.2", helo="mail.corp.example",
                         sender="carol@corp.example")
    v = run_pipeline(pitch, cfg, Stores(dictionary=d), zone)
    assert v.final is Final.QUARANTINED and v.trap_stage is Stage.BAYES
    assert run_pipeline(clean(), cfg, Stores(), zone).outcome(Stage.BAYES).detail == "no dictionary"


def test_disabled_stage_records_pass(zone):
    v = run_pipeline(make_message(ip="192.0.2.10"), base_config().without(Stage.DNSBL, Stage.GREYLIST), Stores(),
                     zone)
    assert v.outcome(Stage.DNSBL).decision is Decision.PASS and v.outcome(Stage.DNSBL).detail == "disabled"


# --- sessions ---------------------------------------------------------------

def _verdicts(zone, times):
    cfg = base_config().without(Stage.GREYLIST)
    return [run_pipeline(clean(at=t), cfg, Stores(), zone) for t in times]


def test_record_session_bucketing(zone):
    one = record_session(_verdicts(zone, range(0, 3 * H - 1, 1000)))
    assert len(one) == 1 and one[0].total == 11
    three = record_session(_verdicts(zone, [0, 7 * H]))
    assert len(three) == 3 and [s.total for s in three] == [1, 0, 1]


def test_trapped_by_stage_counts(zone):
    cfg = base_config().without(Stage.GREYLIST)
    msgs = [make_message(f"deal http://x{i}.xtinmdesachlion.com" if i < 60 else "hi", ip="192.0.2.2",
                         helo="mail.corp.example", sender="carol@corp.example", at=i) for i in range(100)]
    [s] = record_session(run_pipeline(m, cfg, Stores(), zone) for m in msgs)
    assert s.trapped_by_stage == {Stage.SURBL: 60} and s.trapped == 60 and s.delivered == 40


def test_csv_schema_and_reader(tmp_path, zone):
    text = session_csv_text(record_session(_verdicts(zone, [0, 4 * H])))
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    p = tmp_path / "r.csv"
    p.write_text(text)
    rows = read_session_csv(p)
    assert [r["delivered"] for r in rows] == [1, 1]
    p.write_text("a,b\n1,2\n")
    with pytest.raises(SchemaError):
        read_session_csv(p)
    p.write_text(",".join(CSV_HEADER) + "\n" + ",".join(["x"] * len(CSV_HEADER)) + "\n")
    with pytest.raises(SchemaError):
        read_session_csv(p)


def test_replay_retries_greylisted_mail(zone):
    msgs = [(None, clean(at=0)), (None, clean(at=5, sender="dave@corp.example"))]
    results = replay(msgs, base_config(), Stores(), zone, retry_secs=300)
    assert [(r.attempts, r.verdict.final, r.verdict.received_at) for r in results] == [
        (2, Final.DELIVERED, 300), (2, Final.DELIVERED, 305)]
    results = replay(msgs, base_config(), Stores(), zone, retry_secs=0)
    assert [r.verdict.final for r in results] == [Final.TEMP_REJECTED] * 2


def test_maildir_delivery(tmp_path):
    path = maildir_deliver(tmp_path / "inbox", b"data", "m1.eml")
    assert path == tmp_path / "inbox" / "new" / "m1.eml" and path.read_bytes() == b"data"
    assert sorted(p.name for p in (tmp_path / "inbox").iterdir()) == ["cur", "new", "tmp"]
    assert not list((tmp_path / "inbox" / "tmp").iterdir())


# --- properties ---------------------------------------------------------------

_kind = st.sampled_from(["clean", "dnsbl", "surbl", "keyword", "exe", "group", "noptr"])


def _corpus_message(kind, i):
    body, subject, ip, attachments, rcpt = f"note {i}", f"item {i}", "192.0.2.2", (), ("bob@corp.example",)
    if kind == "dnsbl":
        ip = "192.0.2.10"
    elif kind == "surbl":
        body += " http://www4.xtinmdesachlion.com/x"
    elif kind == "keyword":
        subject = "server report"
    elif kind == "exe":
        attachments = (Attachment("a.doc.exe", 150_000),)
    elif kind == "group":
        rcpt = ("allstaff@corp.example",)
    elif kind == "noptr":
        ip = "192.0.2.200"
    return make_message(body, subject, ip=ip, helo="mail.corp.example", sender=f"u{i}@corp.example",
                        rcpt=rcpt, attachments=attachments, at=i * 600)


def _run(corpus, enabled):
    zone = StaticZone.from_text(FIXTURE_ZONE)
    cfg = base_config(enabled=enabled)
    results = replay([(None, m) for m in corpus], cfg, Stores(), zone)
    return results, session_csv_text(record_session(r.verdict for r in results))


@given(st.lists(_kind, min_size=1, max_size=25), st.sets(st.sampled_from(STAGES)))
def test_toggle_consistency_and_determinism(kinds, enabled):
    corpus = [_corpus_message(k, i) for i, k in enumerate(kinds)]
    results, csv_a = _run(corpus, frozenset(enabled))
    _, csv_b = _run(corpus, frozenset(enabled))
    assert csv_a == csv_b
    sessions = record_session(r.verdict for r in results)
    for s in sessions:
        assert s.trapped == sum(s.trapped_by_stage.values())
        for stage in STAGES:
            if stage not in enabled:
                assert s.trapped_by_stage.get(stage, 0) == 0
    for r in results:
        assert len(r.verdict.outcomes) == len(STAGES)
        assert sum(o.decision in (Decision.REJECT, Decision.TEMP_REJECT) for o in r.verdict.outcomes) <= 1


@given(st.lists(st.sampled_from(["clean", "surbl", "keyword"]), min_size=1, max_size=25))
def test_disabling_surbl_moves_listed_mail_to_inbox(kinds):
    corpus = [_corpus_message(k, i) for i, k in enumerate(kinds)]
    on, _ = _run(corpus, frozenset(STAGES))
    off, _ = _run(corpus, frozenset(STAGES) - {Stage.SURBL})
    listed = {i for i, k in enumerate(kinds) if k == "surbl"}

    def delivered(results):
        return sum(r.verdict.final is Final.DELIVERED and int(r.message.received_at // 600) in listed
                   for r in results)

    assert delivered(off) - delivered(on) == len(listed)
