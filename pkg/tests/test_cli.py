import subprocess
import sys

import pytest

from spamwall import __version__
from spamwall.cli import main, reduction_text
from spamwall.pipeline import CSV_HEADER

from factories import CORPUS_CONFIG, build_corpus, corpus_zone


@pytest.fixture
def corpus(tmp_path):
    names = build_corpus(tmp_path / "corpus", n_spam=40, n_ham=10, span_secs=4 * 3600)
    (tmp_path / "zone.txt").write_text(corpus_zone())
    (tmp_path / "spamwall.ini").write_text(CORPUS_CONFIG)
    return tmp_path, names


def write_report(path, delivered):
    rows = [",".join(CSV_HEADER)] + [",".join([str(i * 10800), str(d)] + ["0"] * (len(CSV_HEADER) - 2))
                                     for i, d in enumerate(delivered)]
    path.write_text("\n".join(rows) + "\n")
    return str(path)


def test_filter_happy_path(corpus, capsys):
    tmp, names = corpus
    code = main(["filter", "--config", str(tmp / "spamwall.ini"), "--in", str(tmp / "corpus"),
                 "--out-inbox", str(tmp / "inbox"), "--out-trap", str(tmp / "trap"),
                 "--zone", str(tmp / "zone.txt"), "--report", str(tmp / "report.csv")])
    assert code == 0
    inbox = {p.name for p in (tmp / "inbox" / "new").iterdir()}
    assert set(names["ham"]) <= inbox and not inbox & set(names["signed"])
    out = capsys.readouterr().out
    assert out.startswith("messages: 50 ")
    assert (tmp / "report.csv").read_text().splitlines()[0] == ",".join(CSV_HEADER)
    # delivered files are byte-identical copies of the input
    name = names["ham"][0]
    assert (tmp / "inbox" / "new" / name).read_bytes() == (tmp / "corpus" / name).read_bytes()


def test_unknown_flag_exits_2(capsys):
    assert main(["filter", "--bogus"]) == 2


def test_unknown_config_key_exits_2(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[greylist]\ndelay = 5\n")
    assert main(["config", "--check", "--config", str(tmp_path / "bad.ini")]) == 2
    assert "greylist.delay" in capsys.readouterr().err
    assert main(["config", "--check", "--set", "nope.x=1"]) == 2


def test_config_env_var(tmp_path, monkeypatch, capsys):
    (tmp_path / "bad.ini").write_text("[greylist]\ndelay = 5\n")
    monkeypatch.setenv("SPAMWALL_CONFIG", str(tmp_path / "bad.ini"))
    assert main(["config", "--check"]) == 2


def test_config_listing_round_trips(tmp_path, capsys):
    assert main(["config"]) == 0
    (tmp_path / "all.ini").write_text(capsys.readouterr().out)
    assert main(["config", "--check", "--config", str(tmp_path / "all.ini")]) == 0


def test_report_reduction(tmp_path, capsys):
    base = write_report(tmp_path / "base.csv", [60, 40])
    treated = write_report(tmp_path / "treated.csv", [25, 15])
    assert main(["report", "--baseline", base, "--treated", treated]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "reduction: 60.0%"
    assert main(["report", "--baseline", base, "--treated", base]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "reduction: 0.0%"
    assert reduction_text(0, 0) == "reduction: n/a"


def test_report_schema_mismatch(tmp_path, capsys):
    (tmp_path / "odd.csv").write_text("a,b\n1,2\n")
    assert main(["report", str(tmp_path / "odd.csv")]) == 2
    assert main(["report"]) == 2


def test_simulate_report_and_figures(tmp_path, capsys):
    out = tmp_path / "sim.csv"
    assert main(["simulate", "--seed", "3", "--out", str(out), "--figure", str(tmp_path / "sim.png"),
                 "--set", "sim.duration_minutes=360", "--set", "sim.p_exec=0"]) == 0
    assert "infected: 1/200" in capsys.readouterr().err
    assert out.read_text().splitlines()[0].endswith(",dos_active")
    assert main(["report", str(out), "--figure", str(tmp_path / "one.png")]) == 0
    assert main(["report", "--baseline", str(out), "--treated", str(out),
                 "--figure", str(tmp_path / "cmp.png")]) == 0
    for name in ("sim.png", "one.png", "cmp.png"):
        assert (tmp_path / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_train_then_filter_with_dictionary(corpus, capsys):
    tmp, _ = corpus
    spam, ham = tmp / "spam", tmp / "ham"
    spam.mkdir()
    ham.mkdir()
    for p in sorted((tmp / "corpus").iterdir()):
        (ham if p.name.endswith("-ham.eml") else spam).joinpath(p.name).write_bytes(p.read_bytes())
    assert main(["bayes", "train", "--spam", str(spam), "--ham", str(ham), "--out", str(tmp / "d.tsv")]) == 0
    assert capsys.readouterr().out.startswith("trained on 40 spam / 10 ham")
    assert main(["train", "--spam", str(ham / "missing"), "--ham", str(ham), "--out", str(tmp / "e.tsv")]) == 1


def test_guard_commands(tmp_path, capsys):
    state = ["guard", "--state-dir", str(tmp_path / "g")]
    assert main(state + ["remap", "allstaff@corp.example"]) == 0
    assert capsys.readouterr().out.strip() == "allstaff@corp.example -> all_staff@corp.example"
    assert main(state + ["remap", "allstaff@corp.example"]) == 1
    assert main(state + ["quarantine", "10.0.0.5", "--reason", "storm"]) == 0
    capsys.readouterr()
    assert main(state + ["status"]) == 0
    status = capsys.readouterr().out
    assert "10.0.0.5  storm" in status and "BounceOld" in status
    assert main(state + ["release", "10.0.0.5"]) == 0
    main(state + ["status"])
    assert "10.0.0.5" not in capsys.readouterr().out.split("quarantined hosts:")[1]
    assert main(["guard", "status"]) == 2


def test_prune(tmp_path, capsys):
    (tmp_path / "trap" / "new").mkdir(parents=True)
    (tmp_path / "trap" / "new" / "m1").write_text("x")
    assert main(["prune", "--trap", str(tmp_path / "trap")]) == 0
    assert capsys.readouterr().out.strip() == "deleted 0"


def test_version_and_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "spamwall", "--version"], capture_output=True, text=True)
    assert done.returncode == 0 and done.stdout.strip() == f"spamwall {__version__}"
