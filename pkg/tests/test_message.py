import os

import pytest
from hypothesis import given, strategies as st

from spamwall.message import (Attachment, EmailAddress, Envelope, ParseError, extract_urls, format_corpus_bytes,
                              format_message, iter_corpus, parse_corpus_bytes, parse_message)

from factories import addr, make_message

ENV = Envelope("mx.partner.example", "192.0.2.10", addr("a@b.example"), (addr("c@corp.example"),))


def test_headers_and_body_map_directly():
    msg = parse_message(b"Subject: test\nFrom: a@b.example\n\nhello", ENV, 5)
    assert (msg.subject, msg.body_text, msg.attachments) == ("test", "hello", ())
    assert msg.header_from == addr("a@b.example")
    assert msg.received_at == 5


def test_attachment_delimiter_becomes_attachment():
    raw = b"From: a@b.example\n\nplease run\n--ATTACH filename=Update_KB2546_*86.BAK.exe size=143360\nMZ....\n"
    msg = parse_message(raw, ENV, 0)
    assert msg.attachments == (Attachment("Update_KB2546_*86.BAK.exe", 143360),)
    assert msg.body_text == "please run"


def test_end_marker_resumes_body():
    raw = (b"From: a@b.example\n\nbefore\n--ATTACH filename=a b.txt size=3 type=text/plain\nxyz\n"
           b"--END\nafter")
    msg = parse_message(raw, ENV, 0)
    assert msg.attachments == (Attachment("a b.txt", 3, "text/plain"),)
    assert msg.body_text == "before\nafter"


@pytest.mark.parametrize("raw", [
    b"Subject: x\nFrom: a@b.example",             # no blank line
    b"Subject: x\n\nbody",                        # no From
    b"From: not an address\n\nbody",
    b"From: a@b.example\n\n--ATTACH filename=x.exe\n",  # no size
    b"From: a@b.example\n\n--ATTACH size=12\n",
])
def test_malformed_input_raises(raw):
    with pytest.raises(ParseError):
        parse_message(raw, ENV, 0)


def test_missing_subject_is_empty():
    assert parse_message(b"From: Alice <a@b.example>\n\nx", ENV, 0).subject == ""


def test_address_rules():
    a = EmailAddress.parse("Alice.Smith@Corp.EXAMPLE")
    assert (a.local_part, a.domain) == ("Alice.Smith", "corp.example")
    for bad in ("nobody", "a@@b", "@b.example", "a@", "a b@c.example"):
        with pytest.raises(ValueError):
            EmailAddress.parse(bad)


def test_envelope_rejects_bad_ip_and_empty_rcpt():
    with pytest.raises(ValueError):
        Envelope("h", "300.1.1.1", addr("a@b.example"), (addr("c@d.example"),))
    with pytest.raises(ValueError):
        Envelope("h", "192.0.2.1", addr("a@b.example"), ())


@pytest.mark.parametrize("body, expected", [
    ("visit http://www2.xtinmdesachlion.com/dl now", [("www2.xtinmdesachlion.com", False)]),
    ("no links here", []),
    ("http://192.0.2.7/x and http://192.0.2.7/y", [("192.0.2.7", True)]),
    ("see www.Example.com, then HTTPS://shop.example.org:8080/p", [("www.example.com", False),
                                                                   ("shop.example.org", False)]),
    ("mail me at bob@www.example.com", []),
])
def test_extract_urls(body, expected):
    assert extract_urls(body) == expected


def test_corpus_round_trip(tmp_path):
    msg = make_message("body line\nsecond", "Server report", attachments=(Attachment("a.BAK.exe", 150000),),
                       rcpt=("x@corp.example", "y@corp.example"), at=1_700_000_123.5)
    data = format_corpus_bytes(msg)
    back = parse_corpus_bytes(data)
    assert back == msg
    (tmp_path / "m1").write_bytes(data)
    (tmp_path / ".hidden").write_bytes(b"junk")
    [(path, loaded)] = list(iter_corpus(tmp_path))
    assert path.name == "m1" and loaded == msg


def test_corpus_without_timestamp_uses_mtime(tmp_path):
    p = tmp_path / "m"
    p.write_bytes(b"ENVELOPE ip=192.0.2.1 helo=h from=a@b.example to=c@d.example\nFrom: a@b.example\n\nx")
    os.utime(p, (1000, 1000))
    [(_, msg)] = list(iter_corpus(tmp_path))
    assert msg.received_at == 1000


# --- properties ---------------------------------------------------------------

_label = st.from_regex(r"[a-z][a-z0-9]{0,8}", fullmatch=True)
_host = st.lists(_label, min_size=2, max_size=4).map(".".join)
_ip = st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t)))
_text = st.text(st.characters(min_codepoint=32, max_codepoint=126, blacklist_characters="\\"), max_size=30)


@given(st.lists(st.one_of(_text, _host.map(lambda h: f"http://{h}/p"), _ip.map(lambda h: f"https://{h}"),
                          _host.map(lambda h: f"www.{h}")), max_size=8))
def test_extract_urls_properties(parts):
    body = " ".join(parts)
    hosts = extract_urls(body)
    names = [h for h, _ in hosts]
    assert len(names) == len(set(names))
    for name in names:
        assert name in body.lower()
    # idempotent on its own output
    again = extract_urls(" ".join(f"http://{h}/" for h in names))
    assert [h for h, _ in again] == names


_subject = st.text(st.characters(min_codepoint=33, max_codepoint=126), max_size=20)
_attachment = st.builds(Attachment, st.from_regex(r"[A-Za-z0-9_]{1,8}(\.[A-Za-z]{1,4}){0,2}", fullmatch=True),
                        st.integers(0, 10**7))


@given(_subject, st.lists(_attachment, max_size=3),
       st.lists(st.from_regex(r"[a-z]{1,6}@corp\.example", fullmatch=True), min_size=1, max_size=4))
def test_serialization_preserves_fields(subject, attachments, rcpts):
    msg = make_message("line one\nline two", subject, rcpt=rcpts, attachments=attachments)
    back = parse_message(format_message(msg), msg.envelope, 0)
    assert back.subject == subject
    assert back.header_from == msg.header_from
    assert back.envelope.rcpt_to == msg.envelope.rcpt_to
    assert [(a.filename, a.size_bytes) for a in back.attachments] == [(a.filename, a.size_bytes)
                                                                     for a in attachments]
