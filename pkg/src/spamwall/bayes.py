"""Token-probability spam classifier over a two-table dictionary.

Per-token probability::

    s = spam_count / spam_msgs
    h = 2 * ham_count / ham_msgs
    p = clamp(s / (s + h), 0.01, 0.99)      (0.4 when the token was never seen)

The fifteen tokens furthest from 0.5 are combined as
``prod(p) / (prod(p) + prod(1 - p))``, evaluated in log space.
"""

from __future__ import annotations

import enum
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from .message import Message

UNSEEN = 0.4
P_MIN, P_MAX = 0.01, 0.99
MAX_INTERESTING = 15
DEFAULT_THRESHOLD = 0.9

_SPLIT_RE = re.compile(r"[^A-Za-z0-9$!'-]+")


class DictionaryEmpty(ValueError):
    pass


class Label(enum.Enum):
    SPAM = "Spam"
    HAM = "Ham"


@dataclass
class BayesDictionary:
    spam_counts: Counter = field(default_factory=Counter)
    ham_counts: Counter = field(default_factory=Counter)
    spam_msgs: int = 0
    ham_msgs: int = 0

    def save(self, path: str | os.PathLike):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"MSGS\t{self.spam_msgs}\t{self.ham_msgs}\n")
            for table, counts in (("spam", self.spam_counts), ("ham", self.ham_counts)):
                for token in sorted(counts):
                    fh.write(f"{table}\t{token}\t{counts[token]}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BayesDictionary":
        d = cls()
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if len(header) != 3 or header[0] != "MSGS":
                raise ValueError(f"{path}: missing MSGS header line")
            d.spam_msgs, d.ham_msgs = int(header[1]), int(header[2])
            for lineno, line in enumerate(fh, 2):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3 or parts[0] not in ("spam", "ham"):
                    raise ValueError(f"{path}:{lineno}: malformed dictionary line")
                table = d.spam_counts if parts[0] == "spam" else d.ham_counts
                table[parts[1]] = int(parts[2])
        return d


@dataclass
class BayesScore:
    probability: float
    contributing: list[tuple[str, float]]


def tokenize(text: str, prefix: str = "") -> list[str]:
    """Distinct lowercased tokens of length 3..40, in first-seen order."""
    seen = {}
    for raw in _SPLIT_RE.split(text):
        if 3 <= len(raw) <= 40:
            seen.setdefault(prefix + raw.lower(), None)
    return list(seen)


def message_tokens(msg: Message) -> list[str]:
    tokens = dict.fromkeys(tokenize(msg.body_text))
    tokens.update(dict.fromkeys(tokenize(msg.subject, "subj:")))
    for att in msg.attachments:
        tokens.update(dict.fromkeys(tokenize(att.filename, "att:")))
    return list(tokens)


def token_probability(token: str, d: BayesDictionary) -> float:
    if d.spam_msgs < 1 or d.ham_msgs < 1:
        raise DictionaryEmpty("dictionary needs at least one spam and one ham message")
    s = d.spam_counts.get(token, 0) / d.spam_msgs
    h = 2 * d.ham_counts.get(token, 0) / d.ham_msgs
    if s + h == 0:
        return UNSEEN
    return min(P_MAX, max(P_MIN, s / (s + h)))


def combine(probabilities: Iterable[float]) -> float:
    log_p = log_q = 0.0
    for p in probabilities:
        log_p += math.log(p)
        log_q += math.log1p(-p)
    # P = 1 / (1 + exp(log_q - log_p))
    diff = log_q - log_p
    if diff > 700:
        return 0.0
    return 1.0 / (1.0 + math.exp(diff))


def score_tokens(tokens: Iterable[str], d: BayesDictionary) -> BayesScore:
    scored = [(t, token_probability(t, d)) for t in set(tokens)]
    scored.sort(key=lambda tp: (-abs(tp[1] - 0.5), tp[0]))
    interesting = scored[:MAX_INTERESTING]
    return BayesScore(combine(p for _, p in interesting), interesting)


def classify(msg: Message, d: BayesDictionary, threshold: float = DEFAULT_THRESHOLD) -> tuple[bool, BayesScore]:
    score = score_tokens(message_tokens(msg), d)
    return score.probability >= threshold, score


def train(corpus: Iterable[tuple[Message, Label]]) -> BayesDictionary:
    d = BayesDictionary()
    empty = True
    for msg, label in corpus:
        empty = False
        tokens = message_tokens(msg)
        if label is Label.SPAM:
            d.spam_counts.update(tokens)
            d.spam_msgs += 1
        else:
            d.ham_counts.update(tokens)
            d.ham_msgs += 1
    if empty:
        raise ValueError("training corpus is empty")
    return d
