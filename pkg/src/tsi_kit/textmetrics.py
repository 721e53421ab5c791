"""Interpretation metrics: ROUGE-1/2/L, BLEU-4 and Soft Accuracy.

Corpus scores aggregate counts across sentence pairs (not per-sentence means),
so results do not depend on evaluation order.

Soft Accuracy compares *syntax frames*: a description with its slot fillers
(route codes, quantities, destinations, vehicle types) replaced by slot
markers and comma-separated runs of one slot collapsed.  Two descriptions
that differ only in filler choice or filler order therefore score 1.
"""
from __future__ import annotations

import json
import math
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

WS, CJK, AUTO = "whitespace", "cjk-char", "auto"
MODE_ALIASES = {"ws": WS, "whitespace": WS, "cjk": CJK, "cjk-char": CJK, "auto": AUTO}

BLEU_FLOOR = 1e-9
SLOT_PREFIX = "SLOT:"
LIST_SEPARATORS = {",", "，", "、"}


def is_cjk(ch: str) -> bool:
    return ("一" <= ch <= "鿿") or ("㐀" <= ch <= "䶿") or ("豈" <= ch <= "﫿") or (
        "\U00020000" <= ch <= "\U0002ebef")


def has_cjk(text: str) -> bool:
    return any(is_cjk(c) for c in text)


def resolve_mode(text: str, mode: str = AUTO) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode == AUTO:
        return CJK if has_cjk(text) else WS
    if mode not in (WS, CJK):
        raise ValueError(f"unknown tokenizer mode {mode!r}")
    return mode


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple
    mode: str = WS

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if any(t == "" for t in self.tokens):
            raise ValueError("empty token")

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def _split_trailing(word: str) -> list[str]:
    tail = []
    while len(word) > 1 and _is_punct(word[-1]):
        tail.append(word[-1])
        word = word[:-1]
    return [word] + tail[::-1]


_LATIN_RUN = re.compile(r"[A-Za-z0-9]+(?:['./][A-Za-z0-9]+)*")


def _tokens(text: str, mode: str) -> list[str]:
    if mode == WS:
        out = []
        for word in text.split():
            out += _split_trailing(word)
        return out
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        m = _LATIN_RUN.match(text, i)
        if m:
            out.append(m.group())
            i = m.end()
            continue
        out.append(ch)
        i += 1
    return out


def tokenize(text: str, mode: str = AUTO) -> TokenSeq:
    """Whitespace mode splits on whitespace and peels trailing punctuation;
    cjk-char mode emits each ideograph alone and groups Latin/digit runs."""
    mode = resolve_mode(text, mode)
    return TokenSeq(_tokens(text, mode), mode)


# -- n-gram metrics ------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _toks(seq) -> tuple:
    return seq.tokens if isinstance(seq, TokenSeq) else tuple(seq)


def _rouge_n_counts(cand, ref, n: int) -> tuple[int, int]:
    c, r = _ngrams(_toks(cand), n), _ngrams(_toks(ref), n)
    return sum((c & r).values()), sum(r.values())


def rouge_n(candidate, reference, n: int = 1) -> float:
    """Clipped n-gram overlap divided by the reference n-gram count."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    overlap, total = _rouge_n_counts(candidate, reference, n)
    if total == 0:
        return 1.0 if len(_ngrams(_toks(candidate), n)) == 0 else 0.0
    return overlap / total


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _f1(lcs: int, n_cand: int, n_ref: int) -> float:
    if n_cand == 0 and n_ref == 0:
        return 1.0
    if lcs == 0:
        return 0.0
    p, r = lcs / n_cand, lcs / n_ref
    return 2 * p * r / (p + r)


def rouge_l(candidate, reference) -> float:
    """LCS F-measure with beta = 1."""
    c, r = _toks(candidate), _toks(reference)
    return _f1(lcs_length(c, r), len(c), len(r))


def bleu_4(candidates: Sequence, references: Sequence) -> float:
    """Corpus BLEU with uniform weights over 1..4-grams.

    Zero n-gram precisions are floored at 1e-9 before the geometric mean.  An
    order with no candidate n-grams at all scores 1 when the references have
    none either (identical short corpora stay at 1.0) and the floor otherwise.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("bleu_4 needs at least one pair")
    match = [0] * 4
    total = [0] * 4
    ref_total = [0] * 4
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c, r = _toks(cand), _toks(ref)
        c_len += len(c)
        r_len += len(r)
        for n in range(1, 5):
            cn, rn = _ngrams(c, n), _ngrams(r, n)
            match[n - 1] += sum((cn & rn).values())
            total[n - 1] += sum(cn.values())
            ref_total[n - 1] += sum(rn.values())
    if c_len == 0:
        return 1.0 if r_len == 0 else 0.0
    log_p = 0.0
    for n in range(4):
        if total[n] == 0:
            p = 1.0 if ref_total[n] == 0 else BLEU_FLOOR
        else:
            p = max(match[n] / total[n], BLEU_FLOOR)
        log_p += math.log(p) / 4
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return min(bp * math.exp(log_p), 1.0)


def corpus_rouge_n(candidates: Sequence, references: Sequence, n: int) -> float:
    overlap = total = cand_total = 0
    for c, r in zip(candidates, references):
        o, t = _rouge_n_counts(c, r, n)
        overlap += o
        total += t
        cand_total += sum(_ngrams(_toks(c), n).values())
    if total == 0:
        return 1.0 if cand_total == 0 else 0.0
    return overlap / total


def corpus_rouge_l(candidates: Sequence, references: Sequence) -> float:
    lcs = nc = nr = 0
    for c, r in zip(candidates, references):
        c, r = _toks(c), _toks(r)
        lcs += lcs_length(c, r)
        nc += len(c)
        nr += len(r)
    return _f1(lcs, nc, nr)


# -- syntax frames -------------------------------------------------------------

@dataclass(frozen=True)
class SyntaxFrame:
    skeleton: tuple

    def __post_init__(self):
        object.__setattr__(self, "skeleton", tuple(self.skeleton))
        if not any(not t.startswith(SLOT_PREFIX) for t in self.skeleton):
            raise FramelessDescription("frameless description")

    def __str__(self) -> str:
        return "--".join(self.skeleton)


class FramelessDescription(ValueError):
    pass


def _bounded_literal(entity: str) -> str:
    pat = re.escape(entity)
    if re.match(r"[A-Za-z0-9]", entity[0]):
        pat = r"(?<![A-Za-z0-9])" + pat
    if re.match(r"[A-Za-z0-9]", entity[-1]):
        pat = pat + r"(?![A-Za-z0-9])"
    return pat


DEFAULT_REGEX_SLOTS = (
    {"pattern": r"(?<![A-Za-z0-9])[GS][0-9]+(?![A-Za-z0-9])", "slot": "route"},
    {"pattern": r"(?<![A-Za-z0-9.])[0-9]+(?:\.[0-9]+)?\s?(?:km/h|km|m|t)(?![A-Za-z0-9])",
     "slot": "quantity"},
)


@dataclass
class SlotRules:
    """Regex slot patterns plus an entity lexicon (entity -> slot name)."""

    regex_slots: list = field(default_factory=lambda: [dict(r) for r in DEFAULT_REGEX_SLOTS])
    lexicon: dict = field(default_factory=dict)

    def __post_init__(self):
        self._compiled = [(re.compile(r["pattern"]), r["slot"]) for r in self.regex_slots]
        ents = sorted(self.lexicon, key=lambda e: (-len(e), e))
        self._lex = [(re.compile(_bounded_literal(e)), self.lexicon[e]) for e in ents if e]

    def spans(self, text: str) -> list[tuple[int, int, str]]:
        """Maximal non-overlapping slot spans, longest first then leftmost."""
        found = []
        for rx, slot in self._compiled + self._lex:
            for m in rx.finditer(text):
                if m.end() > m.start():
                    found.append((m.start(), m.end(), slot))
        found.sort(key=lambda s: (-(s[1] - s[0]), s[0], s[2]))
        taken: list[tuple[int, int, str]] = []
        for s in found:
            if all(s[1] <= t[0] or s[0] >= t[1] for t in taken):
                taken.append(s)
        return sorted(taken)

    def to_dict(self) -> dict:
        return {"regex_slots": [dict(r) for r in self.regex_slots],
                "lexicon": dict(sorted(self.lexicon.items()))}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "SlotRules":
        regex = data.get("regex_slots")
        return cls([dict(r) for r in regex] if regex is not None else
                   [dict(r) for r in DEFAULT_REGEX_SLOTS], dict(data.get("lexicon", {})))

    @classmethod
    def load(cls, path) -> "SlotRules":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _collapse(tokens: list[str]) -> list[str]:
    out: list[str] = []
    i = 0
    while i < len(tokens):
        t = tokens[i]
        out.append(t)
        if t.startswith(SLOT_PREFIX):
            while (i + 2 < len(tokens) and tokens[i + 1] in LIST_SEPARATORS
                   and tokens[i + 2] == t):
                i += 2
        i += 1
    return out


def frame_tokens(pieces: Iterable[tuple[str, str]], mode: str) -> list[str]:
    """Tokens of ``(kind, value)`` pieces; kind ``"slot"`` pieces become markers."""
    toks: list[str] = []
    for kind, value in pieces:
        if kind == "slot":
            toks.append(SLOT_PREFIX + value)
        else:
            toks += _tokens(value, mode)
    return _collapse(toks)


def extract_frame(description: str, slot_rules: SlotRules, mode: str = AUTO) -> SyntaxFrame:
    mode = resolve_mode(description, mode)
    pieces = []
    pos = 0
    for start, end, slot in slot_rules.spans(description):
        pieces.append(("text", description[pos:start]))
        pieces.append(("slot", slot))
        pos = end
    pieces.append(("text", description[pos:]))
    return SyntaxFrame(frame_tokens(pieces, mode))


def soft_accuracy(cands: Sequence[str], refs: Sequence[str], slot_rules: SlotRules,
                  mode: str = AUTO) -> float:
    """Fraction of pairs whose syntax frames are equal; frameless pairs score 0."""
    if len(cands) != len(refs):
        raise ValueError(f"{len(cands)} candidates vs {len(refs)} references")
    if not cands:
        return 1.0
    hits = 0
    for c, r in zip(cands, refs):
        try:
            hits += int(extract_frame(c, slot_rules, mode) == extract_frame(r, slot_rules, mode))
        except FramelessDescription:
            pass
    return hits / len(cands)


@dataclass(frozen=True)
class MetricScores:
    rouge1: float
    rouge2: float
    rougeL: float
    bleu4: float
    soft_accuracy: float

    def as_report(self) -> dict:
        """Percentages with 2 decimals, keyed like the results tables."""
        return {"R1": round(100 * self.rouge1, 2), "R2": round(100 * self.rouge2, 2),
                "Rl": round(100 * self.rougeL, 2), "B4": round(100 * self.bleu4, 2),
                "SA": round(100 * self.soft_accuracy, 2)}


def score_corpus(cands: Sequence[str], refs: Sequence[str], slot_rules: SlotRules,
                 mode: str = AUTO) -> MetricScores:
    if len(cands) != len(refs):
        raise ValueError(f"{len(cands)} candidates vs {len(refs)} references")
    if not cands:
        return MetricScores(1.0, 1.0, 1.0, 1.0, 1.0)
    # tokenizer auto-detection follows the reference so a pair shares one mode
    ct = [tokenize(c, resolve_mode(r, mode)) for c, r in zip(cands, refs)]
    rt = [tokenize(r, mode) for r in refs]
    return MetricScores(corpus_rouge_n(ct, rt, 1), corpus_rouge_n(ct, rt, 2),
                        corpus_rouge_l(ct, rt), bleu_4(ct, rt),
                        soft_accuracy(cands, refs, slot_rules, mode))
