"""BLEU-1..4, Distinct-1..3 and word-frequency profiles over generated responses."""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .corpus import read_lines

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def modified_precision(candidate: Tokens, reference: Tokens, n: int) -> tuple[int, int]:
    """Clipped n-gram matches and total candidate n-grams for one pair."""
    cand = Counter(ngrams(candidate, n))
    ref = Counter(ngrams(reference, n))
    matches = sum(min(c, ref[g]) for g, c in cand.items())
    return matches, sum(cand.values())


def _combine(matches: list[int], totals: list[int], c: int, r: int, max_n: int, smooth: bool) -> float:
    if c == 0:
        return 0.0
    log_p = 0.0
    for k in range(max_n):
        num, den = matches[k], totals[k]
        if k >= 1 and num == 0 and smooth:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_p += math.log(num / den) / max_n
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p)


def bleu_score(
    candidates: Sequence[Tokens],
    references: Sequence[Tokens],
    max_n: int = 4,
    smooth: bool = True,
    sentence_level: bool = False,
) -> list[float]:
    """BLEU-1..max_n on the 0-100 scale.

    BLEU-n is the geometric mean of clipped precisions of orders 1..n with
    uniform weights, times the brevity penalty exp(1 - r/c) when c < r.
    Corpus level pools counts and lengths over all pairs; ``sentence_level``
    averages per-pair scores instead. With ``smooth`` an order >= 2 with no
    matches gets one added to its numerator and denominator.
    """
    if len(candidates) != len(references):
        raise ValueError("candidate and reference lists differ in length")
    if not candidates:
        raise ValueError("empty corpus")
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must lie in 1..4")

    if sentence_level:
        scores = [bleu_score([c], [r], max_n, smooth) for c, r in zip(candidates, references)]
        return [sum(s[k] for s in scores) / len(scores) for k in range(max_n)]

    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for k in range(max_n):
            m, t = modified_precision(cand, ref, k + 1)
            matches[k] += m
            totals[k] += t
    return [_combine(matches, totals, c_len, r_len, n, smooth) for n in range(1, max_n + 1)]


def distinct_n(responses: Sequence[Tokens], n: int) -> tuple[float, int]:
    """(unique n-grams / all n-grams, unique n-grams), pooled over every response."""
    if n not in (1, 2, 3):
        raise ValueError("n must be 1, 2 or 3")
    seen = set()
    total = 0
    for r in responses:
        grams = ngrams(r, n)
        total += len(grams)
        seen.update(grams)
    if total == 0:
        return 0.0, 0
    return len(seen) / total, len(seen)


def format_distinct(ratio: float, count: int) -> str:
    return f"{ratio:.3f}/{count}"


def is_punctuation(tok: str) -> bool:
    return not any(ch.isalnum() for ch in tok)


def word_frequency_profile(responses: Sequence[Tokens], k: int = 10, exclude_punct: bool = True) -> list[tuple[str, int]]:
    counts: Counter[str] = Counter()
    for r in responses:
        counts.update(t for t in r if not (exclude_punct and is_punctuation(t)))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


@dataclass
class EvalReport:
    bleu: list[float]
    distinct: list[tuple[float, int]]
    top_words: list[tuple[str, int]]
    num_pairs: int
    label: str = ""
    sentence_bleu: bool = False
    extra: dict = field(default_factory=dict)

    def distinct_strings(self) -> list[str]:
        return [format_distinct(r, c) for r, c in self.distinct]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distinct"] = [list(x) for x in self.distinct]
        d["top_words"] = [list(x) for x in self.top_words]
        d["distinct_str"] = self.distinct_strings()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            bleu=list(d["bleu"]),
            distinct=[(float(r), int(c)) for r, c in d["distinct"]],
            top_words=[(str(w), int(c)) for w, c in d["top_words"]],
            num_pairs=int(d["num_pairs"]),
            label=d.get("label", ""),
            sentence_bleu=bool(d.get("sentence_bleu", False)),
            extra=dict(d.get("extra", {})),
        )

    @classmethod
    def from_json(cls, s: str) -> "EvalReport":
        return cls.from_dict(json.loads(s))

    def summary_row(self) -> str:
        bleu = " ".join(f"{b:.2f}" for b in self.bleu)
        return f"{self.label or '-'}\tBLEU {bleu}\tDistinct {' '.join(self.distinct_strings())}"


def flatten_turns(item: Sequence[Tokens]) -> list[str]:
    return [t for turn in item for t in turn]


def evaluate_responses(
    responses: Sequence[Tokens],
    references: Sequence[Tokens],
    top_k: int = 10,
    sentence_bleu: bool = False,
    label: str = "",
) -> EvalReport:
    return EvalReport(
        bleu=bleu_score(responses, references, 4, sentence_level=sentence_bleu),
        distinct=[distinct_n(responses, n) for n in (1, 2, 3)],
        top_words=word_frequency_profile(responses, top_k, exclude_punct=True),
        num_pairs=len(responses),
        label=label,
        sentence_bleu=sentence_bleu,
    )


def eval_report(
    responses_path: str | os.PathLike,
    references_path: str | os.PathLike,
    top_k: int = 10,
    sentence_bleu: bool = False,
    label: str = "",
) -> EvalReport:
    """Score a responses file against a references file, line by line.

    Multi-turn lines (``__eou__``-separated) are scored with their turns
    concatenated.
    """
    hyp = [flatten_turns(x) for x in read_lines(responses_path)]
    ref = [flatten_turns(x) for x in read_lines(references_path)]
    if len(hyp) != len(ref):
        raise ValueError(f"{responses_path} has {len(hyp)} lines but {references_path} has {len(ref)}")
    return evaluate_responses(hyp, ref, top_k, sentence_bleu, label)


def write_frequency_table(path: str | os.PathLike, profile: Sequence[tuple[str, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rank, (word, count) in enumerate(profile, start=1):
            fh.write(f"{rank}\t{word}\t{count}\n")
