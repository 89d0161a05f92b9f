"""Dialogue corpora: parsing, vocabulary, training examples and padded batches.

Corpus files hold one dialogue per line with utterances separated by the
literal ``__eou__`` delimiter (the DailyDialog convention).
"""

from __future__ import annotations

import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

EOU_DELIM = "__eou__"

PAD, UNK, SOS, EOU = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<sos>", "<eou>")

MODES = ("next_turn", "two_prev_source", "two_turn_target")


class EmptyCorpusError(ValueError):
    pass


@dataclass
class Dialogue:
    utterances: list[list[str]]

    @property
    def num_tokens(self) -> int:
        return sum(len(u) for u in self.utterances)

    def __len__(self) -> int:
        return len(self.utterances)


def tokenize_utterance(raw: str) -> list[str]:
    """Lowercase and split on whitespace. Punctuation is assumed pre-spaced."""
    return raw.lower().split()


def parse_line(line: str) -> Dialogue | None:
    """One corpus line to a dialogue; None when fewer than two utterances survive."""
    utts = [tokenize_utterance(part) for part in line.split(EOU_DELIM)]
    utts = [u for u in utts if u]
    if len(utts) < 2:
        return None
    return Dialogue(utts)


def parse_corpus(path: str | os.PathLike, format: str = "eou_lines") -> tuple[list[Dialogue], int]:
    """Read a corpus file.

    Returns the dialogues in file order and the number of non-blank lines
    dropped for having fewer than two utterances.
    """
    if format != "eou_lines":
        raise ValueError(f"unsupported corpus format {format!r}")
    dialogues: list[Dialogue] = []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = parse_line(line)
            if d is None:
                dropped += 1
            else:
                dialogues.append(d)
    if dropped:
        logger.info("%s: dropped %d dialogue(s) with fewer than two utterances", path, dropped)
    if not dialogues:
        raise EmptyCorpusError(f"{path}: no valid dialogues")
    return dialogues, dropped


def filter_dialogues(ds: Sequence[Dialogue], max_tokens: int = 300) -> tuple[list[Dialogue], int]:
    """Keep dialogues with at most ``max_tokens`` tokens; returns (kept, removed)."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    kept = [d for d in ds if d.num_tokens <= max_tokens]
    removed = len(ds) - len(kept)
    if removed:
        logger.info("removed %d dialogue(s) longer than %d tokens", removed, max_tokens)
    return kept, removed


class Vocabulary:
    """Token <-> id map with PAD/UNK/SOS/EOU fixed at ids 0..3."""

    def __init__(self, tokens: Iterable[str] = (), counts: dict[str, int] | None = None):
        self.itos: list[str] = list(RESERVED_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        self.counts: dict[str, int] = dict(counts or {})
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate or reserved token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def id(self, tok: str) -> int:
        return self.stoi.get(tok, UNK)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD, SOS, EOU):
                continue
            out.append(self.itos[i])
        return out

    def words(self) -> list[str]:
        return self.itos[len(RESERVED_TOKENS):]

    def dump(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.itos):
                fh.write(f"{tok}\t{i}\t{self.counts.get(tok, 0)}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                tok, idx, count = line.rstrip("\n").split("\t")
                rows.append((int(idx), tok, int(count)))
        rows.sort()
        if [r[1] for r in rows[: len(RESERVED_TOKENS)]] != list(RESERVED_TOKENS):
            raise ValueError(f"{path}: reserved tokens missing or out of order")
        words = rows[len(RESERVED_TOKENS):]
        return cls([t for _, t, _ in words], {t: c for _, t, c in words})


def build_vocabulary(ds: Sequence[Dialogue], cap: int) -> Vocabulary:
    """Keep the ``cap`` most frequent tokens; equal counts rank lexicographically."""
    if not ds:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    if cap < 1:
        raise ValueError("vocabulary cap must be >= 1")
    counter: Counter[str] = Counter()
    for d in ds:
        for u in d.utterances:
            counter.update(u)
    for tok in RESERVED_TOKENS:
        counter.pop(tok, None)
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    return Vocabulary([t for t, _ in ranked], dict(ranked))


@dataclass
class TrainingExample:
    """Context utterances and one or two target utterances.

    Targets carry a trailing EOU once encoded; raw (string) examples hold the
    bare surface tokens.
    """

    context: list[list]
    targets: list[list]

    @property
    def target(self) -> list:
        return self.targets[0]


def make_examples(ds: Sequence[Dialogue], mode: str = "next_turn") -> list[TrainingExample]:
    if mode not in MODES:
        raise ValueError(f"unknown example mode {mode!r}; expected one of {MODES}")
    out: list[TrainingExample] = []
    for d in ds:
        u = d.utterances
        n = len(u)
        if mode == "next_turn":
            for i in range(1, n):
                out.append(TrainingExample([list(x) for x in u[:i]], [list(u[i])]))
        elif mode == "two_prev_source":
            for i in range(2, n):
                out.append(TrainingExample([list(u[i - 2]), list(u[i - 1])], [list(u[i])]))
        else:
            for i in range(1, n - 1):
                out.append(TrainingExample([list(x) for x in u[:i]], [list(u[i]), list(u[i + 1])]))
    return out


def single_turn(examples: Sequence[TrainingExample]) -> list[TrainingExample]:
    """Split two-turn examples into the two single-turn problems they pose.

    The second turn is conditioned on the context extended by the first.
    """
    out = []
    for ex in examples:
        ctx = [list(c) for c in ex.context]
        for tgt in ex.targets:
            out.append(TrainingExample([list(c) for c in ctx], [list(tgt)]))
            ctx = ctx + [[t for t in tgt if t != EOU]]
    return out


def encode_example(ex: TrainingExample, vocab: Vocabulary) -> TrainingExample:
    return TrainingExample(
        [vocab.encode(u) for u in ex.context],
        [vocab.encode(t) + [EOU] for t in ex.targets],
    )


def decode_example(ex: TrainingExample, vocab: Vocabulary) -> TrainingExample:
    return TrainingExample(
        [vocab.decode(u) for u in ex.context],
        [vocab.decode(t) for t in ex.targets],
    )


@dataclass
class Batch:
    """Padded id-space batch.

    Context utterances of all examples are flattened into ``utt_ids``; the
    index arrays map them back to examples and give each example's word
    states in turn order (``mem_index`` points into the flattened
    ``[num_utts * max_utt_len]`` grid of word-level states).
    """

    utt_ids: np.ndarray  # [U, L]
    utt_mask: np.ndarray  # [U, L] float
    utt_lens: np.ndarray  # [U]
    ctx_index: np.ndarray  # [B, N] rows of utt_ids, 0 where padded
    ctx_mask: np.ndarray  # [B, N] float
    mem_index: np.ndarray  # [B, T]
    mem_mask: np.ndarray  # [B, T] bool
    tgt_in: np.ndarray | None = None  # [B, M] SOS y_1 .. y_{m-1}
    tgt_out: np.ndarray | None = None  # [B, M] y_1 .. y_m
    tgt_mask: np.ndarray | None = None  # [B, M] float
    tgt_lens: np.ndarray | None = None  # [B]
    examples: list[TrainingExample] = field(default_factory=list, repr=False)

    @property
    def size(self) -> int:
        return self.ctx_index.shape[0]

    @property
    def context_lengths(self) -> np.ndarray:
        return self.mem_mask.sum(axis=1)


def make_batch(examples: Sequence[TrainingExample], with_targets: bool = True) -> Batch:
    """Pad a list of encoded single-target examples into one batch."""
    if not examples:
        raise ValueError("cannot batch zero examples")
    utts: list[list[int]] = []
    owners: list[list[int]] = []
    for ex in examples:
        if not ex.context:
            raise ValueError("example has an empty context")
        owners.append(list(range(len(utts), len(utts) + len(ex.context))))
        utts.extend(ex.context)
    U = len(utts)
    L = max(1, max(len(u) for u in utts))
    utt_ids = np.full((U, L), PAD, dtype=np.int64)
    utt_lens = np.array([len(u) for u in utts], dtype=np.int64)
    for i, u in enumerate(utts):
        utt_ids[i, : len(u)] = u
    utt_mask = (np.arange(L)[None, :] < utt_lens[:, None]).astype(np.float64)

    B = len(examples)
    N = max(len(o) for o in owners)
    ctx_index = np.zeros((B, N), dtype=np.int64)
    ctx_mask = np.zeros((B, N))
    positions = []
    for b, own in enumerate(owners):
        ctx_index[b, : len(own)] = own
        ctx_mask[b, : len(own)] = 1.0
        positions.append([u * L + t for u in own for t in range(utt_lens[u])])
    T = max(1, max(len(p) for p in positions))
    mem_index = np.zeros((B, T), dtype=np.int64)
    mem_mask = np.zeros((B, T), dtype=bool)
    for b, pos in enumerate(positions):
        mem_index[b, : len(pos)] = pos
        mem_mask[b, : len(pos)] = True

    batch = Batch(utt_ids, utt_mask, utt_lens, ctx_index, ctx_mask, mem_index, mem_mask, examples=list(examples))
    if with_targets:
        tgts = [ex.target for ex in examples]
        if any(len(t) == 0 for t in tgts):
            raise ValueError("empty target")
        M = max(len(t) for t in tgts)
        tgt_out = np.full((B, M), PAD, dtype=np.int64)
        tgt_in = np.full((B, M), PAD, dtype=np.int64)
        lens = np.array([len(t) for t in tgts], dtype=np.int64)
        for b, t in enumerate(tgts):
            tgt_out[b, : len(t)] = t
            tgt_in[b, 0] = SOS
            tgt_in[b, 1 : len(t)] = t[:-1]
        batch.tgt_in = tgt_in
        batch.tgt_out = tgt_out
        batch.tgt_lens = lens
        batch.tgt_mask = (np.arange(M)[None, :] < lens[:, None]).astype(np.float64)
    return batch


def batch_examples(exs: Sequence[TrainingExample], batch_size: int = 8) -> list[Batch]:
    """Consecutive chunks of ``batch_size`` examples, each padded to its own maxima."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [make_batch(exs[i : i + batch_size]) for i in range(0, len(exs), batch_size)]


def read_lines(path: str | os.PathLike) -> list[list[list[str]]]:
    """Read a response/reference file: one line per item, turns split on ``__eou__``.

    Unlike :func:`parse_corpus` empty turns and single-turn lines are kept,
    since a generated response may legitimately be empty.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            parts = line.split(EOU_DELIM)
            if len(parts) > 1 and not parts[-1].strip():
                parts = parts[:-1]
            out.append([tokenize_utterance(p) for p in parts])
    return out


def write_lines(path: str | os.PathLike, items: Sequence[Sequence[Sequence[str]]]) -> None:
    # every turn is closed by the delimiter so empty turns survive a round trip
    with open(path, "w", encoding="utf-8") as fh:
        for turns in items:
            fh.write(" ".join(" ".join([*t, EOU_DELIM]) for t in turns) + "\n")


def write_corpus(path: str | os.PathLike, dialogues: Sequence[Dialogue]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write(" ".join(" ".join(u) + f" {EOU_DELIM}" for u in d.utterances) + "\n")


def toy_corpus(
    n_dialogues: int,
    seed: int = 0,
    n_topics: int = 6,
    words_per_topic: int = 12,
    n_common: int = 10,
    turns: tuple[int, int] = (3, 4),
    utt_len: tuple[int, int] = (2, 6),
    common_prob: float = 0.45,
) -> list[Dialogue]:
    """Synthetic dialogues for smoke tests and demos.

    Each dialogue picks a topic; every token is either a frequent
    "generic" word (Zipf-weighted, shared across topics) or a topic word.
    A model trained on this learns the topic from context and over-produces
    the generic words, which is what the entropy regulariser works against.
    """
    rng = np.random.default_rng(seed)
    common = [f"w{i}" for i in range(n_common)]
    zipf = 1.0 / np.arange(1, n_common + 1)
    zipf /= zipf.sum()
    topics = [[f"t{k}_{i}" for i in range(words_per_topic)] for k in range(n_topics)]
    out = []
    for _ in range(n_dialogues):
        topic = topics[rng.integers(n_topics)]
        n_turns = int(rng.integers(turns[0], turns[1] + 1))
        utts = []
        for _ in range(n_turns):
            n = int(rng.integers(utt_len[0], utt_len[1] + 1))
            utt = []
            for _ in range(n):
                if rng.random() < common_prob:
                    utt.append(common[rng.choice(n_common, p=zipf)])
                else:
                    utt.append(topic[rng.integers(words_per_topic)])
            utts.append(utt)
        out.append(Dialogue(utts))
    return out
