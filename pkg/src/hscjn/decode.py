"""Greedy and beam-search decoding.

Both decoders are written against a small step interface so they can be
driven by the neural model or by a hand-built table of distributions:

    step_fn(prefixes, states) -> (logp [k, V], new_states)

where ``prefixes`` are the token tuples of the k live hypotheses (including
the start symbol is up to the caller) and ``states`` their opaque states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import tensor as T
from .corpus import EOU, PAD, SOS, TrainingExample, make_batch
from .model import DecoderState, EncoderOutput, HREDModel

StepFn = Callable[[list[tuple[int, ...]], list[Any]], tuple[np.ndarray, list[Any]]]


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    state: Any = field(default=None, repr=False)
    finished: bool = False

    def surface(self, eou: int = EOU) -> list[int]:
        toks = list(self.tokens)
        if toks and toks[-1] == eou:
            toks.pop()
        return toks


def _top_tokens(logp: np.ndarray, k: int) -> np.ndarray:
    # stable sort keeps lower ids first among equal scores
    return np.argsort(-logp, kind="stable")[:k]


def _rank_key(h: Hypothesis, length_norm: bool):
    score = h.score / max(len(h.tokens), 1) if length_norm else h.score
    return (-score, h.tokens)


def beam_search_fn(
    step_fn: StepFn,
    init_state: Any,
    width: int,
    max_len: int,
    eou: int = EOU,
    length_norm: bool = False,
) -> Hypothesis:
    """Beam search over a generic step function.

    Each round expands every live hypothesis by its top-``width`` tokens and
    keeps the best ``width`` candidates. Candidates ending in EOU, or reaching
    ``max_len`` tokens, retire to the finished pool. The best finished
    hypothesis is returned; equal scores go to the lexicographically smaller
    token sequence.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    live = [Hypothesis((), 0.0, init_state)]
    pool: list[Hypothesis] = []
    while live:
        logp, states = step_fn([h.tokens for h in live], [h.state for h in live])
        logp = np.asarray(logp, dtype=np.float64)
        cands = []
        for i, h in enumerate(live):
            for tok in _top_tokens(logp[i], width):
                tok = int(tok)
                if logp[i, tok] == -np.inf:
                    continue
                toks = h.tokens + (tok,)
                done = tok == eou or len(toks) >= max_len
                cands.append(Hypothesis(toks, h.score + float(logp[i, tok]), states[i], done))
        cands.sort(key=lambda c: _rank_key(c, length_norm))
        live = []
        for c in cands[:width]:
            (pool if c.finished else live).append(c)
        if pool and live and not length_norm:
            # log-probs are <= 0, so no live extension can overtake the pool's best
            best_done = max(h.score for h in pool)
            if best_done >= max(h.score for h in live):
                break
    pool.sort(key=lambda c: _rank_key(c, length_norm))
    return pool[0]


def greedy_fn(step_fn: StepFn, init_state: Any, max_len: int, eou: int = EOU) -> Hypothesis:
    """Arg-max token at each step until EOU or ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    toks: tuple[int, ...] = ()
    score = 0.0
    state = init_state
    while True:
        logp, states = step_fn([toks], [state])
        row = np.asarray(logp[0], dtype=np.float64)
        tok = int(_top_tokens(row, 1)[0])
        toks = toks + (tok,)
        score += float(row[tok])
        state = states[0]
        if tok == eou or len(toks) >= max_len:
            return Hypothesis(toks, score, state, True)


def enumerate_finished(step_fn: StepFn, init_state: Any, vocab_size: int, max_len: int, eou: int = EOU):
    """Every finished sequence reachable under ``max_len``, with its log-prob.

    Brute force; exponential in ``max_len``, meant as a test oracle.
    """
    out = []
    frontier = [((), 0.0, init_state)]
    while frontier:
        nxt = []
        for toks, score, state in frontier:
            logp, states = step_fn([toks], [state])
            for tok in range(vocab_size):
                t2 = toks + (tok,)
                s2 = score + float(logp[0][tok])
                if tok == eou or len(t2) >= max_len:
                    out.append((t2, s2))
                else:
                    nxt.append((t2, s2, states[0]))
        frontier = nxt
    return out


class TableModel:
    """Step function backed by explicit per-prefix log-distributions.

    ``table`` maps a prefix tuple to a log-probability vector; missing
    prefixes fall back to ``default``. Used to drive the decoders in tests.
    """

    def __init__(self, table: dict[tuple[int, ...], np.ndarray], default: np.ndarray | None = None):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.default = None if default is None else np.asarray(default, dtype=np.float64)

    def __call__(self, prefixes, states):
        rows = []
        for p in prefixes:
            if p in self.table:
                rows.append(self.table[p])
            elif self.default is not None:
                rows.append(self.default)
            else:
                raise KeyError(f"no distribution for prefix {p}")
        return np.stack(rows), list(states)


# ---------------------------------------------------------------------------
# neural model adapter


class ModelStepper:
    """Step function over an :class:`HREDModel` for one encoded context.

    PAD and SOS are never emitted; they are not valid output symbols.
    """

    banned = (PAD, SOS)

    def __init__(self, model: HREDModel, context: Sequence[Sequence[int]], ban_special: bool = True):
        self.model = model
        self.ban_special = ban_special
        with T.no_grad():
            batch = make_batch([TrainingExample([list(u) for u in context], [])], with_targets=False)
            self.enc: EncoderOutput = model.encode(batch)
            self.init_state = model.init_decoder_state(self.enc)
        self._expanded: dict[int, EncoderOutput] = {1: self.enc}

    def _enc(self, k: int) -> EncoderOutput:
        if k not in self._expanded:
            self._expanded[k] = self.enc.expand(k)
        return self._expanded[k]

    def initial(self):
        return (self.init_state.s.data[0], self.init_state.cell.data[0])

    def __call__(self, prefixes, states):
        k = len(prefixes)
        prev = np.array([p[-1] if p else SOS for p in prefixes], dtype=np.int64)
        s = T.Tensor(np.stack([st[0] for st in states]))
        c = T.Tensor(np.stack([st[1] for st in states]))
        with T.no_grad():
            out = self.model.decoder_step(prev, DecoderState(s, c), self._enc(k))
        logp = out.logp.data.astype(np.float64)
        if self.ban_special:
            logp[:, list(self.banned)] = -np.inf
        new = [(out.state.s.data[i], out.state.cell.data[i]) for i in range(k)]
        return logp, new


def greedy_decode(model: HREDModel, context: Sequence[Sequence[int]], max_len: int = 50) -> list[int]:
    stepper = ModelStepper(model, context)
    return greedy_fn(stepper, stepper.initial(), max_len).surface()


def beam_search(
    model: HREDModel,
    context: Sequence[Sequence[int]],
    width: int = 5,
    max_len: int = 50,
    length_norm: bool = False,
) -> list[int]:
    """Best EOU-stripped token sequence for one context (list of id lists)."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    stepper = ModelStepper(model, context)
    return beam_search_fn(stepper, stepper.initial(), width, max_len, length_norm=length_norm).surface()


def generate(
    model: HREDModel,
    context: Sequence[Sequence[int]],
    n_turns: int = 1,
    width: int = 5,
    max_len: int = 50,
    length_norm: bool = False,
) -> list[list[int]]:
    """Generate ``n_turns`` consecutive utterances.

    After each turn the generated utterance is appended to the context and the
    whole context re-encoded. An empty turn is appended as a lone EOU token so
    the next encoding still sees an utterance there.
    """
    ctx = [list(u) for u in context]
    turns = []
    for _ in range(n_turns):
        out = beam_search(model, ctx, width, max_len, length_norm)
        turns.append(out)
        ctx.append(list(out) if out else [EOU])
    return turns
