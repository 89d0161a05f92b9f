"""Hierarchical recurrent encoder-decoder with attention.

A word-level GRU reads every context utterance (shared weights); its final
state per utterance feeds an utterance-level GRU in turn order. An LSTM
decoder attends over all word-level states of the context and emits a
softmax over the vocabulary at each step. Parameters for the auxiliary
future-word prediction head live here too so one checkpoint holds
everything; the head itself is evaluated in :mod:`hscjn.losses`.

All ops work on batches: the first axis is always the example.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as T
from .corpus import Batch
from .tensor import Tensor, ShapeError

ATTENTION_KINDS = ("additive", "scalar_wc")


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    word_enc_dim: int = 64
    utt_enc_dim: int = 128
    dec_dim: int = 64
    head_hidden_dim: int | None = None  # defaults to dec_dim
    attn_dim: int | None = None  # defaults to dec_dim
    dropout_rate: float = 0.25
    bidirectional_word_encoder: bool = False
    attention: str = "additive"
    init_std: float = 0.01
    dtype: str = "float32"

    def __post_init__(self):
        if self.head_hidden_dim is None:
            self.head_hidden_dim = self.dec_dim
        if self.attn_dim is None:
            self.attn_dim = self.dec_dim
        self.validate()

    def validate(self) -> None:
        dims = ("embed_dim", "word_enc_dim", "utt_enc_dim", "dec_dim", "head_hidden_dim", "attn_dim")
        for name in dims:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must be >= 5 (four reserved ids plus one word)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"attention must be one of {ATTENTION_KINDS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def full_scale(cls, vocab_size: int, **overrides) -> "ModelConfig":
        base = dict(embed_dim=300, word_enc_dim=500, utt_enc_dim=1000, dec_dim=500)
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) in the fixed order parameters are drawn."""
    V, E, Hw, Hu, D = cfg.vocab_size, cfg.embed_dim, cfg.word_enc_dim, cfg.utt_enc_dim, cfg.dec_dim
    A, Hh = cfg.attn_dim, cfg.head_hidden_dim
    specs = [("embedding", (V, E), "normal")]

    def gru(prefix, n_in, h):
        return [
            (f"{prefix}.W", (n_in, 3 * h), "normal"),
            (f"{prefix}.U_zr", (h, 2 * h), "orthogonal"),
            (f"{prefix}.U_h", (h, h), "orthogonal"),
            (f"{prefix}.b", (3 * h,), "zeros"),
        ]

    specs += gru("word_enc", E, Hw)
    if cfg.bidirectional_word_encoder:
        specs += gru("word_enc_bw", E, Hw)
    specs += gru("utt_enc", Hw, Hu)
    specs += [("init.W", (Hu, D), "normal"), ("init.b", (D,), "zeros")]
    if cfg.attention == "additive":
        specs += [("attn.W_s", (D, A), "normal"), ("attn.W_h", (Hw, A), "normal"), ("attn.v", (A,), "normal")]
    else:
        specs += [("attn.w_s", (D,), "normal"), ("attn.w_h", (Hw,), "normal")]
    specs += [
        ("dec.W", (E + Hw, 4 * D), "normal"),
        ("dec.U", (D, 4 * D), "orthogonal"),
        ("dec.b", (4 * D,), "zeros"),
        ("out.W", (D + Hw, V), "normal"),
        ("out.b", (V,), "zeros"),
        ("head.W1", (E + D + Hw, Hh), "normal"),
        ("head.b1", (Hh,), "zeros"),
        ("head.W1_init", (D + Hw, Hh), "normal"),
        ("head.b1_init", (Hh,), "zeros"),
        ("head.W2", (Hh, Hh), "normal"),
        ("head.b2", (Hh,), "zeros"),
        ("head.W3", (Hh, V), "normal"),
        ("head.b3", (V,), "zeros"),
    ]
    return specs


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    """QR of a Gaussian matrix with Q's columns sign-fixed so diag(R) > 0."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))[None, :]


def init_parameters(cfg: ModelConfig, rng_seed: int) -> dict[str, Tensor]:
    """Orthogonal recurrent blocks, zero biases, N(0, init_std) elsewhere."""
    rng = np.random.default_rng(rng_seed)
    dt = np.dtype(cfg.dtype)
    params = {}
    for name, shape, kind in _param_shapes(cfg):
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "normal":
            arr = rng.normal(0.0, cfg.init_std, size=shape)
        else:
            n = shape[0]
            arr = np.concatenate([orthogonal(rng, n) for _ in range(shape[1] // n)], axis=1)
        params[name] = Tensor(arr.astype(dt), requires_grad=True, name=name)
    return params


def recurrent_blocks(params: dict[str, Tensor]) -> Iterator[tuple[str, np.ndarray]]:
    """Square hidden-to-hidden blocks of every recurrent weight matrix."""
    for name, p in params.items():
        if name.split(".")[-1] in ("U_zr", "U_h", "U"):
            n = p.shape[0]
            for k in range(p.shape[1] // n):
                yield f"{name}[{k}]", p.data[:, k * n : (k + 1) * n]


class Dropout:
    """Inverted dropout driven by an explicit generator."""

    def __init__(self, rate: float, rng: np.random.Generator | None, training: bool = True):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng = rng
        self.training = training

    def __call__(self, x: Tensor) -> Tensor:
        return apply_dropout(x, self.rate, self.training, self.rng)


def apply_dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Zero each element with probability ``rate``; scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return T.mul(x, (keep / (1.0 - rate)).astype(x.dtype))


# ---------------------------------------------------------------------------
# recurrent cells


def _gru_params(params, prefix):
    return params[f"{prefix}.W"], params[f"{prefix}.U_zr"], params[f"{prefix}.U_h"], params[f"{prefix}.b"]


def gru_cell(U_zr: Tensor, U_h: Tensor, xw: Tensor, h: Tensor) -> Tensor:
    """GRU update given the precomputed input projection ``xw = x W + b``."""
    H = h.shape[-1]
    if xw.shape[-1] != 3 * H or U_zr.shape != (H, 2 * H):
        raise ShapeError(f"gru: state width {H} does not match projections {xw.shape}, {U_zr.shape}")
    zr = T.sigmoid(xw[:, : 2 * H] + h @ U_zr)
    z = zr[:, :H]
    r = zr[:, H:]
    cand = T.tanh(xw[:, 2 * H :] + (r * h) @ U_h)
    return h + z * (cand - h)


def gru_step(params: dict[str, Tensor], x: Tensor, h: Tensor, prefix: str = "word_enc") -> Tensor:
    """h' = (1 - z) h + z tanh(W_h [x, r h] + b_h) with sigmoid update/reset gates."""
    W, U_zr, U_h, b = _gru_params(params, prefix)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"gru: input width {x.shape[-1]} != {W.shape[0]}")
    return gru_cell(U_zr, U_h, x @ W + b, h)


def lstm_step(params: dict[str, Tensor], x: Tensor, h: Tensor, c: Tensor, prefix: str = "dec") -> tuple[Tensor, Tensor]:
    W, U, b = params[f"{prefix}.W"], params[f"{prefix}.U"], params[f"{prefix}.b"]
    D = h.shape[-1]
    if x.shape[-1] != W.shape[0] or U.shape != (D, 4 * D) or c.shape != h.shape:
        raise ShapeError(f"lstm: shapes x{x.shape} h{h.shape} c{c.shape} vs W{W.shape} U{U.shape}")
    gates = x @ W + h @ U + b
    sig = T.sigmoid(gates)
    i = sig[:, :D]
    f = sig[:, D : 2 * D]
    o = sig[:, 3 * D :]
    g = T.tanh(gates[:, 2 * D : 3 * D])
    c_new = f * c + i * g
    return o * T.tanh(c_new), c_new


# ---------------------------------------------------------------------------
# encoder / attention / decoder


@dataclass
class EncoderOutput:
    word_states: Tensor  # [B, T, Hw]
    mask: np.ndarray  # [B, T] bool, True at real positions
    utterance_summary: Tensor  # [B, Hu]
    keys: Tensor  # attention projection of word_states, [B, T, A] or [B, T]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def expand(self, k: int) -> "EncoderOutput":
        """Repeat a single-example encoding k times (beam hypotheses); no grad."""
        rep = lambda t: Tensor(np.repeat(t.data, k, axis=0))  # noqa: E731
        return EncoderOutput(rep(self.word_states), np.repeat(self.mask, k, axis=0), rep(self.utterance_summary), rep(self.keys))


@dataclass
class DecoderState:
    s: Tensor  # [B, D]
    cell: Tensor  # [B, D]
    j: int = 0


@dataclass
class StepOutput:
    logp: Tensor  # [B, V] log of the output distribution
    state: DecoderState
    context: Tensor  # c_j, [B, Hw]
    prev_embedding: Tensor  # e(y_{j-1}), [B, E]

    @property
    def dist(self) -> np.ndarray:
        return np.exp(self.logp.data)


@dataclass
class Unroll:
    """Teacher-forced pass: initial state, its attention context, every step."""

    enc: EncoderOutput
    s0: Tensor
    c0: Tensor
    steps: list[StepOutput]


class HREDModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed)
        expected = [n for n, _, _ in _param_shapes(cfg)]
        if sorted(expected) != sorted(self.params):
            raise ValueError("parameter set does not match the model configuration")
        for name, shape, _ in _param_shapes(cfg):
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name}: expected {shape}, got {self.params[name].shape}")

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _const(self, arr) -> np.ndarray:
        return np.asarray(arr, dtype=self.dtype)

    # -- encoder ----------------------------------------------------------

    def _word_pass(self, prefix: str, xs: Tensor, mask: np.ndarray, reverse: bool) -> tuple[list[Tensor], Tensor]:
        """Run one direction of the word GRU; padded steps carry the state."""
        W, U_zr, U_h, b = _gru_params(self.params, prefix)
        U, L, _ = xs.shape
        H = U_zr.shape[0]
        xw = T.reshape(T.reshape(xs, (U * L, -1)) @ W + b, (U, L, 3 * H))
        h = Tensor(np.zeros((U, H), dtype=self.dtype))
        states: list[Tensor | None] = [None] * L
        order = range(L - 1, -1, -1) if reverse else range(L)
        for t in order:
            h_new = gru_cell(U_zr, U_h, xw[:, t, :], h)
            m = mask[:, t : t + 1]
            h = h_new if m.all() else h + (h_new - h) * m
            states[t] = h
        return states, h

    def encode(self, batch: Batch, dropout: Dropout | None = None) -> EncoderOutput:
        if batch.ctx_mask.sum(axis=1).min() < 1:
            raise ValueError("every example needs at least one context utterance")
        if not batch.mem_mask.any(axis=1).all():
            raise ValueError("every example needs at least one context token")
        p = self.params
        U, L = batch.utt_ids.shape
        emb = T.take_rows(p["embedding"], batch.utt_ids.reshape(-1))
        if dropout is not None:
            emb = dropout(emb)
        xs = T.reshape(emb, (U, L, -1))
        umask = self._const(batch.utt_mask)
        states, final = self._word_pass("word_enc", xs, umask, reverse=False)
        if self.cfg.bidirectional_word_encoder:
            bstates, bfinal = self._word_pass("word_enc_bw", xs, umask, reverse=True)
            states = [a + b for a, b in zip(states, bstates)]
            final = final + bfinal
        Hw = self.cfg.word_enc_dim
        grid = T.reshape(T.stack(states, axis=1), (U * L, Hw))
        B, Tm = batch.mem_index.shape
        mem = T.reshape(T.take_rows(grid, batch.mem_index.reshape(-1)), (B, Tm, Hw))

        W, U_zr, U_h, b = _gru_params(p, "utt_enc")
        Hu = self.cfg.utt_enc_dim
        h = Tensor(np.zeros((B, Hu), dtype=self.dtype))
        cmask = self._const(batch.ctx_mask)
        for k in range(batch.ctx_index.shape[1]):
            x = T.take_rows(final, batch.ctx_index[:, k])
            h_new = gru_cell(U_zr, U_h, x @ W + b, h)
            m = cmask[:, k : k + 1]
            h = h_new if m.all() else h + (h_new - h) * m

        if self.cfg.attention == "additive":
            A = self.cfg.attn_dim
            keys = T.reshape(T.reshape(mem, (B * Tm, Hw)) @ p["attn.W_h"], (B, Tm, A))
        else:
            keys = T.reshape(T.reshape(mem, (B * Tm, Hw)) @ p["attn.w_h"], (B, Tm))
        return EncoderOutput(mem, batch.mem_mask.copy(), h, keys)

    # -- attention / decoder ----------------------------------------------

    def attention_weights(self, s_prev: Tensor, enc: EncoderOutput) -> Tensor:
        p = self.params
        B, Tm = enc.mask.shape
        if s_prev.shape != (B, self.cfg.dec_dim):
            raise ShapeError(f"attention: query {s_prev.shape} vs batch {B} x {self.cfg.dec_dim}")
        if not enc.mask.any(axis=1).all():
            raise ValueError("attention: every position is masked")
        if self.cfg.attention == "additive":
            A = self.cfg.attn_dim
            q = T.reshape(s_prev @ p["attn.W_s"], (B, 1, A))
            pre = T.tanh(enc.keys + q)
            scores = T.reshape(T.reshape(pre, (B * Tm, A)) @ p["attn.v"], (B, Tm))
        else:
            q = T.reshape(s_prev @ p["attn.w_s"], (B, 1))
            scores = T.tanh(enc.keys + q)
        if not enc.mask.all():
            scores = T.masked_fill(scores, ~enc.mask, -np.inf)
        return T.softmax(scores, axis=1)

    def attention_context(self, s_prev: Tensor, enc: EncoderOutput) -> Tensor:
        """c = sum_i a_i h_i with a = softmax over unmasked positions."""
        a = self.attention_weights(s_prev, enc)
        B, Tm = enc.mask.shape
        return T.reshape(T.matmul(T.reshape(a, (B, 1, Tm)), enc.word_states), (B, self.cfg.word_enc_dim))

    def init_decoder_state(self, enc: EncoderOutput) -> DecoderState:
        """s_0 = tanh(W_init . utterance_summary + b_init); zero cell."""
        p = self.params
        s0 = T.tanh(enc.utterance_summary @ p["init.W"] + p["init.b"])
        return DecoderState(s0, Tensor(np.zeros(s0.shape, dtype=self.dtype)), 0)

    def decoder_step(
        self,
        y_prev,
        state: DecoderState,
        enc: EncoderOutput,
        dropout: Dropout | None = None,
        prev_embedding: Tensor | None = None,
    ) -> StepOutput:
        """One decoding step: attend with s_{j-1}, advance the LSTM, project.

        ``y_prev`` is an id per example. A precomputed (possibly dropped-out)
        embedding may be supplied instead of looking it up again.
        """
        p = self.params
        if prev_embedding is None:
            ids = np.atleast_1d(np.asarray(y_prev, dtype=np.int64))
            if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
                raise ValueError(f"token id out of range [0, {self.cfg.vocab_size})")
            prev_embedding = T.take_rows(p["embedding"], ids)
            if dropout is not None:
                prev_embedding = dropout(prev_embedding)
        c = self.attention_context(state.s, enc)
        s, cell = lstm_step(p, T.concat([prev_embedding, c], axis=1), state.s, state.cell)
        feats = T.concat([s, c], axis=1)
        if dropout is not None:
            feats = dropout(feats)
        logp = T.log_softmax(feats @ p["out.W"] + p["out.b"], axis=1)
        return StepOutput(logp, DecoderState(s, cell, state.j + 1), c, prev_embedding)

    def unroll(self, batch: Batch, dropout: Dropout | None = None) -> Unroll:
        """Teacher-forced pass over the padded targets of ``batch``."""
        if batch.tgt_in is None:
            raise ValueError("batch has no targets")
        enc = self.encode(batch, dropout)
        state = self.init_decoder_state(enc)
        s0 = state.s
        B, M = batch.tgt_in.shape
        emb = T.take_rows(self.params["embedding"], batch.tgt_in.reshape(-1))
        if dropout is not None:
            emb = dropout(emb)
        emb = T.reshape(emb, (B, M, self.cfg.embed_dim))
        steps = []
        for j in range(M):
            out = self.decoder_step(None, state, enc, dropout, prev_embedding=emb[:, j, :])
            steps.append(out)
            state = out.state
        # c_0 is attention queried by s_0, which is exactly the first step's context
        return Unroll(enc, s0, steps[0].context, steps)
