"""Training loop, Adam, evaluation and the binary checkpoint format."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, fields
from typing import IO, Sequence

import numpy as np

from . import tensor as T
from .corpus import EOU, TrainingExample, Vocabulary, batch_examples, make_batch, single_turn
from .decode import generate
from .losses import LossBreakdown, check_weights, compute_losses
from .metrics import EvalReport, evaluate_responses, flatten_turns
from .model import Dropout, HREDModel, ModelConfig, apply_dropout  # noqa: F401

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HSCJN1"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.13
    learning_rate: float = 2e-4
    batch_size: int = 8
    dropout: float = 0.25
    epochs: int = 10
    patience: int = 3  # 0 disables early stopping
    seed: int = 0
    vocab_cap: int = 2000
    max_dialogue_tokens: int = 300
    beam_width: int = 5
    max_len: int = 50
    length_norm: bool = False
    mode: str = "next_turn"
    wo_me: bool = False
    wo_pn: bool = False
    paper_scale: bool = False
    wp_negatives: bool = False
    clip_norm: float | None = None
    init_std: float = 0.01
    shuffle: bool = True
    embed_dim: int = 64
    word_enc_dim: int = 64
    utt_enc_dim: int = 128
    dec_dim: int = 64
    head_hidden_dim: int | None = None
    attention: str = "additive"
    bidirectional: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        check_weights(self.alpha, self.beta)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.beam_width < 1 or self.max_len < 1:
            raise ValueError("beam_width and max_len must be >= 1")

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.wo_pn else self.alpha

    @property
    def effective_beta(self) -> float:
        return 0.0 if self.wo_me else self.beta

    def model_config(self, vocab_size: int) -> ModelConfig:
        kw = dict(
            dropout_rate=self.dropout,
            init_std=self.init_std,
            attention=self.attention,
            bidirectional_word_encoder=self.bidirectional,
            head_hidden_dim=self.head_hidden_dim,
        )
        if self.paper_scale:
            return ModelConfig.full_scale(vocab_size, **kw)
        return ModelConfig(
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
            word_enc_dim=self.word_enc_dim,
            utt_enc_dim=self.utt_enc_dim,
            dec_dim=self.dec_dim,
            **kw,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# optimiser


def adam_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: dict[str, dict[str, np.ndarray]],
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam step, in place. ``moments`` holds "m" and "v" dicts."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    m_all, v_all = moments["m"], moments["v"]
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = m_all.setdefault(name, np.zeros_like(p))
        v = v_all.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.moments: dict[str, dict[str, np.ndarray]] = {"m": {}, "v": {}}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        adam_update(params, grads, self.moments, self.t, self.lr, self.beta1, self.beta2, self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# state and loop


@dataclass
class TrainState:
    model: HREDModel
    optimizer: Adam
    config: TrainConfig
    vocab: Vocabulary
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    best_valid: float = math.inf
    bad_epochs: int = 0
    stopped: bool = False


def new_state(cfg: TrainConfig, vocab: Vocabulary) -> TrainState:
    mcfg = cfg.model_config(len(vocab))
    model = HREDModel(mcfg, seed=cfg.seed)
    # dropout masks and shuffling draw from a stream separate from initialisation
    rng = np.random.default_rng([cfg.seed, 1])
    return TrainState(model, Adam(cfg.learning_rate), cfg, vocab, rng)


def train_batch(state: TrainState, batch) -> LossBreakdown:
    cfg = state.config
    model = state.model
    model.zero_grad()
    dropout = Dropout(cfg.dropout, state.rng, training=True)
    lt = compute_losses(model, batch, cfg.effective_alpha, cfg.effective_beta, dropout, cfg.wp_negatives)
    bd = lt.breakdown
    if not all(math.isfinite(x) for x in (bd.nll, bd.l_wp, bd.l_me, bd.total)):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step + 1}: nll={bd.nll} l_wp={bd.l_wp} l_me={bd.l_me} total={bd.total}"
        )
    T.backward(lt.total)
    grads = {n: p.grad for n, p in model.params.items() if p.grad is not None}
    if cfg.clip_norm:
        clip_grad_norm(grads, cfg.clip_norm)
    state.optimizer.step({n: p.data for n, p in model.params.items()}, grads)
    model.zero_grad()
    state.step += 1
    return bd


def epoch_batches(state: TrainState, examples: Sequence[TrainingExample]):
    order = np.arange(len(examples))
    if state.config.shuffle:
        state.rng.shuffle(order)
    return batch_examples([examples[i] for i in order], state.config.batch_size)


def train_epoch(state: TrainState, batches, log_fh: IO[str] | None = None) -> list[dict]:
    """One pass over ``batches``: forward, losses, backward, Adam step per batch."""
    entries = []
    for i, batch in enumerate(batches):
        t0 = time.perf_counter()
        try:
            bd = train_batch(state, batch)
        except NonFiniteLossError as err:
            raise NonFiniteLossError(f"{err} (epoch {state.epoch + 1}, batch {i})") from None
        entry = bd.to_json(step=state.step)
        entry.update(epoch=state.epoch + 1, batch=i, wall_time=time.perf_counter() - t0)
        entries.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry) + "\n")
    state.epoch += 1
    return entries


def validation_loss(state: TrainState, examples: Sequence[TrainingExample]) -> float:
    cfg = state.config
    total = 0.0
    n = 0
    with T.no_grad():
        for batch in batch_examples(examples, cfg.batch_size):
            bd = compute_losses(state.model, batch, cfg.effective_alpha, cfg.effective_beta, None, cfg.wp_negatives).breakdown
            total += bd.total * batch.size
            n += batch.size
    return total / max(n, 1)


def fit(
    state: TrainState,
    train_examples: Sequence[TrainingExample],
    valid_examples: Sequence[TrainingExample] | None = None,
    epochs: int | None = None,
    log_fh: IO[str] | None = None,
    checkpoint_path: str | os.PathLike | None = None,
) -> list[dict]:
    """Train until ``epochs`` total epochs or early stopping on validation loss.

    Inputs are encoded examples; two-turn examples are split into their
    single-turn problems first.
    """
    cfg = state.config
    epochs = cfg.epochs if epochs is None else epochs
    train_examples = single_turn(train_examples)
    valid_examples = single_turn(valid_examples) if valid_examples else None
    log = []
    while state.epoch < epochs and not state.stopped:
        epoch_log = train_epoch(state, epoch_batches(state, train_examples), log_fh)
        log += epoch_log
        msg = f"epoch {state.epoch}: train total {np.mean([e['total'] for e in epoch_log]):.4f}"
        if valid_examples:
            val = validation_loss(state, valid_examples)
            msg += f", valid total {val:.4f}"
            if val < state.best_valid:
                state.best_valid = val
                state.bad_epochs = 0
            else:
                state.bad_epochs += 1
                if cfg.patience and state.bad_epochs >= cfg.patience:
                    state.stopped = True
                    msg += " (early stop)"
        logger.info(msg)
        if checkpoint_path is not None:
            save_checkpoint(state, checkpoint_path)
    return log


def evaluate_split(
    model: HREDModel,
    examples: Sequence[TrainingExample],
    vocab: Vocabulary,
    beam_width: int = 5,
    max_len: int = 50,
    length_norm: bool = False,
    sentence_bleu: bool = False,
    label: str = "",
    responses_path: str | os.PathLike | None = None,
) -> tuple[EvalReport, list[list[list[str]]]]:
    """Decode every example and score against its targets.

    Returns the report and the generated turns (as tokens) per example;
    the turns are also written to ``responses_path`` when given.
    """
    from .corpus import write_lines

    outputs, refs = [], []
    for ex in examples:
        turns = generate(model, ex.context, len(ex.targets), beam_width, max_len, length_norm)
        outputs.append([vocab.decode(t) for t in turns])
        refs.append([vocab.decode([i for i in t if i != EOU]) for t in ex.targets])
    report = evaluate_responses(
        [flatten_turns(o) for o in outputs], [flatten_turns(r) for r in refs], sentence_bleu=sentence_bleu, label=label
    )
    if responses_path is not None:
        write_lines(responses_path, outputs)
    return report, outputs


# ---------------------------------------------------------------------------
# checkpoints
#
# magic "HSCJN1" | u32 header length | JSON header
# | u32 n | n parameter records | u32 n | n moment records
# record: u32 name length | name | u32 rank | rank x u32 dims | float32 data
# all integers little-endian.


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint truncated")
    return data


def _read_record(fh) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, n).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(dims)
    return name, arr


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": state.model.cfg.to_dict(),
        "train_config": state.config.to_dict(),
        "vocab": state.vocab.words(),
        "vocab_counts": [state.vocab.counts.get(w, 0) for w in state.vocab.words()],
        "step": state.step,
        "epoch": state.epoch,
        "adam_t": state.optimizer.t,
        "best_valid": None if math.isinf(state.best_valid) else state.best_valid,
        "bad_epochs": state.bad_epochs,
        "stopped": state.stopped,
        "rng_state": state.rng.bit_generator.state,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        params = state.model.params
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            _write_record(fh, name, params[name].data)
        moments = state.optimizer.moments
        names = [(k, n) for k in ("m", "v") for n in sorted(moments[k])]
        fh.write(struct.pack("<I", len(names)))
        for k, n in names:
            _write_record(fh, f"{k}/{n}", moments[k][n])
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    """Rebuild a :class:`TrainState`; raises :class:`CheckpointError` on any defect."""
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not an HSCJN checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError(f"{path}: corrupted header: {err}") from None
        if not isinstance(header, dict) or header.get("format_version") != CHECKPOINT_VERSION:
            found = header.get("format_version") if isinstance(header, dict) else None
            raise CheckpointError(f"{path}: format version {found!r}, expected {CHECKPOINT_VERSION}")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = dict(_read_record(fh) for _ in range(n))
        (k,) = struct.unpack("<I", _read_exact(fh, 4))
        moment_arrays = dict(_read_record(fh) for _ in range(k))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after moments")

    try:
        mcfg = ModelConfig.from_dict(header["model_config"])
        tcfg = TrainConfig.from_dict(header["train_config"])
        vocab = Vocabulary(header["vocab"], dict(zip(header["vocab"], header.get("vocab_counts", []))))
        dt = np.dtype(mcfg.dtype)
        params = {name: T.Tensor(arr.astype(dt), requires_grad=True, name=name) for name, arr in arrays.items()}
        model = HREDModel(mcfg, params)
        opt = Adam(tcfg.learning_rate)
        opt.t = int(header["adam_t"])
        for key, arr in moment_arrays.items():
            kind, name = key.split("/", 1)
            if kind not in ("m", "v") or name not in params:
                raise CheckpointError(f"{path}: unknown moment record {key!r}")
            opt.moments[kind][name] = arr.astype(dt)
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng_state"]
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointError(f"{path}: inconsistent checkpoint: {err}") from None
    best = header.get("best_valid")
    return TrainState(
        model,
        opt,
        tcfg,
        vocab,
        rng,
        step=int(header["step"]),
        epoch=int(header["epoch"]),
        best_valid=math.inf if best is None else float(best),
        bad_epochs=int(header.get("bad_epochs", 0)),
        stopped=bool(header.get("stopped", False)),
    )
