"""Training objective: token NLL, future-word-set prediction loss, entropy regulariser.

At every decoder step j an MLP over [e(y_{j-1}); s_j; c_j] scores each
vocabulary word with an independent sigmoid; the step's log-likelihood is the
sum of log-scores of the tokens still to be generated, y_j..y_m (a multiset:
repeated tokens count repeatedly). The initial state gets the same treatment
from [s_0; c_0] against the whole target. These are combined as

    L_WP = -(1/m) log P_0 - sum_j log P_j / (m - j + 1)

The entropy term is L_ME = -sum_t H(p_t) over the full vocabulary, and the
joint loss is NLL + alpha * L_WP + beta * L_ME.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import Batch
from .model import Dropout, HREDModel
from .tensor import Tensor

SCORE_FLOOR = 1e-12
LOG_SCORE_FLOOR = math.log(SCORE_FLOOR)


@dataclass
class TargetWordSets:
    """Remaining-token multisets: ``steps[j-1]`` is (y_j, ..., y_m)."""

    steps: list[tuple[int, ...]]

    @property
    def full(self) -> tuple[int, ...]:
        return self.steps[0]

    @property
    def m(self) -> int:
        return len(self.steps)

    def counts(self, j: int, vocab_size: int) -> np.ndarray:
        return np.bincount(np.asarray(self.steps[j - 1], dtype=np.int64), minlength=vocab_size).astype(float)


def build_target_sets(target: Sequence[int]) -> TargetWordSets:
    if len(target) < 1:
        raise ValueError("target must hold at least one token")
    tgt = tuple(int(t) for t in target)
    return TargetWordSets([tgt[j:] for j in range(len(tgt))])


def suffix_counts(tgt_out: np.ndarray, tgt_mask: np.ndarray, vocab_size: int) -> np.ndarray:
    """Dense multiset counts of y_j..y_m for every step: [M, B, V]."""
    B, M = tgt_out.shape
    onehot = np.zeros((M, B, vocab_size))
    rows = np.arange(B)
    for j in range(M):
        onehot[j, rows, tgt_out[:, j]] = tgt_mask[:, j]
    return np.cumsum(onehot[::-1], axis=0)[::-1].copy()


# ---------------------------------------------------------------------------
# prediction head


def head_logits(params: dict[str, Tensor], inp: Tensor, initial: bool = False) -> Tensor:
    """Two tanh hidden layers then a vocabulary-wide linear layer (pre-sigmoid).

    The initial-state variant has its own first layer since its input lacks
    the previous-token embedding; the upper layers are shared.
    """
    if initial:
        h = T.tanh(inp @ params["head.W1_init"] + params["head.b1_init"])
    else:
        h = T.tanh(inp @ params["head.W1"] + params["head.b1"])
    h = T.tanh(h @ params["head.W2"] + params["head.b2"])
    return h @ params["head.W3"] + params["head.b3"]


def log_scores(logits: Tensor) -> Tensor:
    """log sigmoid(z), floored at log(1e-12)."""
    return T.clip_min(T.log_sigmoid(logits), LOG_SCORE_FLOOR)


def _set_logprob(logits: Tensor, counts: np.ndarray) -> Tensor:
    return T.tsum(log_scores(logits) * counts.astype(logits.dtype), axis=-1)


def head_step_logprob(params, e_prev: Tensor, s_j: Tensor, c_j: Tensor, counts: np.ndarray) -> Tensor:
    """log P_j = sum over remaining positions of log q[y_t]; ``counts`` is the multiset as [.., V]."""
    return _set_logprob(head_logits(params, T.concat([e_prev, s_j, c_j], axis=-1)), counts)


def head_initial_logprob(params, s_0: Tensor, c_0: Tensor, counts: np.ndarray) -> Tensor:
    return _set_logprob(head_logits(params, T.concat([s_0, c_0], axis=-1), initial=True), counts)


def negative_term(logits: Tensor, counts: np.ndarray) -> Tensor:
    """-(1/|V|) sum over words outside the set of log(1 - q[w]) (optional extension)."""
    absent = (counts == 0).astype(logits.dtype)
    V = logits.shape[-1]
    return T.mul(T.tsum(T.clip_min(T.log_sigmoid(-logits), LOG_SCORE_FLOOR) * absent, axis=-1), -1.0 / V)


def loss_wp(log_p0, log_ps: Sequence, m: int):
    """-(1/m) log P_0 - sum_{j=1..m} log P_j / (m - j + 1). Works on floats or tensors."""
    if m < 1 or len(log_ps) != m:
        raise ValueError("need exactly m step log-probabilities, m >= 1")
    total = log_p0 * (-1.0 / m)
    for j, lp in enumerate(log_ps, start=1):
        total = total + lp * (-1.0 / (m - j + 1))
    return total


# ---------------------------------------------------------------------------
# entropy


def _plogp(logp: Tensor) -> Tensor:
    # exp(logp) * logp, zeroed where p underflows so 0 log 0 comes out as 0
    floor = float(np.log(np.finfo(logp.dtype).tiny))
    lp = T.clip_min(logp, floor)
    live = (logp.data > floor).astype(logp.dtype)
    return T.exp(lp) * lp * live


def entropy_from_logp(logp: Tensor) -> Tensor:
    """H = -sum p log p along the last axis, with p = exp(log p) so 0 log 0 = 0."""
    return -T.tsum(_plogp(logp), axis=-1)


def loss_me(step_distributions: Sequence) -> Tensor:
    """-sum_t H(p_t) for explicit probability vectors (zeros allowed)."""
    if not step_distributions:
        raise ValueError("need at least one distribution")
    total = None
    for p in step_distributions:
        p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=float))
        if abs(float(p.data.sum()) - 1.0) > 1e-6:
            raise ValueError("distribution does not sum to 1")
        plogp = p * T.log(T.clip_min(p, np.finfo(p.dtype).tiny))
        term = T.tsum(plogp)
        total = term if total is None else total + term
    return total


def loss_me_from_logp(logps: Sequence[Tensor], mask: np.ndarray | None = None) -> Tensor:
    """Per-example -sum_t H_t from per-step log-distributions [B, V]; masked steps skipped."""
    total = None
    for j, lp in enumerate(logps):
        neg_h = T.tsum(_plogp(lp), axis=-1)
        if mask is not None:
            neg_h = neg_h * mask[:, j].astype(lp.dtype)
        total = neg_h if total is None else total + neg_h
    return total


# ---------------------------------------------------------------------------
# joint objective


def check_weights(alpha: float, beta: float) -> None:
    for name, w in (("alpha", alpha), ("beta", beta)):
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {w}")


def loss_total(nll, l_wp, l_me, alpha: float, beta: float):
    """nll + alpha * l_wp + beta * l_me (floats or tensors, same evaluation order)."""
    check_weights(alpha, beta)
    return nll + l_wp * alpha + l_me * beta


@dataclass
class LossBreakdown:
    nll: float
    l_wp: float
    l_me: float
    total: float
    alpha: float
    beta: float
    mean_entropy: float
    step_entropies: list[float] = field(default_factory=list)
    num_tokens: int = 0

    @classmethod
    def from_components(cls, nll, l_wp, l_me, alpha, beta, **extra) -> "LossBreakdown":
        nll, l_wp, l_me = float(nll), float(l_wp), float(l_me)
        return cls(nll, l_wp, l_me, loss_total(nll, l_wp, l_me, alpha, beta), alpha, beta, **extra)

    def to_json(self, step: int | None = None) -> dict:
        d = {"step": step} if step is not None else {}
        d.update(
            nll=self.nll, l_wp=self.l_wp, l_me=self.l_me, total=self.total, mean_entropy=self.mean_entropy
        )
        return d

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossTensors:
    """Per-example loss vectors [B] plus the reduced scalar used for backward."""

    nll: Tensor
    l_wp: Tensor
    l_me: Tensor
    total: Tensor
    breakdown: LossBreakdown


def compute_losses(
    model: HREDModel,
    batch: Batch,
    alpha: float = 1.0,
    beta: float = 0.13,
    dropout: Dropout | None = None,
    wp_negatives: bool = False,
    reduction: str = "mean",
) -> LossTensors:
    """Teacher-forced forward pass and every loss component for one batch.

    Per example: NLL is -log P(Y|context) summed over target tokens, L_WP and
    L_ME as in the module docstring. ``reduction`` averages (or sums) the
    per-example values over the batch.
    """
    check_weights(alpha, beta)
    if reduction not in ("mean", "sum"):
        raise ValueError("reduction must be 'mean' or 'sum'")
    params = model.params
    run = model.unroll(batch, dropout)
    B, M = batch.tgt_out.shape
    V = model.cfg.vocab_size
    dt = model.dtype
    mask = batch.tgt_mask.astype(dt)
    lens = batch.tgt_lens.astype(dt)
    counts = suffix_counts(batch.tgt_out, batch.tgt_mask, V).astype(dt)

    nll = None
    entropies = []
    for j, step in enumerate(run.steps):
        onehot = np.zeros((B, V), dtype=dt)
        onehot[np.arange(B), batch.tgt_out[:, j]] = mask[:, j]
        tok = -T.tsum(step.logp * onehot, axis=1)
        nll = tok if nll is None else nll + tok
        entropies.append(entropy_from_logp(step.logp).data)
    l_me = loss_me_from_logp([s.logp for s in run.steps], mask)

    # L_WP: initial prediction weighted 1/m, step j weighted 1/(m-j+1)
    init_logits = head_logits(params, T.concat([run.s0, run.c0], axis=1), initial=True)
    l_wp = _set_logprob(init_logits, counts[0]) * (-1.0 / lens)
    if wp_negatives:
        l_wp = l_wp + negative_term(init_logits, counts[0])
    for j, step in enumerate(run.steps):
        inp = T.concat([step.prev_embedding, step.state.s, step.context], axis=1)
        logits = head_logits(params, inp)
        remaining = np.maximum(lens - j, 1.0)
        w = -mask[:, j] / remaining
        l_wp = l_wp + _set_logprob(logits, counts[j]) * w
        if wp_negatives:
            l_wp = l_wp + negative_term(logits, counts[j]) * mask[:, j]

    scale = 1.0 / B if reduction == "mean" else 1.0
    nll_r = T.tsum(nll) * scale
    lwp_r = T.tsum(l_wp) * scale
    lme_r = T.tsum(l_me) * scale
    total = loss_total(nll_r, lwp_r, lme_r, alpha, beta)

    ent = np.stack(entropies, axis=1)  # [B, M]
    n_tok = float(batch.tgt_mask.sum())
    step_ent = [
        float((ent[:, j] * batch.tgt_mask[:, j]).sum() / max(batch.tgt_mask[:, j].sum(), 1.0)) for j in range(M)
    ]
    bd = LossBreakdown.from_components(
        nll_r.item(),
        lwp_r.item(),
        lme_r.item(),
        alpha,
        beta,
        mean_entropy=float((ent * batch.tgt_mask).sum() / n_tok),
        step_entropies=step_ent,
        num_tokens=int(n_tok),
    )
    return LossTensors(nll, l_wp, l_me, total, bd)
