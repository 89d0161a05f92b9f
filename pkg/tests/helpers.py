"""Shared builders for the test suite."""

import numpy as np

from hscjn import tensor as T
from hscjn.corpus import EOU, TrainingExample, make_batch
from hscjn.losses import compute_losses
from hscjn.model import HREDModel, ModelConfig

COMPONENTS = ("nll", "l_wp", "l_me", "total")


def tiny_model(vocab=7, dim=4, std=1.0, seed=0, dtype="float64", **kw):
    cfg = ModelConfig(
        vocab_size=vocab,
        embed_dim=dim,
        word_enc_dim=dim,
        utt_enc_dim=dim,
        dec_dim=dim,
        init_std=std,
        dtype=dtype,
        **kw,
    )
    return HREDModel(cfg, seed=seed)


def tiny_example(m=3):
    """Two context utterances; target of m tokens including the final EOU."""
    body = [4, 5, 6, 4, 5, 6, 4, 5, 6, 4, 5][: m - 1]
    return TrainingExample([[4, 5], [6, 4, 5]], [body + [EOU]])


def tiny_batch(m=3):
    return make_batch([tiny_example(m)])


def loss_values(model, batch, alpha, beta, **kw):
    with T.no_grad():
        lt = compute_losses(model, batch, alpha, beta, **kw)
    return {
        "nll": float(T.tsum(lt.nll).item()),
        "l_wp": float(T.tsum(lt.l_wp).item()),
        "l_me": float(T.tsum(lt.l_me).item()),
        "total": float(lt.total.item()),
    }


def analytic_grads(model, batch, alpha, beta, **kw):
    out = {}
    for comp in COMPONENTS:
        model.zero_grad()
        lt = compute_losses(model, batch, alpha, beta, **kw)
        root = lt.total if comp == "total" else T.tsum(getattr(lt, comp))
        T.backward(root)
        out[comp] = {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for n, p in model.params.items()}
    model.zero_grad()
    return out


def numeric_grads(model, batch, alpha, beta, eps=1e-5, **kw):
    """Central differences of every loss component, one sweep over all coordinates."""
    out = {c: {} for c in COMPONENTS}
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        g = {c: np.zeros(flat.size) for c in COMPONENTS}
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_values(model, batch, alpha, beta, **kw)
            flat[i] = orig - eps
            down = loss_values(model, batch, alpha, beta, **kw)
            flat[i] = orig
            for c in COMPONENTS:
                g[c][i] = (up[c] - down[c]) / (2 * eps)
        for c in COMPONENTS:
            out[c][name] = g[c].reshape(p.shape)
    return out


def max_rel_error(analytic, numeric):
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        err = np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-12)
        worst = max(worst, float(err.max()))
    return worst
