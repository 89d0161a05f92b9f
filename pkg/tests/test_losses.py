import math
from collections import Counter

import numpy as np
import pytest
from helpers import tiny_batch, tiny_model
from hypothesis import given, settings
from hypothesis import strategies as st

from hscjn import tensor as T
from hscjn.corpus import EOU, TrainingExample, make_batch
from hscjn.losses import (
    LOG_SCORE_FLOOR,
    LossBreakdown,
    build_target_sets,
    check_weights,
    compute_losses,
    entropy_from_logp,
    head_initial_logprob,
    head_logits,
    head_step_logprob,
    log_scores,
    loss_me,
    loss_me_from_logp,
    loss_total,
    loss_wp,
    suffix_counts,
)
from hscjn.tensor import Tensor, grad_check

LN2 = math.log(2.0)


def half_head(model):
    """Head whose every sigmoid output is exactly 0.5."""
    model.params["head.W3"].data[:] = 0.0
    model.params["head.b3"].data[:] = 0.0
    return model


def saturated_head(model):
    model.params["head.W3"].data[:] = 0.0
    model.params["head.b3"].data[:] = 800.0
    return model


targets = st.lists(st.integers(0, 5), min_size=1, max_size=12)


class TestTargetSets:
    def test_definition(self):
        s = build_target_sets([7, 8, 7, 9])
        assert s.steps[0] == (7, 8, 7, 9)
        assert s.steps[2] == (7, 9)
        assert s.full == (7, 8, 7, 9) and s.m == 4

    def test_singleton(self):
        assert build_target_sets([7]).steps == [(7,)]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            build_target_sets([])

    @settings(max_examples=200, deadline=None)
    @given(targets)
    def test_sizes_and_telescoping(self, y):
        s = build_target_sets(y)
        m = len(y)
        for j in range(1, m + 1):
            assert len(s.steps[j - 1]) == m - j + 1
            if j < m:
                expected = Counter(s.steps[j - 1])
                expected[y[j - 1]] -= 1
                assert +expected == Counter(s.steps[j])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(targets, min_size=1, max_size=4))
    def test_dense_counts_match_sets(self, ys):
        B, M = len(ys), max(len(y) for y in ys)
        out = np.zeros((B, M), dtype=np.int64)
        mask = np.zeros((B, M))
        for b, y in enumerate(ys):
            out[b, : len(y)] = y
            mask[b, : len(y)] = 1
        counts = suffix_counts(out, mask, 6)
        for b, y in enumerate(ys):
            s = build_target_sets(y)
            for j in range(len(y)):
                np.testing.assert_array_equal(counts[j, b], s.counts(j + 1, 6))
            assert not counts[len(y) :, b].any()


class TestHead:
    def test_saturated_is_zero(self):
        model = saturated_head(tiny_model())
        run = model.unroll(tiny_batch())
        counts = np.array([[0, 0, 0, 1, 1, 1, 0]], dtype=float)
        lp = head_step_logprob(model.params, run.steps[0].prev_embedding, run.steps[0].state.s, run.steps[0].context, counts)
        assert lp.item() == 0.0
        assert head_initial_logprob(model.params, run.s0, run.c0, counts).item() == 0.0

    def test_half_scores(self):
        model = half_head(tiny_model())
        run = model.unroll(tiny_batch())
        counts = np.array([[0, 0, 0, 1, 1, 1, 0]], dtype=float)
        step = run.steps[0]
        lp = head_step_logprob(model.params, step.prev_embedding, step.state.s, step.context, counts)
        # 3 ln 0.5
        assert abs(lp.item() - (-2.0794415416798357)) < 1e-12

    def test_duplicates_count_twice(self):
        model = half_head(tiny_model())
        run = model.unroll(tiny_batch())
        twice = head_initial_logprob(model.params, run.s0, run.c0, np.array([[0, 0, 0, 0, 2, 0, 0]], dtype=float))
        assert abs(twice.item() - 2 * math.log(0.5)) < 1e-12

    def test_initial_single_token(self):
        model = half_head(tiny_model())
        run = model.unroll(tiny_batch())
        lp = head_initial_logprob(model.params, run.s0, run.c0, np.array([[0, 0, 0, 1, 0, 0, 0]], dtype=float))
        assert abs(lp.item() - math.log(0.5)) < 1e-12

    def test_initial_uses_initial_variant(self):
        model = tiny_model()
        run = model.unroll(tiny_batch())
        counts = np.array([[0, 1, 0, 2, 0, 1, 0]], dtype=float)
        direct = head_initial_logprob(model.params, run.s0, run.c0, counts).item()
        logits = head_logits(model.params, T.concat([run.s0, run.c0], axis=1), initial=True)
        assert direct == T.tsum(log_scores(logits) * counts, axis=-1).item()

    def test_score_floor(self):
        out = log_scores(Tensor([-1e4, 0.0]))
        assert out.data[0] == LOG_SCORE_FLOOR
        assert np.all(np.isfinite(out.data))


class TestLossWP:
    def test_perfect_predictions(self):
        assert loss_wp(0.0, [0.0, 0.0, 0.0], 3) == 0.0

    def test_m2_all_half(self):
        h = math.log(0.5)
        assert abs(loss_wp(2 * h, [2 * h, h], 2) - 3 * LN2) < 1e-9

    def test_m1_half(self):
        h = math.log(0.5)
        assert abs(loss_wp(h, [h], 1) - 2 * LN2) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            loss_wp(0.0, [0.0], 2)

    def test_model_m2_all_half(self):
        model = half_head(tiny_model())
        bd = compute_losses(model, tiny_batch(m=2), 1.0, 0.13).breakdown
        assert abs(bd.l_wp - 3 * LN2) < 1e-9

    def test_model_saturated(self):
        model = saturated_head(tiny_model())
        bd = compute_losses(model, tiny_batch(m=4), 1.0, 0.13).breakdown
        assert bd.l_wp == 0.0

    def test_model_matches_scalar_formula(self):
        model = tiny_model(seed=2)
        b = tiny_batch(m=4)
        run = model.unroll(b)
        counts = suffix_counts(b.tgt_out, b.tgt_mask, 7)
        lp0 = head_initial_logprob(model.params, run.s0, run.c0, counts[0]).item()
        lps = [
            head_step_logprob(model.params, s.prev_embedding, s.state.s, s.context, counts[j]).item()
            for j, s in enumerate(run.steps)
        ]
        bd = compute_losses(model, b, 1.0, 0.0).breakdown
        assert abs(bd.l_wp - loss_wp(lp0, lps, 4)) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 1000))
    def test_non_negative(self, m, seed):
        rng = np.random.default_rng(seed)
        logits = Tensor(rng.normal(0, 3, size=(m + 1, 6)))
        ls = log_scores(logits).data
        y = rng.integers(0, 6, size=m)
        terms = [float(ls[0][list(y)].sum())] + [float(ls[j + 1][list(y[j:])].sum()) for j in range(m)]
        assert loss_wp(terms[0], terms[1:], m) >= 0.0

    def test_negatives_extension(self):
        model = tiny_model()
        b = tiny_batch()
        plain = compute_losses(model, b, 1.0, 0.0).breakdown.l_wp
        extended = compute_losses(model, b, 1.0, 0.0, wp_negatives=True).breakdown.l_wp
        assert extended > plain


class TestLossME:
    def test_uniform_four(self):
        assert abs(loss_me([np.full(4, 0.25)]).item() + math.log(4)) < 1e-9

    def test_one_hot(self):
        assert loss_me([np.array([0.0, 1.0, 0.0])]).item() == 0.0

    def test_binary(self):
        # 0.9 ln 0.9 + 0.1 ln 0.1
        assert abs(loss_me([np.array([0.9, 0.1])]).item() + 0.32508) < 1e-5

    def test_not_a_distribution(self):
        with pytest.raises(ValueError):
            loss_me([np.array([0.5, 0.6])])

    def test_from_logp_zero_probabilities(self):
        logp = Tensor([[0.0, -np.inf, -np.inf]])
        assert loss_me_from_logp([logp]).item() == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 9), st.integers(0, 10_000))
    def test_bounds(self, m, V, seed):
        rng = np.random.default_rng(seed)
        dists = [rng.dirichlet(np.full(V, 0.5)) for _ in range(m)]
        dists = [d / d.sum() for d in dists]
        val = loss_me(dists).item()
        assert -m * math.log(V) - 1e-9 <= val <= 0.0

    @pytest.mark.parametrize("m,V", [(1, 2), (3, 7), (5, 50)])
    def test_bounds_attained(self, m, V):
        one_hot = [np.eye(V)[j % V] for j in range(m)]
        assert loss_me(one_hot).item() == 0.0
        uniform = [np.full(V, 1.0 / V) for _ in range(m)]
        assert abs(loss_me(uniform).item() + m * math.log(V)) < 1e-9

    def test_gradient_wrt_logits(self):
        rng = np.random.default_rng(3)
        beta = 0.13
        f = lambda z: T.tsum(loss_me_from_logp([T.log_softmax(z, axis=1)])) * beta  # noqa: E731
        assert grad_check(f, Tensor(rng.normal(size=(3, 7)))) < 1e-5

    def test_entropy_matches_numpy(self):
        z = np.random.default_rng(4).normal(size=(2, 5))
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        h = entropy_from_logp(T.log_softmax(Tensor(z), axis=1)).data
        np.testing.assert_allclose(h, -(p * np.log(p)).sum(axis=1), atol=1e-12)


class TestTotal:
    def test_arithmetic(self):
        assert abs(loss_total(2.0, 1.0, -0.5, 1.0, 0.13) - 2.935) < 1e-12

    def test_zero_weights_bit_exact(self):
        nll = 1.2345678901234567
        assert loss_total(nll, 3.3, -2.2, 0.0, 0.0) == nll

    def test_independent_of_me_when_beta_zero(self):
        assert loss_total(2.0, 1.0, -0.5, 1.0, 0.0) == loss_total(2.0, 1.0, -7.5, 1.0, 0.0)

    def test_weight_range(self):
        with pytest.raises(ValueError):
            check_weights(1.5, 0.1)
        with pytest.raises(ValueError):
            loss_total(1.0, 1.0, 1.0, 0.5, -0.1)

    def test_breakdown_json(self):
        bd = LossBreakdown.from_components(2.0, 1.0, -0.5, 1.0, 0.13, mean_entropy=1.1)
        assert bd.to_json(step=4) == {"step": 4, "nll": 2.0, "l_wp": 1.0, "l_me": -0.5, "total": bd.total, "mean_entropy": 1.1}


class TestComputeLosses:
    def test_zero_weights_total_is_nll(self):
        model = tiny_model(seed=5)
        lt = compute_losses(model, tiny_batch(m=4), 0.0, 0.0)
        assert lt.breakdown.total == lt.breakdown.nll
        assert lt.total.item() == lt.breakdown.nll

    def test_nll_matches_manual_sum(self):
        model = tiny_model(seed=6)
        b = tiny_batch(m=3)
        run = model.unroll(b)
        manual = -sum(s.logp.data[0, b.tgt_out[0, j]] for j, s in enumerate(run.steps))
        assert abs(compute_losses(model, b, 0.0, 0.0).breakdown.nll - manual) < 1e-12

    def test_mean_reduction_divides_by_batch(self):
        model = tiny_model(seed=7)
        exs = [TrainingExample([[4, 5]], [[6, EOU]]), TrainingExample([[6]], [[4, 5, EOU]])]
        b = make_batch(exs)
        s = compute_losses(model, b, 1.0, 0.13, reduction="sum").breakdown
        m = compute_losses(model, b, 1.0, 0.13, reduction="mean").breakdown
        assert abs(s.nll / 2 - m.nll) < 1e-12 and abs(s.l_wp / 2 - m.l_wp) < 1e-12

    def test_bad_reduction(self):
        with pytest.raises(ValueError):
            compute_losses(tiny_model(), tiny_batch(), reduction="max")

    def test_entropy_logged(self):
        bd = compute_losses(tiny_model(), tiny_batch(m=3), 1.0, 0.13).breakdown
        assert bd.num_tokens == 3 and len(bd.step_entropies) == 3
        assert 0.0 < bd.mean_entropy <= math.log(7)
        assert abs(-bd.l_me - sum(bd.step_entropies)) < 1e-9
