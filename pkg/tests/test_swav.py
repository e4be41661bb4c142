"""Sinkhorn codes, swapped-prediction loss, queue, collapse monitors."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandfuse import autodiff as ad
from bandfuse.autodiff import Tensor
from bandfuse.config import SwavConfig
from bandfuse.errors import ParameterError, UsageError
from bandfuse.params import ParamStore
from bandfuse.swav import (
    SwavState,
    prototype_scores,
    sinkhorn_codes,
    swav_loss,
    usage_entropy,
)


def sinkhorn_oracle(scores, eps, iters):
    """Plain alternating-normalization reference, no shortcuts."""
    q = np.exp(scores.astype(np.float64) / eps)
    m, k = q.shape
    for _ in range(iters):
        for r in range(m):
            q[r] /= q[r].sum() * m
        for c in range(k):
            q[:, c] /= q[:, c].sum() * k
    for r in range(m):
        q[r] /= q[r].sum()
    return q


class TestPrototypeScores:
    def test_matching_row_scores_one(self, rng):
        c = rng.standard_normal((4, 8))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        scores = prototype_scores(c[2:3], c)
        assert scores[0, 2] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_scores_zero(self):
        z = np.array([[1.0, 0.0]])
        c = np.array([[0.0, 1.0]])
        assert prototype_scores(z, c)[0, 0] == 0.0

    def test_random_matches_dot_oracle(self, rng):
        z = rng.standard_normal((5, 7))
        c = rng.standard_normal((3, 7))
        got = prototype_scores(z, c)
        for i in range(5):
            for j in range(3):
                assert got[i, j] == pytest.approx(float(z[i] @ c[j]), rel=1e-6)


class TestSinkhorn:
    def test_uniform_input_exact_fixed_point(self):
        scores = np.full((64, 16), 0.37)
        q = sinkhorn_codes(scores, 0.05, 3)
        assert (q == 1.0 / 16).all()

    def test_two_by_two_matches_iteration_oracle(self):
        scores = np.array([[math.log(2.0), 0.0], [0.0, math.log(2.0)]])
        q = sinkhorn_codes(scores, 1.0, 50)
        want = sinkhorn_oracle(scores, 1.0, 50)
        np.testing.assert_allclose(q, want, atol=1e-12)
        np.testing.assert_allclose(q, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-9)

    def test_row_sums_always_one(self, rng):
        for iters in (0, 1, 3, 50):
            scores = rng.standard_normal((9, 5))
            q = sinkhorn_codes(scores, 0.05, iters)
            np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-6)
            assert (q >= 0).all()

    def test_column_sums_converge_to_m_over_k(self, rng):
        # operational scale: scores are cosines of unit-norm rows; the
        # convergence rate depends on exp(spread/eps), so 50 iterations
        # reach 1e-6 here while wilder scales would need more
        z = rng.standard_normal((64, 8))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        c = rng.standard_normal((16, 8))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        q = sinkhorn_codes(z @ c.T, 0.1, 50)
        np.testing.assert_allclose(q.sum(axis=0), 64 / 16, atol=1e-6)

    def test_matches_oracle_random(self, rng):
        scores = rng.standard_normal((12, 6))
        np.testing.assert_allclose(
            sinkhorn_codes(scores, 0.07, 7), sinkhorn_oracle(scores, 0.07, 7), atol=1e-10
        )

    def test_row_scaling_invariance(self, rng):
        # max-subtraction is a row rescaling; any such rescaling is absorbed
        scores = rng.standard_normal((6, 4))
        shifted = scores + rng.standard_normal((6, 1))
        np.testing.assert_allclose(
            sinkhorn_codes(scores, 0.5, 5), sinkhorn_codes(shifted, 0.5, 5), atol=1e-12
        )

    def test_epsilon_validation(self):
        with pytest.raises(ParameterError):
            sinkhorn_codes(np.ones((2, 2)), 0.0, 3)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 12), st.integers(2, 8), st.integers(0, 6))
    def test_rows_are_distributions_property(self, m, k, iters):
        rng = np.random.default_rng(m * 100 + k * 10 + iters)
        q = sinkhorn_codes(rng.standard_normal((m, k)), 0.1, iters)
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-9)
        assert (q >= 0).all()


def loss_oracle(embeddings, codes, prototypes, tau, batch, n_g, n_v):
    """Hand pair-sum: every (global code, other view prediction) pair."""
    total = 0.0
    for i in range(n_g):
        for j in range(n_v):
            if i == j:
                continue
            for b in range(batch):
                z = embeddings[j * batch + b]
                logits = z @ prototypes.T / tau
                logits -= logits.max()
                logp = logits - np.log(np.exp(logits).sum())
                total += -(codes[i][b] * logp).sum()
    return total / (batch * n_g * (n_v - 1))


class TestSwavLoss:
    def _setup(self, rng, batch, n_g, n_v, k=4, d_e=6):
        emb = rng.standard_normal((n_v * batch, d_e))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        protos = rng.standard_normal((k, d_e))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        codes = []
        for i in range(n_g):
            block = emb[i * batch:(i + 1) * batch]
            codes.append(sinkhorn_codes(block @ protos.T, 0.05, 3))
        return emb.astype(np.float64), protos.astype(np.float64), codes

    def test_single_pair_counting(self, rng):
        # one global, one local view: exactly one CE term per sample
        emb, protos, codes = self._setup(rng, batch=1, n_g=1, n_v=2)
        loss = swav_loss(Tensor(emb), codes, Tensor(protos), 0.1, 1, 1, 2)
        z = emb[1]
        logits = z @ protos.T / 0.1
        logits -= logits.max()
        logp = logits - np.log(np.exp(logits).sum())
        assert loss.item() == pytest.approx(-(codes[0][0] * logp).sum(), rel=1e-6)

    def test_perfect_prediction_gives_entropy(self, rng):
        # p_j == q_i -> CE equals the entropy of q; one-hot q -> 0
        k = 4
        protos = np.eye(k)
        emb = np.tile(protos[1], (2, 1))
        codes = [np.array([[0.0, 1.0, 0.0, 0.0]])]
        tau = 0.001  # sharp softmax -> predictions one-hot at index 1
        loss = swav_loss(Tensor(emb.astype(np.float64)), codes,
                         Tensor(protos.astype(np.float64)), tau, 1, 1, 2)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_matches_pair_sum_oracle(self, rng):
        # acceptance configuration: n_g=2, n_l=3, K=4, batch 2
        batch, n_g, n_v = 2, 2, 5
        emb, protos, codes = self._setup(rng, batch, n_g, n_v)
        loss = swav_loss(Tensor(emb), codes, Tensor(protos), 0.1, batch, n_g, n_v)
        want = loss_oracle(emb, codes, protos, 0.1, batch, n_g, n_v)
        assert loss.item() == pytest.approx(want, abs=1e-6)

    def test_code_path_carries_zero_gradient(self, rng):
        # with one global view, its embedding feeds codes only -> zero grad
        batch, n_g, n_v = 2, 1, 3
        emb, protos, codes = self._setup(rng, batch, n_g, n_v)
        emb_t = Tensor(emb, requires_grad=True)
        protos_t = Tensor(protos, requires_grad=True)
        loss = swav_loss(emb_t, codes, protos_t, 0.1, batch, n_g, n_v)
        ad.backward(loss)
        np.testing.assert_array_equal(emb_t.grad[:batch], 0.0)
        assert np.abs(emb_t.grad[batch:]).max() > 0

    def test_temperature_validation(self, rng):
        emb, protos, codes = self._setup(rng, 1, 1, 2)
        with pytest.raises(ParameterError):
            swav_loss(Tensor(emb), codes, Tensor(protos), 0.0, 1, 1, 2)

    def test_row_count_validation(self, rng):
        emb, protos, codes = self._setup(rng, 2, 1, 3)
        with pytest.raises(UsageError):
            swav_loss(Tensor(emb[:4]), codes, Tensor(protos), 0.1, 2, 1, 3)


class TestStateAndMonitors:
    def _state(self, rng, k=8, d_e=6, capacity=4, n_g=2):
        store = ParamStore()
        c = rng.standard_normal((k, d_e))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        protos = store.add("swav.prototypes", c)
        cfg = SwavConfig(prototypes=k, global_views=n_g, local_views=n_g + 2)
        return SwavState(protos, cfg, queue_capacity=capacity)

    def test_renormalize_unit_rows(self, rng):
        state = self._state(rng)
        state.prototypes.data = state.prototypes.data * 3.7
        state.renormalize_prototypes()
        np.testing.assert_allclose(
            np.linalg.norm(state.prototypes.data, axis=1), 1.0, atol=1e-6
        )

    def test_queue_fifo_and_capacity(self, rng):
        state = self._state(rng, capacity=4)
        a = rng.standard_normal((3, 6))
        b = rng.standard_normal((3, 6))
        state.push_queue(0, a)
        state.push_queue(0, b)
        assert state.queues[0].shape[0] == 4
        np.testing.assert_array_equal(state.queues[0][0], a[2])  # oldest surviving
        np.testing.assert_array_equal(state.queues[0][1:], b)
        assert state.queues[1].shape[0] == 0  # slots are independent

    def test_codes_use_queue_but_return_batch_rows(self, rng):
        state = self._state(rng, k=4, capacity=8)
        emb = rng.standard_normal((3, 6))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        solo = state.codes_for_slot(0, emb)
        assert solo.shape == (3, 4)
        queued = rng.standard_normal((5, 6))
        queued /= np.linalg.norm(queued, axis=1, keepdims=True)
        state.push_queue(0, queued)
        with_queue = state.codes_for_slot(0, emb)
        assert with_queue.shape == (3, 4)
        # queue rows join the marginals, so the codes must change
        assert np.abs(with_queue - solo).max() > 1e-8
        # oracle: stack batch + queue, run sinkhorn, keep first rows
        protos = state.prototypes.data.astype(np.float64)
        stacked = np.concatenate([emb, queued]) @ protos.T
        want = sinkhorn_codes(stacked, state.cfg.sinkhorn_epsilon,
                              state.cfg.sinkhorn_iterations)[:3]
        np.testing.assert_allclose(with_queue, want, atol=1e-12)

    def test_collapse_monitor_one_hot(self, rng):
        state = self._state(rng, k=4)
        codes = np.zeros((10, 4))
        codes[:, 2] = 1.0
        state.record_codes(codes)
        m = state.collapse_monitor()
        assert m["usage_entropy"] == pytest.approx(0.0, abs=1e-12)
        assert m["max_fraction"] == pytest.approx(1.0)

    def test_collapse_monitor_uniform_512(self):
        assert usage_entropy(np.full(512, 1 / 512)) == pytest.approx(math.log(512), rel=1e-9)

    def test_collapse_monitor_mixed_matches_direct_entropy(self, rng):
        state = self._state(rng, k=6)
        c1 = rng.dirichlet(np.ones(6), size=7)
        c2 = rng.dirichlet(np.ones(6), size=5)
        state.record_codes(c1)
        state.record_codes(c2)
        mean = np.concatenate([c1, c2]).mean(axis=0)
        want = -(mean * np.log(mean)).sum()
        assert state.collapse_monitor()["usage_entropy"] == pytest.approx(want, rel=1e-9)

    def test_monitor_requires_data(self, rng):
        state = self._state(rng)
        with pytest.raises(UsageError):
            state.collapse_monitor()
