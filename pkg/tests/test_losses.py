import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gradcheck
from crossfuse import tensor as T
from crossfuse.losses import (LossError, LossWeights, imima_loss, imima_terms, mask_tokens, masked_cross_entropy,
                              matching_probabilities, mlm_loss, sdm_loss, vtmf_loss)
from crossfuse.tensor import Tensor

PER_TERM = -math.log(math.e / (math.e + 1))


# --- independent loop oracles -------------------------------------------------

def _unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def imima_oracle(fv, ft, ids, classes=None):
    fv, ft = _unit(fv), _unit(ft)
    n = len(ids)
    classes = ids if classes is None else classes

    def next_same(i):
        for step in range(1, n):
            if classes[(i + step) % n] == classes[i]:
                return (i + step) % n
        return None

    def term(fa, fb, positive):
        vals = []
        for i in range(n):
            p = positive(i)
            negs = [k for k in range(n) if ids[k] != ids[i]]
            if p is None or not negs:
                continue
            d_pos = math.exp(fa[i] @ fb[p])
            d_neg = sum(math.exp(fa[i] @ fb[k]) for k in negs)
            vals.append(-math.log(d_pos / (d_pos + d_neg)))
        return sum(vals) / len(vals) if vals else 0.0

    return {"t2t": term(ft, ft, next_same), "v2v": term(fv, fv, next_same),
            "t2v": term(ft, fv, lambda i: i), "v2t": term(fv, ft, lambda i: i)}


def sdm_oracle(fv, ft, ids, tau, eps):
    n = len(ids)

    def direction(a, b):
        a, b = _unit(a), _unit(b)
        total = 0.0
        for i in range(n):
            s = [a[i] @ b[j] / tau for j in range(n)]
            m = max(s)
            z = sum(math.exp(x - m) for x in s)
            same = sum(1 for j in range(n) if ids[j] == ids[i])
            for j in range(n):
                p = math.exp(s[j] - m) / z
                q = (1.0 if ids[j] == ids[i] else 0.0) / same
                total += p * math.log(p / (q + eps)) if p > 0 else 0.0
        return total / n

    return direction(fv, ft) + direction(ft, fv)


def _batch(rng, n=6, D=5, classes=2):
    ids = rng.integers(0, classes, size=n)
    ids[:classes] = np.arange(classes)
    return rng.normal(size=(n, D)), rng.normal(size=(n, D)), ids


# --- IMIMA --------------------------------------------------------------------

class TestIMIMA:
    def test_closed_form_single_negative(self):
        eye = Tensor(np.eye(2))
        terms = imima_terms(eye, eye, [0, 1], strategy="self", normalize=False)
        for name in ("t2t", "v2v", "t2v", "v2t"):
            assert float(terms[name].data) == pytest.approx(PER_TERM, abs=1e-12)
        assert PER_TERM == pytest.approx(0.3133, abs=5e-5)
        total = imima_loss(eye, eye, [0, 1], strategy="self", normalize=False)
        assert float(total.data) == pytest.approx(4 * PER_TERM, abs=1e-12)

    def test_single_identity_rejected(self, rng):
        f = Tensor(rng.normal(size=(4, 3)))
        with pytest.raises(LossError):
            imima_loss(f, f, [1, 1, 1, 1])

    def test_matches_loop_oracle(self, rng):
        for _ in range(5):
            fv, ft, ids = _batch(rng, n=7, classes=3)
            terms = imima_terms(Tensor(fv), Tensor(ft), ids)
            ref = imima_oracle(fv, ft, ids)
            for k in ref:
                assert float(terms[k].data) == pytest.approx(ref[k], abs=1e-12)
            total = imima_loss(Tensor(fv), Tensor(ft), ids)
            assert float(total.data) == pytest.approx(sum(ref.values()), abs=1e-12)

    def test_case_identity_counts_positive_among_negatives(self, rng):
        fv, ft, classes = _batch(rng, n=6, classes=2)
        ids = np.arange(6)
        terms = imima_terms(Tensor(fv), Tensor(ft), ids, classes=classes)
        ref = imima_oracle(fv, ft, ids, classes)
        for k in ref:
            assert float(terms[k].data) == pytest.approx(ref[k], abs=1e-12)
        # the intra positive is another case, so it also sits in the negative set: loss > ln 2
        assert float(terms["t2t"].data) > math.log(2)

    def test_sum_of_terms_exact(self, rng):
        fv, ft, ids = _batch(rng)
        terms = imima_terms(Tensor(fv), Tensor(ft), ids)
        total = float(imima_loss(Tensor(fv), Tensor(ft), ids).data)
        assert total == float((terms["t2t"] + terms["v2v"] + terms["t2v"] + terms["v2t"]).data)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 10))
    def test_nonnegative(self, seed, n):
        fv, ft, ids = _batch(np.random.default_rng(seed), n=n)
        assert float(imima_loss(Tensor(fv), Tensor(ft), ids).data) >= 0.0

    def test_gradient(self, rng):
        fv, ft, ids = _batch(rng)
        assert gradcheck(lambda a, b: imima_loss(a, b, ids), fv, ft) < 1e-4
        cases = np.arange(len(ids))
        assert gradcheck(lambda a, b: imima_loss(a, b, cases, classes=ids), fv, ft) < 1e-4


# --- SDM ----------------------------------------------------------------------

class TestSDM:
    def test_two_pair_oracle(self):
        eye = Tensor(np.eye(2))
        p = matching_probabilities(eye, eye, 1.0).data
        assert np.allclose(p, [[0.7311, 0.2689], [0.2689, 0.7311]], atol=5e-5)
        a, b = 1 / (1 + math.exp(-1)), 1 / (1 + math.exp(1))
        row = a * math.log(a / (1 + 1e-8)) + b * math.log(b / 1e-8)
        loss = sdm_loss(eye, eye, [0, 1], LossWeights(tau=1.0, eps=1e-8))
        # two rows per direction, averaged, two directions
        assert float(loss.data) == pytest.approx(2 * row, rel=1e-12)

    def test_zero_when_p_equals_q(self):
        eye = Tensor(np.eye(3))
        loss = sdm_loss(eye, eye, [0, 1, 2], LossWeights(tau=1e-3, eps=1e-8))
        assert abs(float(loss.data)) <= 1e-6

    def test_case_identity_targets_the_diagonal(self, rng):
        fv, ft, _ = _batch(rng, n=5)
        w = LossWeights(tau=0.2)
        got = float(sdm_loss(Tensor(fv), Tensor(ft), np.arange(5), w).data)
        assert got == pytest.approx(sdm_oracle(fv, ft, list(range(5)), 0.2, w.eps), rel=1e-10)

    def test_matches_loop_oracle(self, rng):
        for tau in (0.02, 0.5, 2.0):
            fv, ft, ids = _batch(rng, n=6, classes=3)
            w = LossWeights(tau=tau)
            got = float(sdm_loss(Tensor(fv), Tensor(ft), ids, w).data)
            assert got == pytest.approx(sdm_oracle(fv, ft, ids, tau, w.eps), rel=1e-10, abs=1e-10)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 5.0))
    def test_lower_bound(self, seed, tau):
        fv, ft, ids = _batch(np.random.default_rng(seed))
        assert float(sdm_loss(Tensor(fv), Tensor(ft), ids, LossWeights(tau=tau)).data) >= -1e-6

    def test_rows_sum_to_one_and_scale_invariant(self, rng):
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        p = matching_probabilities(Tensor(a), Tensor(b), 0.1).data
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
        scale = rng.uniform(0.1, 10, size=(5, 1))
        p2 = matching_probabilities(Tensor(a * scale), Tensor(3.0 * b), 0.1).data
        assert np.allclose(p, p2, atol=1e-12)

    def test_lower_tau_sharpens(self, rng):
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        peaks = [matching_probabilities(Tensor(a), Tensor(b), tau).data.max(axis=1) for tau in (1.0, 0.5, 0.1)]
        assert np.all(peaks[1] > peaks[0]) and np.all(peaks[2] > peaks[1])

    def test_errors(self, rng):
        f = rng.normal(size=(3, 2))
        z = f.copy()
        z[1] = 0.0
        with pytest.raises(LossError):
            sdm_loss(Tensor(z), Tensor(f), [0, 1, 0])
        with pytest.raises(LossError):
            sdm_loss(Tensor(f[:1]), Tensor(f[:1]), [0])

    def test_gradient(self, rng):
        fv, ft, ids = _batch(rng)
        w = LossWeights(tau=0.3)
        assert gradcheck(lambda a, b: sdm_loss(a, b, ids, w), fv, ft) < 1e-4


# --- MLM ----------------------------------------------------------------------

class TestMLM:
    def test_uniform_logits_give_log_vocab(self, rng):
        ids = rng.integers(2, 10, size=(3, 6))
        pad = np.zeros((3, 6), dtype=bool)
        pad[2, 4:] = True

        def uniform(masked, p):
            return Tensor(np.zeros(masked.shape + (10,)))
        loss = mlm_loss(ids, pad, 0.15, uniform, rng, mask_id=1)
        assert float(loss.data) == pytest.approx(math.log(10), abs=1e-12)
        assert math.log(10) == pytest.approx(2.3026, abs=5e-5)

    def test_confident_correct_logits_approach_zero(self, rng):
        ids = rng.integers(2, 10, size=(2, 5))
        pad = np.zeros((2, 5), dtype=bool)
        losses = []
        for margin in (1.0, 5.0, 20.0):
            def oracle(masked, p, margin=margin):
                return Tensor(margin * np.eye(10)[ids])
            losses.append(float(mlm_loss(ids, pad, 0.5, oracle, np.random.default_rng(0), 1).data))
        assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-7

    def test_mask_count_and_pads(self, rng):
        ids = np.arange(2, 12).reshape(1, 10)
        pad = np.zeros((1, 10), dtype=bool)
        pad[0, 7:] = True
        masked, chosen = mask_tokens(ids, pad, 0.15, rng, mask_id=1)
        assert chosen.sum() == math.ceil(0.15 * 7)
        assert not (chosen & pad).any()
        assert np.all(masked[chosen] == 1) and np.all(masked[~chosen] == ids[~chosen])

    def test_replay(self):
        ids = np.random.default_rng(5).integers(2, 20, size=(4, 8))
        pad = np.zeros_like(ids, dtype=bool)
        logits = np.random.default_rng(6).normal(size=(4, 8, 20))
        runs = [(mask_tokens(ids, pad, 0.3, np.random.default_rng(9), 1)[1],
                 float(mlm_loss(ids, pad, 0.3, lambda m, p: Tensor(logits), np.random.default_rng(9), 1).data))
                for _ in range(2)]
        assert np.array_equal(runs[0][0], runs[1][0]) and runs[0][1] == runs[1][1]

    def test_errors(self, rng):
        with pytest.raises(LossError):
            mask_tokens(np.array([3, 4]), np.array([True, True]), 0.15, rng, 1)
        with pytest.raises(ValueError):
            mask_tokens(np.array([3, 4]), np.array([False, False]), 0.0, rng, 1)

    def test_gradient(self, rng):
        chosen = np.array([[True, False, True], [False, True, False]])
        targets = rng.integers(0, 4, size=(2, 3))
        assert gradcheck(lambda z: masked_cross_entropy(z, targets, chosen), rng.normal(size=(2, 3, 4))) < 1e-4


# --- VTMF ---------------------------------------------------------------------

class TestVTMF:
    def test_default_weights(self):
        assert float(vtmf_loss(1.0, 1.0, 1.0).data) == pytest.approx(2.29, abs=1e-12)
        assert float(vtmf_loss(1.7, 0.0, 0.0).data) == 1.7

    def test_coefficients(self, rng):
        parts = [Tensor(rng.normal()) for _ in range(3)]
        alpha, beta_w = Tensor(0.84, requires_grad=True), Tensor(0.45, requires_grad=True)
        for p in parts:
            p.requires_grad = True
        with T.Tape() as tape:
            out = vtmf_loss(*parts, alpha=alpha, beta_w=beta_w)
        tape.backward(out)
        assert [float(p.grad) for p in parts] == [1.0, 0.84, 0.45]
        assert float(alpha.grad) == float(parts[1].data) and float(beta_w.grad) == float(parts[2].data)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 3), st.floats(0, 3))
    def test_linear(self, a, b, c, alpha, beta_w):
        w = LossWeights(alpha=alpha, beta_w=beta_w)
        assert float(vtmf_loss(a, b, c, w).data) == pytest.approx(a + alpha * b + beta_w * c, abs=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(LossError):
            vtmf_loss(1.0, float("nan"), 0.0)

    @pytest.mark.parametrize("kwargs", [{"tau": 0.0}, {"eps": 0.0}, {"alpha": -1.0}, {"beta_w": -0.1}])
    def test_weight_validation(self, kwargs):
        with pytest.raises(ValueError):
            LossWeights(**kwargs)
