"""Tests for BH step-up rejection, q-values and error bookkeeping."""

import numpy as np
import pytest

from ebtrend.multiplicity import BhResult, bh_reject, error_metrics, q_values
from ebtrend.priorfit import InputError


def brute_force_bh(p, alpha):
    """Reference step-up rule evaluated literally from the definition."""
    p = np.asarray(p, dtype=float)
    n = p.size
    sorted_p = np.sort(p)
    j_hat = 0
    for j in range(1, n + 1):
        if sorted_p[j - 1] <= alpha * j / n:
            j_hat = j
    if j_hat == 0:
        return np.zeros(n, dtype=bool)
    return p <= sorted_p[j_hat - 1]


class TestBhReject:
    def test_hand_example(self):
        # [DERIVED] p = (0.001, 0.02, 0.9), alpha = 0.05: ranks 1 and 2 pass
        # their bounds 0.0167 and 0.0333, rank 3 fails.
        res = bh_reject(np.array([0.001, 0.02, 0.9]), 0.05)
        assert res.j_hat == 2
        assert list(res.rejected) == [True, True, False]

    def test_all_ones_rejects_nothing(self):
        res = bh_reject(np.ones(10), 0.1)
        assert res.j_hat == 0 and not res.rejected.any()
        assert res.threshold == 0.0

    def test_single_small_p(self):
        # [DERIVED] P_(1) = alpha/n sits exactly on its bound
        n, alpha = 20, 0.05
        p = np.ones(n)
        p[7] = alpha / n
        res = bh_reject(p, alpha)
        assert res.j_hat == 1 and res.rejected[7] and res.rejected.sum() == 1

    def test_ties_at_cutoff_all_rejected(self):
        # [DERIVED] ties share the order statistic, so all of them reject
        p = np.array([0.01, 0.01, 0.01, 1.0])
        res = bh_reject(p, 0.05)
        assert res.j_hat == 3
        assert list(res.rejected) == [True, True, True, False]

    def test_brute_force_oracle(self):
        # [DERIVED] literal step-up definition on 1000 random vectors
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            kind = rng.integers(0, 3)
            if kind == 0:
                p = rng.uniform(0, 1, n)
            elif kind == 1:
                p = np.round(rng.uniform(0, 1, n), 2)   # many ties
            else:
                p = rng.beta(0.3, 3.0, n)               # small-heavy
            alpha = float(rng.uniform(0.01, 0.3))
            res = bh_reject(p, alpha)
            expect = brute_force_bh(p, alpha)
            assert np.array_equal(res.rejected, expect)
            assert res.j_hat == int(expect.sum())

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(0, 1, 200) ** 2
        perm = rng.permutation(200)
        res = bh_reject(p, 0.1)
        res_p = bh_reject(p[perm], 0.1)
        assert np.array_equal(res.rejected[perm], res_p.rejected)

    def test_threshold_self_consistency(self):
        # Invariant: rejected set equals {p <= j_hat alpha / n} when nonempty
        rng = np.random.default_rng(2)
        p = rng.beta(0.5, 5.0, 500)
        res = bh_reject(p, 0.1)
        assert res.j_hat > 0
        assert np.array_equal(res.rejected, p <= res.threshold)

    def test_uniform_null_fdr_controlled(self):
        # [DERIVED] under the full null, E[FDP] <= alpha (equality for
        # independent uniforms); check the Monte-Carlo mean within 2 SE.
        rng = np.random.default_rng(3)
        alpha, reps, n = 0.1, 200, 10_000
        fdps = np.empty(reps)
        for r in range(reps):
            res = bh_reject(rng.uniform(0, 1, n), alpha)
            fdps[r] = 1.0 if res.j_hat > 0 else 0.0
        se = fdps.std(ddof=1) / np.sqrt(reps)
        assert fdps.mean() <= alpha + 2 * se

    def test_invalid_inputs(self):
        with pytest.raises(InputError):
            bh_reject(np.array([0.1, np.nan]), 0.05)
        with pytest.raises(InputError):
            bh_reject(np.array([-0.1, 0.5]), 0.05)
        with pytest.raises(InputError):
            bh_reject(np.array([0.5, 1.2]), 0.05)
        with pytest.raises(InputError):
            bh_reject(np.array([0.5]), 0.0)
        with pytest.raises(InputError):
            bh_reject(np.array([0.5]), 1.0)


class TestQValues:
    def test_manual_case(self):
        # [DERIVED] n = 3: scaled values (0.003, 0.03, 0.9), cummin from the
        # top leaves them unchanged here.
        q = q_values(np.array([0.001, 0.02, 0.9]))
        assert q == pytest.approx([0.003, 0.03, 0.9], abs=1e-12)

    def test_cummin_applied(self):
        # [DERIVED] a later rank with smaller n p/j pulls earlier q down
        q = q_values(np.array([0.04, 0.041]))
        assert q == pytest.approx([0.041, 0.041], abs=1e-12)

    def test_capped_at_one(self):
        q = q_values(np.array([0.9, 0.95, 1.0]))
        assert np.all(q <= 1.0)

    def test_consistent_with_bh(self):
        # Invariant: q_i <= alpha iff unit i is BH-rejected at alpha
        rng = np.random.default_rng(4)
        p = rng.beta(0.4, 4.0, 300)
        q = q_values(p)
        for alpha in (0.01, 0.05, 0.1, 0.2):
            res = bh_reject(p, alpha)
            assert np.array_equal(q <= alpha, res.rejected)

    def test_nan_rejected(self):
        with pytest.raises(InputError):
            q_values(np.array([0.1, np.nan]))


class TestErrorMetrics:
    def make_result(self, rejected):
        rejected = np.asarray(rejected, dtype=bool)
        return BhResult(alpha=0.1, j_hat=int(rejected.sum()), threshold=0.0,
                        rejected=rejected)

    def test_hand_case(self):
        # [DERIVED] 10 rejections, 3 of them null, 20 alternatives in total
        rejected = np.zeros(100, dtype=bool)
        rejected[:10] = True
        null_mask = np.ones(100, dtype=bool)
        null_mask[3:23] = False          # 20 alternatives; 7 of 10 hits true
        m = error_metrics(self.make_result(rejected), null_mask)
        assert m.v == 3 and m.r == 10
        assert m.fdp == pytest.approx(0.3)
        assert m.power == pytest.approx(7 / 20)

    def test_no_rejections(self):
        m = error_metrics(self.make_result(np.zeros(5)), np.ones(5, dtype=bool))
        assert m.v == 0 and m.r == 0 and m.fdp == 0.0

    def test_all_null_power_zero(self):
        rejected = np.array([True, False, True])
        m = error_metrics(self.make_result(rejected), np.ones(3, dtype=bool))
        assert m.fdp == 1.0 and m.power == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            error_metrics(self.make_result(np.zeros(3)), np.ones(4, dtype=bool))
