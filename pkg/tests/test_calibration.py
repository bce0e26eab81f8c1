import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drshift import brier, calibration_report, ece, fit_temperature, miscls_entropy, nll
from drshift.errors import ContractError


class TestBrier:
    def test_perfect_prediction(self):
        assert brier([[1.0, 0.0]], [0]) == 0.0

    def test_hand_value(self):
        assert brier([[0.8, 0.2]], [0]) == pytest.approx(0.08, abs=1e-12)

    def test_uniform_two_class(self):
        assert brier([[0.5, 0.5]], [1]) == pytest.approx(0.5, abs=1e-12)

    def test_uniform_four_class(self):
        assert brier([[0.25] * 4], [2]) == pytest.approx(0.75, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            brier([[0.5, 0.5]], [0, 1])


class TestEce:
    def test_hand_example(self):
        probs = [[0.9, 0.1], [0.9, 0.1]]
        labels = [0, 1]  # one correct, one wrong at confidence 0.9
        val, bins = ece(probs, labels, n_bins=5)
        assert val == pytest.approx(0.4, abs=1e-12)
        top = bins[-1]
        assert top.count == 2 and top.mean_confidence == pytest.approx(0.9)
        assert top.accuracy == pytest.approx(0.5)

    def test_perfectly_calibrated_bins(self):
        # confidence 0.7 with 70% accuracy inside one bin
        probs = [[0.7, 0.3]] * 10
        labels = [0] * 7 + [1] * 3
        val, _ = ece(probs, labels, n_bins=5)
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_single_confident_correct(self):
        val, _ = ece([[1.0, 0.0]], [0], n_bins=5)
        assert val == 0.0

    def test_interior_edge_goes_to_upper_bin(self):
        _, bins = ece([[0.8, 0.2]], [0], n_bins=5)
        assert bins[-1].count == 1 and bins[-2].count == 0

    def test_single_bin_equals_accuracy_confidence_gap(self):
        rng = np.random.default_rng(0)
        P = rng.dirichlet(np.ones(3), size=50)
        y = rng.integers(0, 3, size=50)
        val, _ = ece(P, y, n_bins=1)
        acc = (P.argmax(1) == y).mean()
        conf = P.max(1).mean()
        assert val == pytest.approx(abs(acc - conf), abs=1e-12)

    def test_bin_counts_sum_to_n(self):
        rng = np.random.default_rng(1)
        P = rng.dirichlet(np.ones(4), size=33)
        y = rng.integers(0, 4, size=33)
        _, bins = ece(P, y)
        assert sum(b.count for b in bins) == 33

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 40))
        P = rng.dirichlet(np.ones(3), size=n)
        y = rng.integers(0, 3, size=n)
        perm = rng.permutation(n)
        e1, _ = ece(P, y)
        e2, _ = ece(P[perm], y[perm])
        assert e1 == pytest.approx(e2, abs=1e-12)
        assert brier(P, y) == pytest.approx(brier(P[perm], y[perm]), abs=1e-12)


class TestMisclsEntropy:
    def test_uniform_wrong_prediction(self):
        val, all_correct = miscls_entropy([[0.5, 0.5]], [1])
        # argmax ties break to class 0, so label 1 counts as misclassified
        assert val == pytest.approx(np.log(2), abs=1e-12)
        assert not all_correct

    def test_confident_wrong_limit(self):
        eps = 1e-12
        val, _ = miscls_entropy([[1 - eps, eps]], [1])
        assert val < 1e-10

    def test_all_correct_flag(self):
        val, all_correct = miscls_entropy([[0.9, 0.1]], [0])
        assert val == 0.0 and all_correct


class TestFitTemperature:
    def test_well_specified_logits_keep_temperature_near_one(self):
        rng = np.random.default_rng(2)
        n = 4000
        logits = rng.normal(scale=2.0, size=(n, 3))
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        labels = np.array([rng.choice(3, p=p) for p in probs])
        T = fit_temperature(logits, labels)
        assert 0.8 <= T <= 1.25

    def test_overconfident_logits_need_cooling(self):
        rng = np.random.default_rng(3)
        n = 2000
        logits = rng.normal(scale=2.0, size=(n, 3))
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        labels = np.array([rng.choice(3, p=p) for p in probs])
        T = fit_temperature(logits * 3.0, labels)
        assert T > 1.0

    def test_never_worse_than_unit_temperature(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            logits = rng.normal(size=(30, 4)) * rng.uniform(0.2, 5.0)
            labels = rng.integers(0, 4, size=30)
            T = fit_temperature(logits, labels)
            assert nll(logits, labels, T) <= nll(logits, labels, 1.0) + 1e-9

    def test_single_confident_sample_drives_temperature_down(self):
        # NLL is monotone in T here and exactly flat (0.0 to machine
        # precision) below T ~ 0.12, so the search lands at the low end of
        # the interval where the flat region starts.
        logits = np.array([[4.0, 0.0]])
        T = fit_temperature(logits, [0])
        assert T < 0.15
        assert nll(logits, [0], T) == 0.0


def test_calibration_report_fields():
    rng = np.random.default_rng(5)
    P = rng.dirichlet(np.ones(2), size=40)
    y = rng.integers(0, 2, size=40)
    rep = calibration_report(P, y)
    assert 0.0 <= rep.ece <= 1.0
    assert 0.0 <= rep.brier <= 2.0
    assert 0.0 <= rep.miscls_entropy <= np.log(2) + 1e-12
    assert sum(b.count for b in rep.bins) == 40
