import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from getscal.autodiff import softmax
from getscal.calibrators.scaling import scale_logits_by_temperature
from getscal.metrics import (BinStats, accuracy_and_nll, calibration_report, degree_binned_ece, ece,
                             equal_mass_bins, probabilities, reliability_report, var_ece)

from oracles import brute_force_ece


def probs_from_conf(conf, correct):
    """Two-class probability rows with the given max confidence and correctness (label 0 when correct)."""
    conf = np.asarray(conf, dtype=float)
    p = np.stack([conf, 1 - conf], axis=1)
    labels = np.where(np.asarray(correct) == 1, 0, 1)
    return p, labels


def test_equal_mass_examples():
    bins = equal_mass_bins(np.array([0.6, 0.9, 0.7, 0.8]), 2)
    assert [b.tolist() for b in bins] == [[0, 2], [3, 1]]
    assert [len(b) for b in equal_mass_bins(np.arange(5.0), 2)] == [3, 2]
    sizes = [len(b) for b in equal_mass_bins(np.arange(3.0), 10)]
    assert sizes == [1, 1, 1] + [0] * 7


def test_equal_mass_ties_by_index():
    bins = equal_mass_bins(np.array([0.5, 0.5, 0.5, 0.1]), 2)
    assert [b.tolist() for b in bins] == [[3, 0], [1, 2]]


def test_perfect_predictor_has_zero_ece():
    p = np.eye(3)[[0, 1, 2, 1]]
    e, bins = ece(p, [0, 1, 2, 1])
    assert e == 0.0
    assert all(b.accuracy == b.avg_confidence == 1.0 for b in bins if b.node_count)


def test_four_sample_hand_case():
    p, y = probs_from_conf([0.6, 0.7, 0.8, 0.9], [0, 1, 1, 1])
    e, bins = ece(p, y, num_bins=2)
    assert e == pytest.approx(0.15, abs=1e-15)
    assert (bins[0].avg_confidence, bins[0].accuracy) == (pytest.approx(0.65), 0.5)
    assert (bins[1].avg_confidence, bins[1].accuracy) == (pytest.approx(0.85), 1.0)
    rel = reliability_report(p, y, num_bins=2)
    assert [(b.node_count, b.accuracy) for b in rel] == [(2, 0.5), (2, 1.0)]


def test_uniform_predictor_reliability():
    rel = reliability_report(np.full((7, 2), 0.5), np.zeros(7, int), num_bins=3)
    assert all(b.avg_confidence == 0.5 for b in rel if b.node_count)


def test_ece_rejects_unnormalized_rows():
    with pytest.raises(ValueError):
        ece(np.array([[0.5, 0.6]]), [0])


def test_ece_mask():
    p, y = probs_from_conf([0.6, 0.7, 0.8, 0.9], [0, 1, 1, 1])
    mask = np.array([True, False, True, True])
    e, _ = ece(p, y, mask, num_bins=1)
    assert e == pytest.approx(abs(2 / 3 - (0.6 + 0.8 + 0.9) / 3), abs=1e-15)


def test_degree_binned_star_graph():
    # center 0 with degree 4, leaves 1..4 with degree 1
    degrees = np.array([4, 1, 1, 1, 1])
    p, y = probs_from_conf([0.9, 0.6, 0.7, 0.8, 0.55], [1, 1, 0, 1, 1])
    _, bins = degree_binned_ece(p, y, degrees, num_bins=2)
    assert [b.node_count for b in bins] == [3, 2]
    # first bin: three leaves (ties by node index) -> nodes 1, 2, 3; second: leaf 4 and the center
    assert bins[0].avg_confidence == pytest.approx((0.6 + 0.7 + 0.8) / 3)
    assert bins[1].avg_confidence == pytest.approx((0.55 + 0.9) / 2)


def test_degree_binned_single_bin():
    rng = np.random.default_rng(0)
    p = softmax(rng.standard_normal((50, 4)))
    y = rng.integers(0, 4, 50)
    e, _ = degree_binned_ece(p, y, rng.integers(0, 9, 50), num_bins=1)
    acc = np.mean(p.argmax(1) == y)
    assert e == pytest.approx(abs(acc - p.max(1).mean()), abs=1e-12)


def test_var_ece_examples():
    same = [BinStats(i, 5, 0.8, 0.7) for i in range(4)]
    assert var_ece(same) == 0.0
    two = [BinStats(0, 10, 0.5, 0.6), BinStats(1, 10, 0.5, 0.8)]
    assert var_ece(two) == pytest.approx(0.0025, abs=1e-12)
    # empty bins are ignored
    assert var_ece(two + [BinStats(2, 0, 0.0, 0.0)]) == pytest.approx(0.0025, abs=1e-12)
    with pytest.raises(ValueError):
        var_ece([BinStats(0, 0, 0.0, 0.0)])


def test_accuracy_and_nll_examples():
    assert accuracy_and_nll(np.array([[1.0, 0.0]]), [0]) == (1.0, 0.0)
    acc, nll = accuracy_and_nll(np.array([[0.5, 0.5]]), [1])
    assert acc == 0.0 and nll == pytest.approx(np.log(2))
    acc, nll = accuracy_and_nll(np.array([[0.8, 0.2], [0.4, 0.6]]), [0, 0])
    assert acc == 0.5 and nll == pytest.approx(0.5 * (-np.log(0.8) - np.log(0.4)))
    # zero probability on the label is clamped instead of producing inf
    assert np.isfinite(accuracy_and_nll(np.array([[1.0, 0.0]]), [1])[1])
    acc2, nll2 = accuracy_and_nll(np.log(np.array([[0.8, 0.2], [0.4, 0.6]])), [0, 0], from_logits=True)
    assert acc2 == 0.5 and nll2 == pytest.approx(nll, abs=1e-12)


def test_calibration_report_fields():
    rng = np.random.default_rng(3)
    p = softmax(rng.standard_normal((40, 3)))
    y = rng.integers(0, 3, 40)
    rep = calibration_report(p, y, rng.integers(0, 5, 40))
    assert 0 <= rep.ece <= 1
    assert sum(b.node_count for b in rep.bins) == 40 == sum(b.node_count for b in rep.degree_bins)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.integers(2, 10), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_ece_matches_brute_force(n, k, b, seed):
    rng = np.random.default_rng(seed)
    p = softmax(3 * rng.standard_normal((n, k)))
    y = rng.integers(0, k, n)
    e, bins = ece(p, y, num_bins=b)
    assert abs(e - brute_force_ece(p, y, b)) <= 1e-12
    assert 0.0 <= e <= 1.0
    assert sum(x.node_count for x in bins) == n


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 100), st.integers(0, 2**31 - 1))
def test_unit_temperature_leaves_ece_bit_identical(n, seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, 4))
    y = rng.integers(0, 4, n)
    assert ece(probabilities(scale_logits_by_temperature(z, 1.0)), y)[0] == ece(probabilities(z), y)[0]
