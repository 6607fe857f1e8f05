import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gesturefusion.metrics import (
    ConfusionMatrix,
    aggregate_folds,
    collapse_28_to_14,
    confusion_matrix,
    decompose_drop,
    grain_rates,
    grain_summary,
    intra_pair_errors,
    lawrfd,
    per_class_accuracy,
)
from gesturefusion.training import FoldResult
from tests.helpers import lawrfd_toy


def brute_force_counts(true, pred, c):
    out = [[0] * c for _ in range(c)]
    for t, p in zip(true, pred):
        out[t - 1][p - 1] += 1
    return out


def test_confusion_matrix_small_hand_case():
    cm = confusion_matrix([1, 1, 2, 3, 3, 3], [1, 2, 2, 3, 1, 3], "c14")
    assert cm.counts[:3, :3].tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 2]]
    assert cm.accuracy == pytest.approx(4 / 6)
    acc = per_class_accuracy(cm)
    assert acc[:3].tolist() == [0.5, 1.0, pytest.approx(2 / 3)]
    assert np.isnan(acc[3:]).all()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 3)), min_size=1, max_size=60))
def test_confusion_matrix_random_three_class(pairs):
    true, pred = zip(*pairs)
    cm = confusion_matrix(list(true), list(pred), "c14")
    assert cm.counts[:3, :3].tolist() == brute_force_counts(true, pred, 3)
    assert cm.counts.sum() == len(pairs)
    rows = cm.counts.sum(axis=1)
    np.testing.assert_allclose(np.nansum(cm.rates(), axis=1)[rows > 0], 100)


def test_out_of_range_label():
    with pytest.raises(ValueError, match="out of range"):
        confusion_matrix([1, 15], [1, 2], "c14")
    with pytest.raises(ValueError):
        confusion_matrix([], [], "c14")


def test_csv_round_trip():
    cm = confusion_matrix([1, 5, 28], [2, 5, 27], "c28")
    assert np.array_equal(ConfusionMatrix.from_csv(cm.to_csv()).counts, cm.counts)


def test_grain_summary_population_std():
    units = {"fine": [70, 80, 90], "coarse": [50, 50], "both": [70, 80, 90, 50, 50]}
    report = grain_summary(units)
    assert report.fine.best == 90 and report.fine.worst == 70 and report.fine.mean == 80
    assert report.fine.std == pytest.approx(8.16496580927726, abs=1e-12)
    assert report.coarse.std == 0
    for g in ("fine", "coarse", "both"):
        s = report[g]
        assert s.worst <= s.mean <= s.best and s.std >= 0


def test_grain_summary_empty_group():
    with pytest.raises(ValueError, match="empty"):
        grain_summary({"fine": [], "coarse": [1.0], "both": [1.0]})


def test_grain_rates_restrict_to_grain():
    # gesture 1 (G) is fine, gesture 2 (T) is coarse
    rates = grain_rates([1, 1, 2, 2], [1, 2, 2, 2], "c14")
    assert rates == {"fine": 50.0, "coarse": 100.0, "both": 75.0}
    only_coarse = grain_rates([2], [2], "c14")
    assert np.isnan(only_coarse["fine"])


def test_collapse_examples():
    true = np.array([1, 2, 3, 4])
    pred = np.array([2, 1, 3, 5])
    t14, p14 = collapse_28_to_14(true, pred)
    assert t14.tolist() == [1, 1, 2, 2] and p14.tolist() == [1, 1, 2, 3]
    cm = collapse_28_to_14(confusion_matrix(true, pred, "c28"))
    assert cm.class_mode == "c14" and cm.counts[0, 0] == 2 and cm.counts[1, 2] == 1
    with pytest.raises(ValueError):
        collapse_28_to_14(confusion_matrix([1], [1], "c14"))


def test_lawrfd_documented_toy_case():
    true, pred = lawrfd_toy()
    assert len(true) == 20 and intra_pair_errors(true, pred) == 3
    assert lawrfd(true, pred) == pytest.approx(3 / 20, abs=1e-15)


def test_lawrfd_zero_iff_no_intra_pair():
    rng = np.random.default_rng(3)
    for _ in range(300):
        true = rng.integers(1, 29, 30)
        pred = np.where(rng.random(30) < 0.5, true, rng.integers(1, 29, 30))
        assert (lawrfd(true, pred) == 0) == (intra_pair_errors(true, pred) == 0)
        assert 0 <= lawrfd(true, pred) <= 1


def test_collapse_never_decreases_accuracy():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        true, pred = rng.integers(1, 29, n), rng.integers(1, 29, n)
        t14, p14 = collapse_28_to_14(true, pred)
        assert np.mean(t14 == p14) >= np.mean(true == pred)


def test_published_decomposition_arithmetic():
    d = decompose_drop(0.8546, 0.7419, 0.0729)
    assert d["total_drop"] == pytest.approx(0.1127, abs=1e-12)
    assert d["residual"] == pytest.approx(0.0398, abs=1e-12)
    assert d["intra_gesture"] + d["residual"] == pytest.approx(d["total_drop"], abs=1e-15)


def fold(network, subject, true, pred, mode="c14"):
    c = 14 if mode == "c14" else 28
    scores = np.eye(c)[np.asarray(pred) - 1]
    return FoldResult(network, subject, mode, [f"s{subject}_{i}" for i in range(len(true))],
                      np.full(len(true), subject), np.asarray(true), scores)


def test_aggregate_pooled_and_fold_stats():
    a = fold("skeleton_lstm", 1, [1, 2, 3, 4, 5, 6, 7, 8, 9, 10], [1, 2, 3, 4, 5, 6, 7, 8, 9, 10])
    b = fold("skeleton_lstm", 2, [1, 2, 3, 4, 5, 6, 7, 8, 9, 10], [1, 2, 3, 4, 1, 1, 1, 1, 1, 1])
    report = aggregate_folds([b, a], expected_folds=[1, 2])
    assert report.folds == [1, 2]
    assert report.fold_accuracy == [1.0, 0.4]
    assert report.accuracy == pytest.approx(0.7)
    assert report.grain_report.both.best == 100 and report.grain_report.both.worst == 40
    assert report.grain_report.both.std == pytest.approx(30)
    assert report.lawrfd is None


def test_aggregate_28_adds_collapse():
    true, pred = lawrfd_toy()
    report = aggregate_folds([fold("fl_concat", 1, true[:10], pred[:10], "c28"),
                              fold("fl_concat", 2, true[10:], pred[10:], "c28")])
    assert report.lawrfd == pytest.approx(0.15)
    assert report.collapsed.accuracy == pytest.approx(0.9)
    assert report.to_dict()["lawrfd"] == pytest.approx(0.15)


def test_aggregate_rejects_bad_inputs():
    a = fold("skeleton_lstm", 1, [1], [1])
    with pytest.raises(ValueError, match="duplicate"):
        aggregate_folds([a, a])
    with pytest.raises(ValueError, match="missing fold"):
        aggregate_folds([a], expected_folds=[1, 2])
    with pytest.raises(ValueError, match="mixed"):
        aggregate_folds([a, fold("fl_concat", 2, [1], [1])])
