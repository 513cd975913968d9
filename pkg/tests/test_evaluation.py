import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drfuzzy.evaluation import (
    class_report,
    confusion,
    parse_report_csv,
    render_report,
    report_csv,
    report_from_values,
    roc_auc_ovr,
    round_half_up,
)
from drfuzzy.verify import brute_force_counts, brute_force_prf, pairwise_auc

TABLE1 = dict(
    names=("No DR", "Mild/Moderate DR", "Severe/Proliferative DR"),
    precision=[0.98, 0.82, 0.81],
    recall=[0.99, 0.91, 0.58],
    f1=[0.99, 0.87, 0.67],
    support=[199, 117, 50],
)


def test_perfect_predictions_give_diagonal_matrix():
    y = [0, 1, 2, 2, 1]
    cm = confusion(y, y, 3)
    assert np.array_equal(cm.counts, np.diag([1, 2, 2]))
    report = class_report(cm)
    assert report.accuracy == 1.0
    assert np.all(report.precision == 1) and np.all(report.recall == 1) and np.all(report.f1 == 1)


def test_single_off_diagonal_count():
    cm = confusion([0], [2], 3)
    assert cm.counts[0, 2] == 1 and cm.total == 1


def test_confusion_matches_counting_loop():
    rng = np.random.default_rng(0)
    t, p = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
    assert cm_equal(confusion(t, p, 4).counts, brute_force_counts(t, p, 4))


def cm_equal(a, b):
    return np.array_equal(np.asarray(a), np.asarray(b))


def test_confusion_rejects_bad_labels():
    with pytest.raises(ValueError):
        confusion([0, 3], [0, 1], 3)
    with pytest.raises(ValueError):
        confusion([0, 1], [0], 3)


def test_table1_aggregates_reproduce_printed_rows():
    report = report_from_values(**TABLE1)
    assert [round_half_up(report.macro[m]) for m in ("precision", "recall", "f1")] == ["0.87", "0.83", "0.84"]
    assert [round_half_up(report.weighted[m]) for m in ("precision", "recall", "f1")] == ["0.91", "0.91", "0.91"]
    assert round_half_up(report.accuracy) == "0.91"
    macro_row = next(line for line in render_report(report).splitlines() if line.startswith("Macro Avg"))
    assert macro_row.split()[2:5] == ["0.87", "0.83", "0.84"]


def test_report_matches_brute_force_prf():
    rng = np.random.default_rng(1)
    t, p = rng.integers(0, 3, 150), rng.integers(0, 3, 150)
    cm = confusion(t, p, 3)
    report = class_report(cm)
    for c, (pr, rc, f) in enumerate(brute_force_prf(cm.counts.tolist())):
        assert (report.precision[c], report.recall[c], report.f1[c]) == (pr, rc, f)
    assert report.accuracy == np.trace(cm.counts) / 150


def test_empty_class_is_flagged_undefined():
    report = class_report(confusion([0, 0, 1], [0, 0, 0], 3, ("a", "b", "c")))
    assert report.undefined["c"] == ["precision", "recall"]
    assert report.undefined["b"] == ["precision"]
    text = render_report(report)
    assert "c*" in text and "undefined" in text
    assert not np.any(np.isnan(report.precision))


def test_report_csv_roundtrip():
    rng = np.random.default_rng(2)
    report = class_report(confusion(rng.integers(0, 3, 90), rng.integers(0, 3, 90), 3))
    rows = parse_report_csv(report_csv(report))
    for k, name in enumerate(report.names):
        assert abs(rows[name]["precision"] - report.precision[k]) <= 1e-12
        assert abs(rows[name]["f1"] - report.f1[k]) <= 1e-12
    assert rows["Macro Avg"]["recall"] == report.macro["recall"]


def test_permuting_classes_permutes_rows():
    rng = np.random.default_rng(3)
    t, p = rng.integers(0, 3, 120), rng.integers(0, 3, 120)
    perm = np.array([2, 0, 1])
    a = class_report(confusion(t, p, 3))
    b = class_report(confusion(perm[t], perm[p], 3))
    assert np.allclose(b.precision[perm], a.precision)
    assert np.allclose(b.recall[perm], a.recall)
    assert a.macro == pytest.approx(b.macro)


def test_round_half_up():
    assert round_half_up(0.125) == "0.13"
    assert round_half_up(0.835) == "0.84"
    assert round_half_up(1.0) == "1.00"


def test_auc_extremes():
    y = np.array([0, 0, 1, 1])
    s = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]])
    assert roc_auc_ovr(y, s).auc.tolist() == [1.0, 1.0]
    assert roc_auc_ovr(y, -s).auc.tolist() == [0.0, 0.0]


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(4)
    y = rng.integers(0, 3, 100)
    s = np.round(rng.uniform(size=(100, 3)), 2)
    roc = roc_auc_ovr(y, s)
    for c in range(3):
        assert abs(roc.auc[c] - pairwise_auc(y == c, s[:, c])) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_rank_invariance(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 40)
    y[:2] = [0, 1]
    s = rng.uniform(size=(40, 2))
    assert np.allclose(roc_auc_ovr(y, s).auc, roc_auc_ovr(y, np.exp(3 * s) + 1).auc)


def test_auc_undefined_class_is_left_out_of_macro():
    y = np.array([0, 0, 1, 1])
    s = np.random.default_rng(5).uniform(size=(4, 3))
    roc = roc_auc_ovr(y, s)
    assert not roc.defined[2] and np.isnan(roc.auc[2])
    assert roc.macro_auc == pytest.approx(roc.auc[:2].mean())
    assert "undefined" in roc.to_csv(["a", "b", "c"])
    with pytest.raises(ValueError):
        roc_auc_ovr([1, 1], s[:2])


def test_roc_curves_start_at_origin_and_end_at_one():
    y = np.array([0, 1, 0, 1, 1])
    s = np.random.default_rng(6).uniform(size=(5, 2))
    fpr, tpr = roc_auc_ovr(y, s, with_curves=True).curves[1]
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
    assert np.trapezoid(tpr, fpr) == pytest.approx(roc_auc_ovr(y, s).auc[1])
