"""Confusion matrices, per-class and aggregate metrics, one-vs-rest ROC-AUC
and the classification-report rendering."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0]
        if self.counts.shape != (k, k) or np.any(self.counts < 0):
            raise ValueError("confusion counts must be a square non-negative matrix")
        if not self.names:
            self.names = tuple(f"class {i}" for i in range(k))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\pred", *self.names])
        for name, row in zip(self.names, self.counts):
            writer.writerow([name, *row.tolist()])
        return buf.getvalue()


def confusion(true_labels, pred_labels, n_classes: int, names: Sequence[str] = ()) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(pred_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError("true and predicted label arrays differ in length")
    for arr, what in ((t, "true"), (p, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{what} labels must lie in [0, {n_classes})")
    counts = np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    return ConfusionMatrix(counts, tuple(names))


@dataclass
class ClassReport:
    names: tuple[str, ...]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro: dict
    weighted: dict
    undefined: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(np.sum(self.support))


def _safe_ratio(num: np.ndarray, den: np.ndarray):
    num = num.astype(np.float64)
    den = den.astype(np.float64)
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return out, den == 0


def harmonic_f1(precision: np.ndarray, recall: np.ndarray) -> np.ndarray:
    s = precision + recall
    return np.divide(2 * precision * recall, s, out=np.zeros_like(s, dtype=np.float64), where=s > 0)


def aggregate(precision, recall, f1, support) -> dict:
    """Macro (unweighted) and support-weighted averages of per-class
    metrics, plus the accuracy they imply (support-weighted recall)."""
    precision, recall, f1 = (np.asarray(a, dtype=np.float64) for a in (precision, recall, f1))
    support = np.asarray(support, dtype=np.float64)
    if support.sum() <= 0:
        raise ValueError("aggregation needs a positive total support")
    w = support / support.sum()
    return {
        "macro": {"precision": float(precision.mean()), "recall": float(recall.mean()), "f1": float(f1.mean())},
        "weighted": {"precision": float(w @ precision), "recall": float(w @ recall), "f1": float(w @ f1)},
        "accuracy": float(w @ recall),
    }


def class_report(cm: ConfusionMatrix) -> ClassReport:
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise ValueError("cannot report on an empty confusion matrix")
    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    support = counts.sum(axis=1)
    precision, p_undef = _safe_ratio(tp, predicted)
    recall, r_undef = _safe_ratio(tp, support)
    f1 = harmonic_f1(precision, recall)
    agg = aggregate(precision, recall, f1, support)
    undefined = {}
    for k in range(cm.n_classes):
        flags = [m for m, bad in (("precision", p_undef[k]), ("recall", r_undef[k])) if bad]
        if flags:
            undefined[cm.names[k]] = flags
    return ClassReport(
        names=cm.names,
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        accuracy=float(np.trace(counts) / total),
        macro=agg["macro"],
        weighted=agg["weighted"],
        undefined=undefined,
    )


def report_from_values(names, precision, recall, f1, support) -> ClassReport:
    """Build a report from already-computed per-class values (e.g. a
    published table) so the aggregate rows can be recomputed."""
    agg = aggregate(precision, recall, f1, support)
    return ClassReport(
        names=tuple(names),
        precision=np.asarray(precision, dtype=np.float64),
        recall=np.asarray(recall, dtype=np.float64),
        f1=np.asarray(f1, dtype=np.float64),
        support=np.asarray(support, dtype=np.int64),
        accuracy=agg["accuracy"],
        macro=agg["macro"],
        weighted=agg["weighted"],
    )


def round_half_up(value: float, places: int = 2) -> str:
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


def render_report(report: ClassReport) -> str:
    """Fixed-width table: one row per class, then Accuracy, Macro Avg and
    Weighted Avg, two decimals rounded half-up."""
    label_w = max([len("Weighted Avg"), len("Label")] + [len(n) + 1 for n in report.names])
    head = f"{'Label':<{label_w}}  {'Precision':>9}  {'Recall':>9}  {'F1-Score':>9}  {'Support':>7}"
    lines = [head, "-" * len(head)]
    for k, name in enumerate(report.names):
        mark = "*" if name in report.undefined else ""
        lines.append(
            f"{name + mark:<{label_w}}  {round_half_up(report.precision[k]):>9}  {round_half_up(report.recall[k]):>9}  "
            f"{round_half_up(report.f1[k]):>9}  {int(report.support[k]):>7}"
        )
    total = report.total
    lines.append(f"{'Accuracy':<{label_w}}  {'-':>9}  {'-':>9}  {round_half_up(report.accuracy):>9}  {total:>7}")
    for label, agg in (("Macro Avg", report.macro), ("Weighted Avg", report.weighted)):
        lines.append(
            f"{label:<{label_w}}  {round_half_up(agg['precision']):>9}  {round_half_up(agg['recall']):>9}  "
            f"{round_half_up(agg['f1']):>9}  {total:>7}"
        )
    if report.undefined:
        lines.append("")
        for name, metrics in report.undefined.items():
            lines.append(f"* {name}: {', '.join(metrics)} undefined (zero denominator), shown as 0.00")
    return "\n".join(lines) + "\n"


def report_csv(report: ClassReport) -> str:
    """Full-precision ``label,precision,recall,f1,support`` rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label", "precision", "recall", "f1", "support"])
    for k, name in enumerate(report.names):
        writer.writerow([name, repr(float(report.precision[k])), repr(float(report.recall[k])),
                         repr(float(report.f1[k])), int(report.support[k])])
    total = report.total
    writer.writerow(["Accuracy", "", "", repr(report.accuracy), total])
    for label, agg in (("Macro Avg", report.macro), ("Weighted Avg", report.weighted)):
        writer.writerow([label, repr(agg["precision"]), repr(agg["recall"]), repr(agg["f1"]), total])
    return buf.getvalue()


def parse_report_csv(text: str) -> dict[str, dict[str, float]]:
    rows = {}
    for row in csv.DictReader(io.StringIO(text)):
        rows[row["label"]] = {k: (float(v) if v != "" else None) for k, v in row.items() if k != "label"}
    return rows


# ---------------------------------------------------------------------------
# ROC-AUC
# ---------------------------------------------------------------------------

@dataclass
class RocResult:
    auc: np.ndarray  # NaN where undefined
    defined: np.ndarray
    macro_auc: float
    curves: list = field(default_factory=list)

    def to_csv(self, names: Sequence[str]) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "auc"])
        for name, a, ok in zip(names, self.auc, self.defined):
            writer.writerow([name, repr(float(a)) if ok else "undefined"])
        writer.writerow(["Macro Avg", repr(self.macro_auc)])
        return buf.getvalue()


def binary_auc(positive: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC via average ranks; ties count one half."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve_points(positive: np.ndarray, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, pos = scores[order], positive[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(pos)[distinct]
    fps = np.cumsum(~pos)[distinct]
    tpr = np.r_[0.0, tps / max(pos.sum(), 1)]
    fpr = np.r_[0.0, fps / max((~pos).sum(), 1)]
    return fpr, tpr


def roc_auc_ovr(true_labels, scores, with_curves: bool = False) -> RocResult:
    """One-vs-rest AUC per class; classes lacking positives or negatives are
    flagged undefined and left out of the macro mean."""
    y = np.asarray(true_labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != y.size:
        raise ValueError(f"scores must be N x K with N={y.size}, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    k = scores.shape[1]
    auc = np.full(k, np.nan)
    defined = np.zeros(k, dtype=bool)
    curves = []
    for c in range(k):
        pos = y == c
        if 0 < pos.sum() < y.size:
            auc[c] = binary_auc(pos, scores[:, c])
            defined[c] = True
        if with_curves:
            curves.append(roc_curve_points(pos, scores[:, c]) if defined[c] else None)
    if not defined.any():
        raise ValueError("ROC-AUC is undefined for every class (ground truth has a single class)")
    return RocResult(auc, defined, float(np.mean(auc[defined])), curves)
