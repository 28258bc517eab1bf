"""Metrics and reports: UAR, WAR, confusion matrices, one-vs-rest ROC/AUC and
the one-tailed z-test used to compare two systems.

Labels are integer class ids ``0 .. K-1`` (see :data:`hsattn.corpus.LABELS`).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from hsattn.audio import FeatureConfig
from hsattn.corpus import LABELS, CorpusManifest
from hsattn.errors import InputError, MetricError
from hsattn.training import ModelCheckpoint, load_split

SIGNIFICANCE = 0.05


def _pair(truth, predicted) -> tuple[np.ndarray, np.ndarray]:
    truth, predicted = np.asarray(truth), np.asarray(predicted)
    if truth.shape != predicted.shape or truth.ndim != 1:
        raise InputError(f"truth {truth.shape} and predictions {predicted.shape} must be equal-length vectors")
    return truth, predicted


def confusion_matrix(truth, predicted, num_classes: int = 3, normalize: bool = False) -> np.ndarray:
    """``counts[i, j]`` = number of records of class ``i`` predicted as ``j``."""
    truth, predicted = _pair(truth, predicted)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truth, predicted), 1)
    if not normalize:
        return counts
    rows = counts.sum(axis=1, keepdims=True)
    missing = np.flatnonzero(rows[:, 0] == 0)
    if missing.size:
        raise MetricError(f"class(es) {missing.tolist()} absent from truth; recall undefined")
    return counts / rows


def recalls(truth, predicted, num_classes: int = 3) -> np.ndarray:
    return np.diag(confusion_matrix(truth, predicted, num_classes, normalize=True))


def uar(truth, predicted, num_classes: int = 3) -> float:
    """Unweighted average recall: the mean of per-class recalls."""
    return float(recalls(truth, predicted, num_classes).mean())


def war(truth, predicted) -> float:
    """Weighted average recall, which is plain accuracy."""
    truth, predicted = _pair(truth, predicted)
    if truth.size == 0:
        raise MetricError("no records")
    return float(np.mean(truth == predicted))


# -- ROC ------------------------------------------------------------------------------

def roc_curve(positive, scores) -> np.ndarray:
    """Step ROC over every distinct score plus both infinite thresholds.

    Returns rows ``(fpr, tpr, threshold)``; a record is called positive when
    its score is at least the threshold.
    """
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1], [-np.inf]])
    rows = []
    for thr in thresholds:
        called = scores >= thr
        rows.append(((called & ~positive).sum() / n_neg, (called & positive).sum() / n_pos, thr))
    return np.array(rows)


def trapezoid_auc(curve: np.ndarray) -> float:
    fpr, tpr = curve[:, 0], curve[:, 1]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


@dataclass
class RocResult:
    curves: dict[int, np.ndarray]
    auc: dict[int, float]
    macro_auc: float
    excluded: list[int]


def roc_auc(truth, scores, num_classes: int | None = None) -> RocResult:
    """One-vs-rest ROC per class and the macro (unweighted) mean AUC.

    Classes without positives or without negatives are excluded with a warning.
    """
    truth = np.asarray(truth)
    scores = np.asarray(scores, dtype=np.float64)
    k = scores.shape[1] if num_classes is None else num_classes
    if scores.shape != (len(truth), k):
        raise InputError(f"scores shape {scores.shape} does not match {len(truth)} records × {k} classes")
    curves, auc, excluded = {}, {}, []
    for c in range(k):
        pos = truth == c
        if pos.all() or not pos.any():
            excluded.append(c)
            warnings.warn(f"class {c} has no {'negatives' if pos.all() else 'positives'}; excluded from macro AUC")
            continue
        curves[c] = roc_curve(pos, scores[:, c])
        auc[c] = trapezoid_auc(curves[c])
    if not auc:
        raise MetricError("every class is degenerate; AUC undefined")
    return RocResult(curves, auc, float(np.mean(list(auc.values()))), excluded)


# -- significance ---------------------------------------------------------------------

@dataclass(frozen=True)
class ZTest:
    z: float
    p: float

    @property
    def significant(self) -> bool:
        return self.p < SIGNIFICANCE

    @property
    def verdict(self) -> str:
        return "significant" if self.significant else "not significant"


def z_test_uar(preds_a, preds_b, truth) -> ZTest:
    """One-tailed pooled two-proportion z-test on correct-classification rates.

    Tests whether system A is better than system B; ``p`` is the upper tail.
    """
    truth = np.asarray(truth)
    _pair(truth, preds_a)
    _pair(truth, preds_b)
    n = truth.size
    if n == 0:
        raise InputError("z-test needs at least one record")
    pa = float(np.mean(np.asarray(preds_a) == truth))
    pb = float(np.mean(np.asarray(preds_b) == truth))
    return z_test_proportions(pa, pb, n)


def z_test_proportions(pa: float, pb: float, n: int) -> ZTest:
    if n <= 0:
        raise InputError("z-test needs at least one record")
    pooled = (pa + pb) / 2
    spread = math.sqrt(pooled * (1 - pooled) * 2 / n)
    z = 0.0 if spread == 0 else (pa - pb) / spread
    return ZTest(z, 0.5 * math.erfc(z / math.sqrt(2)))


# -- reports -------------------------------------------------------------------------

def percent(value: float) -> str:
    return f"{100 * value:.1f}"


@dataclass
class EvalReport:
    split: str
    files: list[str]
    truth: list[int]
    predicted: list[int]
    recalls: list[float]
    uar: float
    war: float
    confusion: list[list[float]]
    counts: list[list[int]]
    auc: dict[str, float]
    macro_auc: float
    roc: dict[str, list[list[float]]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["uar_percent"] = percent(self.uar)
        d["war_percent"] = percent(self.war)
        d["labels"] = list(LABELS)
        # JSON has no infinities; the endpoint thresholds become strings
        d["roc"] = {lab: [[f, t, thr if math.isfinite(thr) else repr(thr)] for f, t, thr in curve]
                    for lab, curve in self.roc.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    def summary(self) -> str:
        return (f"{self.split}: {len(self.files)} records  UAR {percent(self.uar)} %  "
                f"WAR {percent(self.war)} %  macro AUC {self.macro_auc:.3f}")


def build_report(split: str, files, truth, log_probs) -> EvalReport:
    truth = np.asarray(truth)
    probs = np.exp(np.asarray(log_probs, dtype=np.float64))
    predicted = probs.argmax(axis=1)
    k = probs.shape[1]
    norm = confusion_matrix(truth, predicted, k, normalize=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        roc = roc_auc(truth, probs, k)
    return EvalReport(
        split=split,
        files=list(files),
        truth=truth.tolist(),
        predicted=predicted.tolist(),
        recalls=np.diag(norm).tolist(),
        uar=float(np.diag(norm).mean()),
        war=war(truth, predicted),
        confusion=norm.tolist(),
        counts=confusion_matrix(truth, predicted, k).tolist(),
        auc={LABELS[c]: a for c, a in roc.auc.items()},
        macro_auc=roc.macro_auc,
        roc={LABELS[c]: curve.tolist() for c, curve in roc.curves.items()},
    )


def evaluate(checkpoint: ModelCheckpoint, manifest: CorpusManifest, split: str, features=None) -> EvalReport:
    """Run the checkpoint over every record of ``split`` and aggregate metrics."""
    fc = FeatureConfig(**checkpoint.feature_config) if checkpoint.feature_config else None
    records, x, y = load_split(manifest, split, features, fc)
    return build_report(split, [r.file for r in records], y, checkpoint.predict(x))


def write_report(report: EvalReport, out_dir) -> list[Path]:
    """Write ``report.json``, ``confusion.csv`` and one ``roc_<class>.csv`` per class."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "report.json"]
    written[0].write_text(report.to_json() + "\n")
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth", *LABELS])
        for lab, row in zip(LABELS, report.confusion):
            w.writerow([lab, *(repr(v) for v in row)])
    written.append(out / "confusion.csv")
    for lab, curve in report.roc.items():
        path = out / f"roc_{lab}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr", "threshold"])
            w.writerows([repr(a) for a in row] for row in curve)
        written.append(path)
    return written
