"""Confusion counts, segmentation metrics, ROC-AUC and report output."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .data import Sample, pad_to_multiple
from .errors import DataError, LabelError, MkisError, ShapeError
from .tensor import Tensor, no_grad

ACCURACY_COLORS = {
    "tp": (0, 0, 0),
    "tn": (255, 255, 255),
    "fp": (255, 0, 0),
    "fn": (255, 255, 0),
    "outside": (128, 128, 128),
}

METRIC_NAMES = ("se", "sp", "acc", "auc", "f1", "jaccard")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass
class MetricsReport:
    """Metric values; a metric is None when undefined, with the cause in ``undefined``."""

    counts: ConfusionCounts
    se: Optional[float] = None
    sp: Optional[float] = None
    acc: Optional[float] = None
    f1: Optional[float] = None
    jaccard: Optional[float] = None
    auc: Optional[float] = None
    undefined: dict = field(default_factory=dict)
    dataset: str = ""
    model: str = ""

    def as_row(self, params=None):
        row = {"dataset": self.dataset, "model": self.model}
        for k in METRIC_NAMES:
            v = getattr(self, k)
            row[k] = "" if v is None else f"{v:.6f}"
        row["params"] = "" if params is None else str(params)
        return row


def _binary(arr, what):
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise LabelError(f"{what} must be binary")
    return arr.astype(bool)


def confusion(pred, gt, mask=None) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    p = _binary(pred, "prediction")
    g = _binary(gt, "ground truth")
    if mask is not None:
        m = np.asarray(mask).astype(bool)
        if m.shape != g.shape:
            raise ShapeError(f"mask shape {m.shape} != ground-truth shape {g.shape}")
        p, g = p[m], g[m]
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, tn, fp, fn)


def _ratio(num, den, name, reason, undefined):
    if den == 0:
        undefined[name] = reason
        return None
    return num / den


def metrics_from_counts(counts: ConfusionCounts, **ids) -> MetricsReport:
    if counts.total <= 0:
        raise DataError("no counted pixels")
    c = counts
    undefined = {}
    return MetricsReport(
        counts=c,
        se=_ratio(c.tp, c.tp + c.fn, "se", "no positive pixels in the ground truth (tp + fn = 0)", undefined),
        sp=_ratio(c.tn, c.tn + c.fp, "sp", "no negative pixels in the ground truth (tn + fp = 0)", undefined),
        acc=(c.tp + c.tn) / c.total,
        f1=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1", "no positives predicted or present", undefined),
        jaccard=_ratio(c.tp, c.tp + c.fp + c.fn, "jaccard", "no positives predicted or present", undefined),
        undefined=undefined,
        **ids,
    )


def roc_auc(prob, gt, mask=None) -> Optional[float]:
    """Rank-based (Mann-Whitney) AUC with average ranks for ties.

    Returns None when the counted pixels contain only one class.
    """
    prob = np.asarray(prob, dtype=np.float64)
    g = _binary(gt, "ground truth")
    if prob.shape != g.shape:
        raise ShapeError(f"score shape {prob.shape} != ground-truth shape {g.shape}")
    if mask is not None:
        m = np.asarray(mask).astype(bool)
        prob, g = prob[m], g[m]
    else:
        prob, g = prob.ravel(), g.ravel()
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(prob, method="average")
    u = ranks[g].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def render_accuracy_map(pred, gt, mask=None) -> np.ndarray:
    """RGB map: TP black, TN white, FP red, FN yellow, outside the mask grey."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or (mask is not None and np.shape(mask) != gt.shape):
        raise ShapeError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {np.shape(mask)}")
    p = _binary(pred, "prediction")
    g = _binary(gt, "ground truth")
    out = np.empty(g.shape + (3,), dtype=np.uint8)
    out[p & g] = ACCURACY_COLORS["tp"]
    out[~p & ~g] = ACCURACY_COLORS["tn"]
    out[p & ~g] = ACCURACY_COLORS["fp"]
    out[~p & g] = ACCURACY_COLORS["fn"]
    if mask is not None:
        out[~np.asarray(mask).astype(bool)] = ACCURACY_COLORS["outside"]
    return out


# model evaluation -------------------------------------------------------------

@dataclass
class Prediction:
    sample_id: str
    prob: np.ndarray  # foreground probability, H x W
    pred: np.ndarray  # argmax label, H x W uint8


def predict_sample(model, sample: Sample) -> Prediction:
    padded, record = pad_to_multiple(sample, model.config.downsample)
    x = np.transpose(padded.image, (2, 0, 1))[None].astype(model.dtype)
    with no_grad():
        probs = model.forward(Tensor(x, dtype=model.dtype), mode="infer").data[0]
    probs = np.transpose(probs, (1, 2, 0))
    probs = record.crop(probs)
    pred = np.argmax(probs, axis=2).astype(np.uint8)
    return Prediction(sample.id, probs[:, :, 1].astype(np.float64), pred)


@dataclass
class DatasetEvaluation:
    pooled: MetricsReport
    per_image: list
    macro: dict
    predictions: list = field(default_factory=list)
    failures: list = field(default_factory=list)


def evaluate_predictions(items, dataset="", model_name="") -> DatasetEvaluation:
    """Pool ``(sample, Prediction)`` pairs; counts and AUC are micro-averaged."""
    items = sorted(items, key=lambda it: it[0].id)
    if not items:
        raise DataError("empty test set")
    total = ConfusionCounts()
    per_image = []
    scores, labels = [], []
    for sample, pr in items:
        mask = sample.counted()
        c = confusion(pr.pred, sample.label, mask)
        total = total + c
        rep = metrics_from_counts(c, dataset=f"{dataset}/{sample.id}" if dataset else sample.id, model=model_name)
        rep.auc = roc_auc(pr.prob, sample.label, mask)
        if rep.auc is None:
            rep.undefined["auc"] = "single-class ground truth"
        per_image.append(rep)
        scores.append(pr.prob[mask])
        labels.append(sample.label[mask])
    pooled = metrics_from_counts(total, dataset=dataset, model=model_name)
    pooled.auc = roc_auc(np.concatenate(scores), np.concatenate(labels))
    if pooled.auc is None:
        pooled.undefined["auc"] = "single-class ground truth"
    macro = {}
    for k in METRIC_NAMES:
        vals = [getattr(r, k) for r in per_image if getattr(r, k) is not None]
        macro[k] = float(np.mean(vals)) if vals else None
    return DatasetEvaluation(pooled, per_image, macro, [pr for _, pr in items])


def evaluate_dataset(model, test_set, dataset="", model_name="", keep_predictions=False) -> DatasetEvaluation:
    """Evaluate ``model`` on every sample; failures are annotated with the sample id and skipped."""
    items = []
    failures = []
    for i in range(len(test_set)):
        sid = str(i)
        try:
            sample = test_set[i]
            sid = sample.id
            items.append((sample, predict_sample(model, sample)))
        except (MkisError, FileNotFoundError) as exc:
            failures.append((sid, f"{type(exc).__name__}: {exc}"))
    if not items:
        raise DataError("no test sample could be evaluated: " + "; ".join(f"{s}: {m}" for s, m in failures))
    result = evaluate_predictions(items, dataset, model_name)
    result.failures = failures
    if not keep_predictions:
        result.predictions = []
    return result


def pixel_accuracy(model, sample: Sample) -> float:
    pr = predict_sample(model, sample)
    m = sample.counted()
    return float(np.mean(pr.pred[m] == sample.label[m]))


# report output ----------------------------------------------------------------

CSV_COLUMNS = ("dataset", "model", "se", "sp", "acc", "auc", "f1", "jaccard", "params")


def write_csv(path, reports, params=None):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.as_row(params))


def format_table(reports, params=None, label="model") -> str:
    """Aligned plain-text table: Method, Se, Sp, Acc, AUC, F1, Jacc, Params (M)."""
    head = ["Method" if label == "model" else "Image", "Se", "Sp", "Acc", "AUC", "F1", "Jacc", "Params (M)"]
    rows = []
    for r in reports:
        vals = [getattr(r, k) for k in METRIC_NAMES]
        cells = ["-" if v is None else f"{v:.4f}" for v in vals]
        p = "-" if params is None else f"{params / 1e6:.3f}"
        rows.append([getattr(r, label) or "-", *cells, p])
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                                  for i, (c, w) in enumerate(zip(cells, widths)))
    lines = [fmt(head), "  ".join("-" * w for w in widths)]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines)
