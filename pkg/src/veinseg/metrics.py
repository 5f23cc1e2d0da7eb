"""Pixel confusion counts and the five derived segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, ShapeError
from .tensor import Tensor4


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricsRow:
    """acc/sen/spe/dsc/iou; None marks a metric whose denominator was zero."""
    acc: float | None
    sen: float | None
    spe: float | None
    dsc: float | None
    iou: float | None

    def as_dict(self) -> dict:
        return {"acc": self.acc, "sen": self.sen, "spe": self.spe,
                "dsc": self.dsc, "iou": self.iou}


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor4) else np.asarray(x)


def confusion_counts(pred, truth, threshold: float = 0.5) -> ConfusionCounts:
    """Classify each pixel positive when pred >= threshold, tally against
    the binary truth mask."""
    p = _as_array(pred)
    t = _as_array(truth)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
    pos = p >= threshold
    true = t >= 0.5
    tp = int(np.count_nonzero(pos & true))
    fp = int(np.count_nonzero(pos & ~true))
    fn = int(np.count_nonzero(~pos & true))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def metrics_from_counts(c: ConfusionCounts) -> MetricsRow:
    """ACC, SEN, SPE, DSC, IOU from one confusion tally.

    DSC is the harmonic mean of SEN and SPE (the published convention this
    implementation reproduces), not the classical dice overlap of masks.
    Metrics with a zero denominator are None, never silently 0.
    """
    n = c.total
    if n == 0:
        raise EmptyInputError("confusion counts cover zero pixels")
    acc = (c.tp + c.tn) / n
    sen = _ratio(c.tp, c.tp + c.fn)
    spe = _ratio(c.tn, c.tn + c.fp)
    if sen is None or spe is None or sen + spe == 0:
        dsc = None
    else:
        dsc = 2.0 * sen * spe / (sen + spe)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn)
    return MetricsRow(acc=acc, sen=sen, spe=spe, dsc=dsc, iou=iou)


def mean_metrics(rows: list[MetricsRow]) -> MetricsRow:
    """Per-metric mean over the rows where that metric is defined;
    a metric undefined everywhere stays undefined."""
    if not rows:
        raise EmptyInputError("no metric rows to average")
    out = {}
    for key in ("acc", "sen", "spe", "dsc", "iou"):
        vals = [getattr(r, key) for r in rows if getattr(r, key) is not None]
        out[key] = sum(vals) / len(vals) if vals else None
    return MetricsRow(**out)
