"""Reconstruction / segmentation metrics and the metric row written to CSV."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import ShapeError
from .codebook import perplexity, usage_histogram

__all__ = ["mse", "pixel_error", "miou", "perplexity", "usage_histogram", "MetricRow",
           "METRIC_COLUMNS"]


def _pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(x, xhat) -> float:
    x, xhat = _pair(x, xhat)
    return float(np.mean((x.astype(np.float64) - xhat) ** 2))


def pixel_error(labels, predictions) -> float:
    """Percentage of positions whose predicted class differs from the label."""
    labels, predictions = _pair(labels, predictions)
    return float(100.0 * np.mean(labels != predictions))


def miou(labels, predictions, L: int) -> float:
    """Mean IoU over classes present in either map; absent classes are skipped."""
    labels, predictions = _pair(labels, predictions)
    labels = labels.reshape(-1).astype(np.int64)
    predictions = predictions.reshape(-1).astype(np.int64)
    inter = np.bincount(labels[labels == predictions], minlength=L)[:L]
    union = np.bincount(labels, minlength=L)[:L] + np.bincount(predictions, minlength=L)[:L] - inter
    present = union > 0
    if not present.any():
        raise ShapeError("miou of empty maps")
    return float(np.mean(inter[present] / union[present]))


@dataclass
class MetricRow:
    """One line of metrics.csv.  Fields that do not apply to a model stay None
    and are written as empty cells."""

    run_id: str
    epoch: int
    step: int
    loss: float | None = None
    reconstruction: float | None = None
    regularization: float | None = None
    neg_entropy: float | None = None
    decoder_variance_term: float | None = None
    dictionary: float | None = None
    commitment: float | None = None
    val_loss: float | None = None
    sigma2: float | None = None
    sigma2_phi: float | None = None
    kappa: float | None = None
    kappa_phi: float | None = None
    perplexity: float | None = None
    mean_entropy: float | None = None
    test_mse: float | None = None
    pixel_error: float | None = None
    miou: float | None = None
    lr: float | None = None
    tau: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ArithmeticError(f"metric {f.name} is not finite ({v})")

    def cells(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v)))
        return out

    @classmethod
    def from_cells(cls, cells: dict[str, str]) -> "MetricRow":
        kw = {}
        for f in fields(cls):
            raw = cells.get(f.name, "")
            if f.name == "run_id":
                kw[f.name] = raw
            elif f.name in ("epoch", "step"):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = None if raw == "" else float(raw)
        return cls(**kw)


METRIC_COLUMNS = [f.name for f in fields(MetricRow)]
