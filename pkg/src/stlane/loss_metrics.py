"""Weighted binary cross-entropy over the lane channel, the dataset-derived
class weight, and the pixel evaluation suite (accuracy / precision / recall /
F-measure from pooled confusion counts)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import UsageError
from .tensor import Tape, Tensor4

LOG_CLAMP = float(np.log(1e-7))  # floor for log-probabilities inside the loss
NORM_TOL = 1e-4


@dataclass(frozen=True)
class LossConfig:
    """w multiplies the lane-pixel term; the loss averages over all n*h*w pixels."""

    w: float = 1.0

    def __post_init__(self):
        if not self.w > 0:
            raise UsageError(f"class weight must be positive, got {self.w}")


def _check_normalized(logp: np.ndarray):
    total = np.exp(logp).sum(axis=1)
    err = np.abs(total - 1.0).max()
    if err > NORM_TOL:
        raise UsageError(
            f"loss input must be normalized log-probabilities "
            f"(channel exps sum off by {err:.2e})")


def weighted_bce_loss(logp: Tensor4, target: np.ndarray, cfg: LossConfig,
                      tape: Tape | None = None) -> Tensor4:
    """-(1/S) * sum[ w*y*log(h) + (1-y)*log(1-h) ] with h the lane-channel
    probability (channel 1), S = n*h*w. logp must be normalized per pixel;
    logs are clamped at log(1e-7) so saturated predictions stay finite.
    Differentiable through logp (one fused tape record)."""
    n, c, h, w = logp.dims
    if c != 2:
        raise UsageError(f"loss expects 2 channels, got {c}")
    y = np.asarray(target)
    if y.shape != (n, h, w):
        raise UsageError(f"target shape {y.shape} does not match logp {logp.dims}")
    if not np.isin(y, (0, 1)).all():
        raise UsageError("target mask must be binary")
    _check_normalized(logp.data)

    dtype = logp.data.dtype
    yf = y.astype(dtype)
    lp_lane = logp.data[:, 1]
    lp_bg = logp.data[:, 0]  # log(1 - h) for a normalized 2-channel map
    lane_ok = lp_lane > LOG_CLAMP
    bg_ok = lp_bg > LOG_CLAMP
    lane_term = np.where(lane_ok, lp_lane, LOG_CLAMP)
    bg_term = np.where(bg_ok, lp_bg, LOG_CLAMP)
    s = n * h * w
    total = (cfg.w * yf * lane_term + (1.0 - yf) * bg_term).sum()
    loss = Tensor4(np.full((1, 1, 1, 1), -total / s, dtype=dtype))

    if tape is not None and tape.wants_grad(logp):
        def bwd(g):
            scale = g.reshape(-1)[0] / s
            gl = np.zeros(logp.dims, dtype=dtype)
            gl[:, 1] = -scale * cfg.w * yf * lane_ok
            gl[:, 0] = -scale * (1.0 - yf) * bg_ok
            logp.accum_grad(gl)

        tape.record(loss, bwd)
    elif tape is not None:
        tape.record(loss, lambda g: None)
    return loss


def class_weight(masks) -> float:
    """Pooled (non-lane pixels) / (lane pixels) over all training masks, so
    that errors on the rare lane class are upweighted."""
    lane = 0
    total = 0
    for m in masks:
        arr = np.asarray(m)
        lane += int((arr != 0).sum())
        total += arr.size
    if lane == 0:
        raise UsageError("class_weight needs at least one lane pixel")
    return (total - lane) / lane


def predict_mask(logp) -> np.ndarray:
    """Per-pixel argmax over the two channels; exact ties go to background."""
    data = logp.data if isinstance(logp, Tensor4) else np.asarray(logp)
    return data[:, 1] > data[:, 0]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise UsageError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def confusion(pred, gt) -> ConfusionCounts:
    """Pixelwise counts with lane as the positive class."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise UsageError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    tn = int((~p & ~g).sum())
    return ConfusionCounts(tp, fp, fn, tn)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f_measure: float
    beta: float = 1.0
    counts: ConfusionCounts | None = field(default=None, compare=False)

    def to_kv_text(self, prefix: str = "") -> str:
        lines = []
        if prefix:
            lines.append(f"set = {prefix}")
        lines += [
            f"accuracy = {self.accuracy:.6f}",
            f"precision = {self.precision:.6f}",
            f"recall = {self.recall:.6f}",
            f"f_measure = {self.f_measure:.6f}",
            f"beta = {self.beta:g}",
        ]
        if self.counts is not None:
            c = self.counts
            lines.append(f"tp = {c.tp}")
            lines.append(f"fp = {c.fp}")
            lines.append(f"fn = {c.fn}")
            lines.append(f"tn = {c.tn}")
        return "\n".join(lines) + "\n"

    def to_row(self, name: str) -> str:
        """One machine-readable CSV line per evaluated set."""
        return (f"{name},{self.accuracy:.6f},{self.precision:.6f},"
                f"{self.recall:.6f},{self.f_measure:.6f}")


def metrics(counts: ConfusionCounts, beta: float = 1.0) -> MetricsReport:
    """Accuracy, precision, recall and the beta-weighted F-measure. Zero
    denominators yield 0 by convention (empty masks stay well-defined)."""
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    total = counts.total
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    denom = beta * beta * precision + recall
    f = (1 + beta * beta) * precision * recall / denom if denom else 0.0
    return MetricsReport(accuracy, precision, recall, f, beta, counts)
