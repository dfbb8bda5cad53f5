"""Five-metric depth evaluation protocol with median scaling.

Metrics are computed over the valid mask (ground truth inside
[min_depth, max_depth]), after optionally rescaling the prediction by
median(gt) / median(pred) and clamping it to the same depth range:

    abs_rel  = mean(|p - g| / g)
    sq_rel   = mean((p - g)^2 / g)
    rmse     = sqrt(mean((p - g)^2))
    rmse_log = sqrt(mean((ln p - ln g)^2))
    delta    = fraction of pixels with max(p/g, g/p) < threshold

All arithmetic runs in float64. Median scaling makes every metric
invariant to a global rescaling of the prediction (the scale cancels).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, EvalError


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta: float

    FIELDS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}

    def rounded(self, ndigits: int = 5) -> dict:
        return {name: round(getattr(self, name), ndigits) for name in self.FIELDS}

    @classmethod
    def from_dict(cls, values: dict) -> "DepthMetrics":
        try:
            return cls(**{name: float(values[name]) for name in cls.FIELDS})
        except KeyError as missing:
            raise EvalError(f"metrics dict is missing field {missing}") from None


@dataclass(frozen=True)
class EvalConfig:
    min_depth: float = 0.1
    max_depth: float = 150.0
    delta_threshold: float = 1.25
    scaling: str = "median"

    def __post_init__(self):
        if self.min_depth <= 0:
            raise ConfigError(f"eval.min_depth must be positive, got {self.min_depth}")
        if self.min_depth >= self.max_depth:
            raise ConfigError(f"eval.min_depth must be < eval.max_depth, "
                              f"got [{self.min_depth}, {self.max_depth}]")
        if self.delta_threshold <= 1.0:
            raise ConfigError(f"eval.delta_threshold must be > 1, got {self.delta_threshold}")
        if self.scaling not in ("median", "none"):
            raise ConfigError(f"eval.scaling must be 'median' or 'none', got {self.scaling!r}")


def median_scale(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """pred * s with s = median(gt[mask]) / median(pred[mask]).

    The median of an even count is the mean of the two central values
    (numpy convention).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise EvalError(f"median_scale: shapes differ, pred {pred.shape}, gt {gt.shape}, "
                        f"mask {mask.shape}")
    if not mask.any():
        raise EvalError("median_scale: the mask selects no pixels")
    pred_masked = pred[mask]
    if np.any(pred_masked <= 0):
        raise EvalError("median_scale: masked prediction values must be positive")
    med_pred = np.median(pred_masked)
    if med_pred == 0:
        raise EvalError("median_scale: median of the prediction is zero")
    return pred * (np.median(gt[mask]) / med_pred)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, cfg: EvalConfig) -> DepthMetrics:
    """The five-tuple over the valid mask, after scaling and clamping."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvalError(f"compute_metrics: prediction shape {pred.shape} differs "
                        f"from ground truth {gt.shape}")
    mask = (gt >= cfg.min_depth) & (gt <= cfg.max_depth)
    if not mask.any():
        raise EvalError(f"compute_metrics: no ground-truth pixel inside "
                        f"[{cfg.min_depth}, {cfg.max_depth}]")
    if cfg.scaling == "median":
        pred = median_scale(pred, gt, mask)
    pred = np.clip(pred, cfg.min_depth, cfg.max_depth)
    p = pred[mask]
    g = gt[mask]
    diff = p - g
    abs_rel = float(np.mean(np.abs(diff) / g))
    sq_rel = float(np.mean(diff ** 2 / g))
    rmse = float(np.sqrt(np.mean(diff ** 2)))
    rmse_log = float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2)))
    ratio = np.maximum(p / g, g / p)
    delta = float(np.mean((ratio < cfg.delta_threshold).astype(np.float64)))
    return DepthMetrics(abs_rel, sq_rel, rmse, rmse_log, delta)


def aggregate(per_frame: Sequence[DepthMetrics] | Iterable[DepthMetrics]) -> DepthMetrics:
    """Unweighted mean of each field across frames."""
    frames = list(per_frame)
    if not frames:
        raise EvalError("aggregate: empty metric sequence")
    return DepthMetrics(*(float(np.mean([getattr(f, name) for f in frames]))
                          for name in DepthMetrics.FIELDS))
