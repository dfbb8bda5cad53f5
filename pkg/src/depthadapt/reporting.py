"""Relative-change reports between metric rows, and small text tables.

Changes are (candidate - baseline) / baseline as a percentage, rounded
half-even to one decimal: improvements on error metrics print negative,
accuracy (delta) gains print positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal

from .errors import ReportError
from .metrics import DepthMetrics

ERROR_METRICS = ("abs_rel", "sq_rel", "rmse", "rmse_log")
METRIC_LABELS = {
    "abs_rel": "Abs Rel", "sq_rel": "Sq Rel", "rmse": "RMSE",
    "rmse_log": "RMSE log", "delta": "delta",
}


def round_half_even(value: float, decimals: int = 1) -> float:
    quantum = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(value)).quantize(quantum, ROUND_HALF_EVEN))


@dataclass(frozen=True)
class ChangeReport:
    baseline: DepthMetrics
    candidate: DepthMetrics
    percent: dict  # metric name -> signed percent change, one decimal

    def as_dict(self) -> dict:
        return {
            "baseline": self.baseline.rounded(),
            "candidate": self.candidate.rounded(),
            "percent_change": dict(self.percent),
        }


def relative_change_report(baseline: DepthMetrics, candidate: DepthMetrics) -> ChangeReport:
    """Signed percent change per metric; every baseline field must be nonzero."""
    percent = {}
    for name in DepthMetrics.FIELDS:
        base = getattr(baseline, name)
        cand = getattr(candidate, name)
        if base == 0:
            raise ReportError(f"baseline {name} is zero; relative change is undefined")
        percent[name] = round_half_even((cand - base) / base * 100.0)
    return ChangeReport(baseline, candidate, percent)


def render_change_table(report: ChangeReport) -> str:
    lines = [f"{'metric':<10} {'baseline':>10} {'candidate':>10} {'change':>9}"]
    for name in DepthMetrics.FIELDS:
        lines.append(f"{METRIC_LABELS[name]:<10} "
                     f"{getattr(report.baseline, name):>10.3f} "
                     f"{getattr(report.candidate, name):>10.3f} "
                     f"{report.percent[name]:>+8.1f}%")
    return "\n".join(lines)


def render_metrics_table(rows: list) -> str:
    """Rows of (label, DepthMetrics, extra) where extra is a short string."""
    header = f"{'configuration':<24} " + " ".join(f"{METRIC_LABELS[n]:>9}"
                                                  for n in DepthMetrics.FIELDS)
    if any(extra for _, _, extra in rows):
        header += f" {'params':>10}"
    lines = [header]
    for label, metrics, extra in rows:
        line = f"{label:<24} " + " ".join(f"{getattr(metrics, n):>9.3f}"
                                          for n in DepthMetrics.FIELDS)
        if extra:
            line += f" {extra:>10}"
        lines.append(line)
    return "\n".join(lines)
