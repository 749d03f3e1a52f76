"""Evaluation metrics and report assembly.

Mean absolute error, mean absolute percentage error (as a fraction), and the
error-width quantile: the smallest width w such that at least a fraction p of
absolute errors fall within w, i.e. the ceil(p*N)-th order statistic, counting
an error exactly at the boundary as covered.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import SHOT_NAMES


def mae(y: np.ndarray, yhat: np.ndarray) -> float:
    y, yhat = _aligned(y, yhat)
    return float(np.abs(y - yhat).mean())


def mape(y: np.ndarray, yhat: np.ndarray) -> float:
    """Mean |error| / |truth|, returned as a fraction (0.15 means 15%)."""
    y, yhat = _aligned(y, yhat)
    if np.any(y == 0):
        raise ValueError("mape: zero ground-truth value")
    return float(np.abs((y - yhat) / y).mean())


def error_width(y: np.ndarray, yhat: np.ndarray, p: float = 0.9) -> float:
    """Smallest w covering at least fraction p of absolute errors.

    Equals the ceil(p*N)-th smallest |error|; an error equal to w counts as
    covered.
    """
    y, yhat = _aligned(y, yhat)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"error_width: p must be in (0, 1], got {p}")
    err = np.sort(np.abs(y - yhat))
    rank = math.ceil(p * err.size)
    return float(err[rank - 1])


def _aligned(y, yhat):
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape or y.size == 0:
        raise ValueError(f"metrics: got {y.size} labels vs {yhat.size} predictions")
    return y, yhat


@dataclass
class EvalReport:
    n: int
    mae: float
    mape: float
    ew: float
    ew_p: float = 0.9
    per_shot: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mae": self.mae,
            "mape": self.mape,
            "ew": self.ew,
            "ew_p": self.ew_p,
            "per_shot": self.per_shot,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(y, yhat, shot=None, ew_p: float = 0.9) -> EvalReport:
    """Full metric set, optionally broken down by shot class (0/1/2)."""
    y, yhat = _aligned(y, yhat)
    report = EvalReport(
        n=int(y.size),
        mae=mae(y, yhat),
        mape=mape(y, yhat),
        ew=error_width(y, yhat, p=ew_p),
        ew_p=ew_p,
    )
    if shot is not None:
        shot = np.asarray(shot).ravel()
        if shot.shape != y.shape:
            raise ValueError("metrics: shot labels misaligned with predictions")
        for cls, name in enumerate(SHOT_NAMES):
            mask = shot == cls
            if mask.any():
                report.per_shot[name] = {
                    "n": int(mask.sum()),
                    "mae": mae(y[mask], yhat[mask]),
                }
    return report


def report_table(report: EvalReport) -> str:
    """Fixed-width text rendering of a report."""
    rows = [
        ("samples", f"{report.n}"),
        ("mae_hours", f"{report.mae:.4f}"),
        ("mape_pct", f"{100.0 * report.mape:.2f}"),
        (f"ew{int(round(100 * report.ew_p))}_hours", f"{report.ew:.4f}"),
    ]
    for name in SHOT_NAMES:
        if name in report.per_shot:
            s = report.per_shot[name]
            rows.append((f"mae_{name}_shot", f"{s['mae']:.4f} (n={s['n']})"))
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"
