"""Forecast evaluation: MSE, DTW, MAPE, median-of-K points, run averaging.

Normalized columns follow the reporting convention MSE/1e-4 and DTW/1e-3.
DTW is the classic unconstrained dynamic program with squared-difference
local cost and no path-length normalization; absolute values therefore
depend on those pinned choices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError
from .model import (ForecastResult, lower_median, sample_forecast,
                    sample_forecast_many)
from .numerics import Rng

MAPE_EPS = 1e-8
MSE_NORM = 1e-4
DTW_NORM = 1e-3


def mse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"mse: shapes {pred.shape} vs {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def mape(pred, truth, eps: float = MAPE_EPS) -> float:
    """Mean absolute percentage error; eps guards zero truth values."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"mape: shapes {pred.shape} vs {truth.shape}")
    return float(100.0 * np.mean(np.abs(pred - truth)
                                 / np.maximum(np.abs(truth), eps)))


def dtw(a, b) -> float:
    """Unconstrained DTW, squared local cost, steps {match, insert, delete}."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DataError("dtw: empty series")
    m, n = len(a), len(b)
    cost = (a[:, None] - b[None, :]) ** 2
    d = np.full((m + 1, n + 1), np.inf)
    d[0, 0] = 0.0
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            d[i, j] = cost[i - 1, j - 1] + min(d[i - 1, j], d[i, j - 1], d[i - 1, j - 1])
    return float(d[m, n])


@dataclass
class MetricReport:
    """Per-run and aggregate metrics with the normalized display columns."""

    n_windows: int
    n_runs: int
    per_run_mse: list = field(default_factory=list)
    per_run_dtw: list = field(default_factory=list)
    per_run_mape: list = field(default_factory=list)

    @property
    def mse_raw(self) -> float:
        return float(np.mean(self.per_run_mse))

    @property
    def dtw_raw(self) -> float:
        return float(np.mean(self.per_run_dtw))

    @property
    def mape_percent(self) -> float:
        return float(np.mean(self.per_run_mape))

    @property
    def mse_norm(self) -> float:
        return self.mse_raw / MSE_NORM

    @property
    def dtw_norm(self) -> float:
        return self.dtw_raw / DTW_NORM

    def to_text(self) -> str:
        lines = [
            f"windows: {self.n_windows}   runs: {self.n_runs}",
            f"MSE x1e-4: {self.mse_norm:.6f}",
            f"DTW x1e-3: {self.dtw_norm:.6f}",
            f"MAPE %:    {self.mape_percent:.6f}",
        ]
        return "\n".join(lines) + "\n"

    def to_rows(self) -> list[list[str]]:
        """Machine-readable table: one row per run plus a summary row."""
        rows = [["run", "mse_x1e-4", "dtw_x1e-3", "mape_percent"]]
        for i in range(self.n_runs):
            rows.append([str(i),
                         repr(self.per_run_mse[i] / MSE_NORM),
                         repr(self.per_run_dtw[i] / DTW_NORM),
                         repr(self.per_run_mape[i])])
        rows.append(["mean", repr(self.mse_norm), repr(self.dtw_norm),
                     repr(self.mape_percent)])
        return rows


def evaluate(model, windows, rng: Rng, n_samples: int = 20,
             n_runs: int = 10) -> MetricReport:
    """Median-of-``n_samples`` forecasts per window, averaged over seeded runs.

    Per-window child seeds are keyed by the window identity (not its list
    position), so shuffling the window order does not change the report.
    """
    if not windows:
        raise DataError("evaluate: empty window set")
    windows = sorted(windows, key=lambda w: w.key())
    report = MetricReport(n_windows=len(windows), n_runs=n_runs)
    for run in range(n_runs):
        run_rng = rng.child(f"run.{run}")
        rngs = [run_rng.child("win." + ".".join(str(k) for k in w.key()))
                for w in windows]
        forecasts = sample_forecast_many(model, [w.context for w in windows],
                                         n_samples, rngs)
        r_mse, r_dtw, r_mape = [], [], []
        for w, fc in zip(windows, forecasts):
            r_mse.append(mse(fc.point, w.horizon))
            r_dtw.append(dtw(fc.point, w.horizon))
            r_mape.append(mape(fc.point, w.horizon))
        report.per_run_mse.append(float(np.mean(r_mse)))
        report.per_run_dtw.append(float(np.mean(r_dtw)))
        report.per_run_mape.append(float(np.mean(r_mape)))
    return report


__all__ = ["mse", "mape", "dtw", "evaluate", "MetricReport",
           "ForecastResult", "lower_median", "MAPE_EPS", "MSE_NORM", "DTW_NORM"]
