"""Accuracy and latency metrics for voltage surrogates."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInputError
from .nn import MlpModel, forward

RESULT_COLUMNS = (
    "model", "hidden_layers", "neurons", "max_error_mv", "mae_mv", "rmse_mv", "r2_pct", "param_count",
)
TIMING_COLUMNS = ("model", "param_count", "mean_inference_us", "std_inference_us", "repetitions")


@dataclass
class EvalReport:
    model_tag: str = ""
    hidden_layers: int = 0
    neurons: int = 0
    max_error_mv: float = 0.0
    mae_mv: float = 0.0
    rmse_mv: float = 0.0
    r2_pct: float = 0.0
    param_count: int = 0
    mean_inference_us: float | None = None

    def csv_row(self, timing: bool = True) -> list[str]:
        """Table-1 ordered fields, then parameter count and (optionally) latency."""
        row = [
            self.model_tag,
            str(self.hidden_layers),
            str(self.neurons),
            f"{self.max_error_mv:.6f}",
            f"{self.mae_mv:.6f}",
            f"{self.rmse_mv:.6f}",
            f"{self.r2_pct:.6f}",
            str(self.param_count),
        ]
        if timing:
            row.append("" if self.mean_inference_us is None else f"{self.mean_inference_us:.4f}")
        return row


def evaluate(pred, actual) -> EvalReport:
    """Max/mean/RMS absolute error in mV and R^2 in percent.

    R^2 uses the mean of ``actual`` for the total sum of squares.
    """
    p = np.asarray(pred, dtype=float).ravel()
    y = np.asarray(actual, dtype=float).ravel()
    if p.size == 0 or p.size != y.size:
        raise InvalidInputError(f"evaluate needs equal non-zero lengths, got {p.size} and {y.size}")
    e = p - y
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0:
        raise InvalidInputError("actual voltage has zero variance; R^2 is undefined")
    sse = float(np.dot(e, e))
    abs_e = np.abs(e)
    return EvalReport(
        max_error_mv=float(abs_e.max()) * 1e3,
        mae_mv=float(abs_e.mean()) * 1e3,
        rmse_mv=math.sqrt(sse / e.size) * 1e3,
        r2_pct=(1.0 - sse / sst) * 100.0,
    )


@dataclass
class Timing:
    mean_us: float
    std_us: float
    repetitions: int
    n_rows: int


def time_inference(model: MlpModel | Callable[[np.ndarray], object], rows, repetitions: int = 1000) -> Timing:
    """Mean wall-clock latency per row of a batched forward pass.

    ``model`` is an :class:`MlpModel` or any callable taking the row batch.

    One untimed warmup call precedes the measured repetitions. Each repetition
    times a full pass over ``rows``; the per-row figure divides by their count.
    """
    if repetitions < 1:
        raise InvalidInputError(f"repetitions must be >= 1, got {repetitions}")
    predict = (lambda r: forward(model, r)) if isinstance(model, MlpModel) else model
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise InvalidInputError("rows must be a non-empty 2-D array")
    predict(rows)
    samples = np.empty(repetitions)
    for i in range(repetitions):
        t0 = time.perf_counter()
        predict(rows)
        samples[i] = time.perf_counter() - t0
    per_row = samples / rows.shape[0] * 1e6
    return Timing(float(per_row.mean()), float(per_row.std()), repetitions, rows.shape[0])
