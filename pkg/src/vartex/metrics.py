"""Latitude-weighted verification: MSE (training loss), RMSE, and ACC.

Weights are cos(latitude) normalized to mean 1 over grid rows. The MSE is
differentiable (used as the loss, standardized space); RMSE and ACC are
evaluation-only and expect physical units. ACC pools its sums over samples
and grid before the single division.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import EmptyLatitudes, EmptySeries, ShapeMismatch, ZeroAnomalyVariance


def latitude_weights(latitudes) -> np.ndarray:
    lats = np.asarray(latitudes, dtype=np.float64)
    if lats.size == 0:
        raise EmptyLatitudes("need at least one latitude")
    if np.abs(lats).max() > 90.0:
        raise ValueError("latitudes must lie within [-90, 90] degrees")
    c = np.cos(np.deg2rad(lats))
    return c / c.mean()


def _check_fields(pred_shape, truth_shape, weights):
    if pred_shape != truth_shape:
        raise ShapeMismatch(f"pred {pred_shape} != truth {truth_shape}")
    if len(pred_shape) < 2:
        raise ShapeMismatch(f"fields need trailing [H, W] axes, got {pred_shape}")
    H = pred_shape[-2]
    if np.asarray(weights).shape != (H,):
        raise ShapeMismatch(f"weights must be [{H}], got {np.asarray(weights).shape}")


def lat_mse(pred, truth, weights):
    """Mean over leading axes of (1/(H*W)) * sum_hw L(h) * (pred-truth)^2.

    Accepts a Tensor prediction (differentiable path) or plain arrays.
    """
    if isinstance(pred, nx.Tensor):
        truth_v = truth.value if isinstance(truth, nx.Tensor) else np.asarray(truth)
        _check_fields(pred.value.shape, truth_v.shape, weights)
        w = np.asarray(weights, dtype=pred.value.dtype).reshape(-1, 1)
        if not isinstance(truth, nx.Tensor):
            truth = nx.constant(truth_v.astype(pred.value.dtype))
        return nx.mean(nx.mul(nx.square(nx.sub(pred, truth)), nx.constant(w)))
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _check_fields(pred.shape, truth.shape, weights)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    return float(np.mean(w * (pred - truth) ** 2))


def lat_rmse(preds, truths, weights) -> np.ndarray:
    """Per-variable mean over samples of the root of the weighted spatial MSE.

    The root is taken per sample, inside the average over K.
    """
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.ndim != 4:
        raise ShapeMismatch(f"expected [K, V, H, W], got {preds.shape}")
    _check_fields(preds.shape, truths.shape, weights)
    w = np.asarray(weights, dtype=np.float64).reshape(1, 1, -1, 1)
    per_sample = np.sqrt((w * (preds - truths) ** 2).mean(axis=(2, 3)))   # [K, V]
    return per_sample.mean(axis=0)


def climatology(reference) -> np.ndarray:
    """Pointwise time mean per variable, [V, H, W] float64."""
    from .griddata import GridSeries
    data = reference.data if isinstance(reference, GridSeries) else np.asarray(reference)
    if data.ndim != 4:
        raise ShapeMismatch(f"expected [K, V, H, W], got {data.shape}")
    if data.shape[0] < 1:
        raise EmptySeries("climatology needs at least one sample")
    return data.astype(np.float64).mean(axis=0)


def lat_acc(preds, truths, clim, weights) -> np.ndarray:
    """Per-variable weighted cosine similarity of anomalies, pooled over k, h, w."""
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    clim = np.asarray(clim, dtype=np.float64)
    if preds.ndim != 4:
        raise ShapeMismatch(f"expected [K, V, H, W], got {preds.shape}")
    _check_fields(preds.shape, truths.shape, weights)
    if clim.shape != preds.shape[1:]:
        raise ShapeMismatch(f"climatology {clim.shape} != per-sample {preds.shape[1:]}")
    w = np.asarray(weights, dtype=np.float64).reshape(1, 1, -1, 1)
    pa = preds - clim[None]
    ta = truths - clim[None]
    num = (w * pa * ta).sum(axis=(0, 2, 3))
    pvar = (w * pa * pa).sum(axis=(0, 2, 3))
    tvar = (w * ta * ta).sum(axis=(0, 2, 3))
    out = np.empty(preds.shape[1], dtype=np.float64)
    for v in range(preds.shape[1]):
        if pvar[v] == 0.0 or tvar[v] == 0.0:
            side = "prediction" if pvar[v] == 0.0 else "truth"
            raise ZeroAnomalyVariance(f"variable {v}: {side} anomaly variance is zero")
        out[v] = num[v] / np.sqrt(pvar[v] * tvar[v])
    return out


@dataclass
class MetricReport:
    """Per-target ACC/RMSE rows in a fixed order, with units."""

    targets: list
    acc: dict
    rmse: dict
    units: dict

    def to_json(self) -> dict:
        return {
            "targets": list(self.targets),
            "rows": [{"variable": t, "unit": self.units.get(t, ""),
                      "acc": self.acc[t], "rmse": self.rmse[t]}
                     for t in self.targets],
        }

    def to_csv(self) -> str:
        lines = ["variable,unit,acc,rmse"]
        for t in self.targets:
            lines.append(f"{t},{self.units.get(t, '')},{self.acc[t]:.6f},{self.rmse[t]:.6f}")
        return "\n".join(lines) + "\n"
