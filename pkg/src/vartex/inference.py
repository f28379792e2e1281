"""Forecast production and verification.

Split prediction feeds each canonical crop through the model with absolute
positional indexing and stitches the outputs; S=1 is bitwise the global path.
Evaluation destandardizes to physical units and builds the climatology from
the test-set truths.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ShapeMismatch
from .griddata import GridSeries, Region, TARGET_LABELS, UNITS, canonical_crops
from .metrics import MetricReport, climatology, lat_acc, lat_rmse, latitude_weights
from .model import VartexModel


def predict_global(model: VartexModel, sample: np.ndarray, stats=None) -> np.ndarray:
    """Deterministic full-grid forecast for one [V, H, W] sample."""
    sample = np.asarray(sample)
    if sample.ndim != 3:
        raise ShapeMismatch(f"predict_global expects [V, H, W], got {sample.shape}")
    out = model.forward(sample, region=None, mode="eval").value
    if stats is not None:
        out = stats.destandardize(out)
    return out


def predict_split(model: VartexModel, sample: np.ndarray, split_factor: int,
                  stats=None) -> np.ndarray:
    """Predict each canonical crop independently and stitch the full grid."""
    sample = np.asarray(sample)
    if sample.ndim != 3:
        raise ShapeMismatch(f"predict_split expects [V, H, W], got {sample.shape}")
    H, W = model.config.image_size
    if split_factor == 1:
        return predict_global(model, sample, stats=stats)
    crops = canonical_crops(H, W, split_factor, model.config.patch_size)
    V_out = model.config.resolved_output_variables
    out = np.empty((V_out, H, W), dtype=np.float32)
    written = np.zeros((H, W), dtype=np.int64)
    for region in crops:
        pred = model.forward(region.extract(sample), region=region, mode="eval").value
        out[:, region.rows, region.cols] = pred
        written[region.rows, region.cols] += 1
    if not (written == 1).all():
        raise ShapeMismatch("stitched crops do not tile the grid exactly once")
    if stats is not None:
        out = stats.destandardize(out)
    return out


def _predict_series(model: VartexModel, series: GridSeries, t_indices: np.ndarray,
                    split_factor: int, batch: int) -> np.ndarray:
    """Standardized predictions [K, V_out, H, W] for the given input times."""
    H, W = model.config.image_size
    V_out = model.config.resolved_output_variables
    K_n = len(t_indices)
    out = np.empty((K_n, V_out, H, W), dtype=np.float32)
    crops = (canonical_crops(H, W, split_factor, model.config.patch_size)
             if split_factor > 1 else [Region.full(H, W)])
    for lo in range(0, K_n, batch):
        ts = t_indices[lo:lo + batch]
        x = series.data[ts]
        for region in crops:
            pred = model.forward(region.extract(x), region=region, mode="eval").value
            out[lo:lo + len(ts), :, region.rows, region.cols] = pred
    return out


def resolve_targets(series: GridSeries, targets=None) -> list:
    """Default to the standard four when the registry carries them."""
    names = series.registry.names()
    if targets is None:
        if all(t in names for t in TARGET_LABELS):
            return list(TARGET_LABELS)
        return names
    for t in targets:
        if t not in names:
            raise KeyError(f"target {t!r} not in registry (have {names})")
    return list(targets)


def evaluate(model: VartexModel, series: GridSeries, targets=None,
             split_factor: int = 1, lead_hours: int = 6, batch: int = 8) -> MetricReport:
    """Per-target lat-RMSE and lat-ACC in physical units over a test series."""
    targets = resolve_targets(series, targets)
    lead = series.lead_steps(lead_hours)
    t_indices = np.arange(len(series) - lead)
    preds_std = _predict_series(model, series, t_indices, split_factor, batch)
    truths_std = series.data[t_indices + lead]

    idx = [series.registry.index_of_label(t) for t in targets]
    if model.config.resolved_output_variables != series.data.shape[1]:
        raise ShapeMismatch(
            f"model predicts {model.config.resolved_output_variables} variables, "
            f"series holds {series.data.shape[1]}")
    preds = preds_std[:, idx].astype(np.float64)
    truths = truths_std[:, idx].astype(np.float64)
    if series.stats is not None:
        mean = series.stats.mean[idx].reshape(1, -1, 1, 1)
        std = series.stats.std[idx].reshape(1, -1, 1, 1)
        preds = preds * std + mean
        truths = truths * std + mean

    weights = latitude_weights(series.latitudes)
    clim = climatology(truths)
    rmse = lat_rmse(preds, truths, weights)
    acc = lat_acc(preds, truths, clim, weights)
    units = {t: UNITS.get(t, "standardized" if series.stats is None else "")
             for t in targets}
    return MetricReport(targets=targets,
                        acc={t: float(a) for t, a in zip(targets, acc)},
                        rmse={t: float(r) for t, r in zip(targets, rmse)},
                        units=units)


def export_maps(model: VartexModel, series: GridSeries, time_index: int, out_dir,
                targets=None, split_factor: int = 1, lead_hours: int = 6) -> list:
    """Write initial/truth/prediction/bias grids per target as CSV panels."""
    targets = resolve_targets(series, targets)
    lead = series.lead_steps(lead_hours)
    limit = len(series) - lead
    if not (0 <= time_index < limit):
        raise ValueError(f"time index {time_index} out of range [0, {limit})")
    os.makedirs(out_dir, exist_ok=True)

    initial_std = series.data[time_index]
    truth_std = series.data[time_index + lead]
    pred_std = predict_split(model, initial_std, split_factor)
    if series.stats is not None:
        initial = series.stats.destandardize(initial_std.astype(np.float64))
        truth = series.stats.destandardize(truth_std.astype(np.float64))
        pred = series.stats.destandardize(pred_std.astype(np.float64))
    else:
        initial, truth, pred = initial_std, truth_std, pred_std

    paths = []
    for label in targets:
        v = series.registry.index_of_label(label)
        unit = UNITS.get(label, "standardized" if series.stats is None else "")
        panels = {
            "initial": initial[v],
            "truth": truth[v],
            "prediction": pred[v],
            "bias": pred[v] - truth[v],
        }
        for panel, field in panels.items():
            path = os.path.join(out_dir, f"{label}.{panel}.csv")
            np.savetxt(path, field, delimiter=",",
                       header=f"{label} {panel} [{unit}] rows=lat cols=lon")
            paths.append(path)
    return paths
