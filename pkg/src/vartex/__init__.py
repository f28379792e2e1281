"""Desk-scale weather-forecasting transformer.

Multiple representative-variable streams, cross-attention variable
aggregation, regional split training, and latitude-weighted verification,
on a from-scratch numpy autodiff core with an optional compiled kernel
backend (see ``vartex._kernels.BACKEND``).
"""

from ._kernels import BACKEND as KERNEL_BACKEND
from .errors import VartexError
from .griddata import (
    GridSample,
    GridSeries,
    NormStats,
    Region,
    SynthConfig,
    VariableRegistry,
    canonical_crops,
    fit_standardizer,
    generate_synthetic,
    random_crop,
    read_grid,
    write_grid,
)
from .inference import evaluate, predict_global, predict_split
from .metrics import MetricReport, climatology, lat_acc, lat_mse, lat_rmse, latitude_weights
from .model import ModelConfig, VartexModel, count_parameters, load_model, save_model
from .presets import expand_preset, preset_names
from .training import (
    AdamW,
    CostLedger,
    TrainPlan,
    attention_cost,
    load_checkpoint,
    lr_at,
    regional_train_epoch,
    run_training,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "VartexError",
    "GridSample",
    "GridSeries",
    "NormStats",
    "Region",
    "SynthConfig",
    "VariableRegistry",
    "canonical_crops",
    "fit_standardizer",
    "generate_synthetic",
    "random_crop",
    "read_grid",
    "write_grid",
    "evaluate",
    "predict_global",
    "predict_split",
    "MetricReport",
    "climatology",
    "lat_acc",
    "lat_mse",
    "lat_rmse",
    "latitude_weights",
    "ModelConfig",
    "VartexModel",
    "count_parameters",
    "load_model",
    "save_model",
    "expand_preset",
    "preset_names",
    "AdamW",
    "CostLedger",
    "TrainPlan",
    "attention_cost",
    "load_checkpoint",
    "lr_at",
    "regional_train_epoch",
    "run_training",
    "save_checkpoint",
    "__version__",
]
