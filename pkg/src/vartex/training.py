"""Optimization: AdamW, warmup+cosine schedule, regional split training.

Global training is the S=1 case of the same code path. All randomness
(shuffling, crop draws, dropout) is derived functionally from
(seed, epoch, step), so a resumed run replays the unbroken one bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, replace
from typing import Optional

import numpy as np

from . import _kernels as K
from . import numerics as nx
from .errors import (
    ConfigMismatch,
    HeaderCorrupt,
    NonFiniteGradient,
    NonFiniteLoss,
    ShapeMismatch,
)
from .griddata import GridSeries, Region, canonical_crops, random_crop
from .metrics import lat_mse, latitude_weights
from .model import ModelConfig, VartexModel, config_diff, read_container, write_container

CHECKPOINT_HYPERS = {"betas": (0.9, 0.999), "eps": 1e-8}


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 50
    warmup_epochs: int = 5
    batch_size: int = 128
    accumulation_steps: int = 4
    split_factor: int = 1
    crop_mode: str = "canonical"
    lead_hours: int = 6
    seed: int = 0
    lr_peak: float = 5e-7
    weight_decay: float = 1e-5
    train_fraction: float = 0.75

    def validate(self) -> "TrainPlan":
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ValueError(
                f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if self.batch_size % self.accumulation_steps:
            raise ValueError(
                f"batch_size {self.batch_size} not divisible by "
                f"accumulation_steps {self.accumulation_steps}")
        if self.split_factor < 1:
            raise ValueError("split_factor must be >= 1")
        if self.crop_mode not in ("canonical", "random"):
            raise ValueError(f"crop_mode must be canonical|random, got {self.crop_mode!r}")
        if self.lead_hours < 1:
            raise ValueError("lead_hours must be >= 1")
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (0.0 < self.train_fraction <= 1.0):
            raise ValueError("train_fraction must be in (0, 1]")
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainPlan":
        return cls(**obj)


def plan_diff(a: TrainPlan, b: TrainPlan) -> list:
    da, db = a.to_json(), b.to_json()
    return sorted(k for k in da if da[k] != db[k])


# -- learning-rate schedule --------------------------------------------------------


def warmup_cosine(step: int, warmup_steps: int, total_steps: int, peak: float) -> float:
    """Linear 0 -> peak over warmup, then cosine peak -> 0 over the rest."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= total_steps:
        return 0.0
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at(step: int, plan: TrainPlan, steps_per_epoch: int) -> float:
    return warmup_cosine(step, plan.warmup_epochs * steps_per_epoch,
                         plan.epochs * steps_per_epoch, plan.lr_peak)


# -- optimizer ----------------------------------------------------------------------


class AdamW:
    """Decoupled weight decay; moments in the parameter dtype."""

    def __init__(self, params: nx.ParameterStore, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = params
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {name: np.zeros_like(t.value) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.value) for name, t in params.items()}

    def step(self, lr: float):
        self.step_count += 1
        b1, b2 = self.betas
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                g = np.zeros_like(t.value)
            if g.shape != t.value.shape:
                raise ShapeMismatch(f"gradient of {name!r}: {g.shape} != {t.value.shape}")
            if not np.isfinite(g).all():
                raise NonFiniteGradient(f"gradient of {name!r} is NaN/Inf at step "
                                        f"{self.step_count}")
            K.adamw_update(t.value.reshape(-1), np.ascontiguousarray(g.reshape(-1)),
                           self.m[name].reshape(-1), self.v[name].reshape(-1),
                           float(lr), b1, b2, self.eps, self.weight_decay,
                           self.step_count)

    def state_arrays(self) -> dict:
        out = {}
        for name in self.params.names():
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int):
        for name in self.params.names():
            for kind, dest in (("m", self.m), ("v", self.v)):
                key = f"opt.{kind}.{name}"
                if key not in arrays:
                    raise ConfigMismatch(f"checkpoint is missing optimizer state {key!r}")
                arr = np.asarray(arrays[key], dtype=dest[name].dtype)
                if arr.shape != dest[name].shape:
                    raise ShapeMismatch(f"{key}: shape {arr.shape} != {dest[name].shape}")
                dest[name] = arr.copy()
        self.step_count = int(step_count)


# -- cost accounting ----------------------------------------------------------------


@dataclass
class CostLedger:
    """Exact integer counts of what the encoder touched."""

    tokens_per_crop: int = 0
    entries_per_layer_per_crop: int = 0
    forwards: int = 0
    examples: int = 0
    tokens_total: int = 0
    spatial_entries_total: int = 0
    mixing_entries_total: int = 0
    cells_total: int = 0
    param_count: int = 0

    def record_forward(self, config: ModelConfig, n_tokens: int, batch: int,
                       cells_per_example: int):
        R = config.num_representatives
        layers = config.num_blocks * R
        mix_blocks = (config.num_blocks // config.mixing_interval
                      if config.mixing_interval >= 1 else 0)
        self.tokens_per_crop = n_tokens
        self.entries_per_layer_per_crop = n_tokens * n_tokens
        self.forwards += 1
        self.examples += batch
        self.tokens_total += batch * n_tokens * R
        self.spatial_entries_total += batch * layers * n_tokens * n_tokens
        self.mixing_entries_total += batch * mix_blocks * n_tokens * R * R
        self.cells_total += batch * cells_per_example

    def to_json(self) -> dict:
        return asdict(self)


def attention_cost(config: ModelConfig, split_factor: int) -> dict:
    """Per-pass attention-entry arithmetic for a full grid under an S-way split.

    Spatial entries scale as 1/S^2 in total; mixing entries are S-independent
    and reported separately.
    """
    cfg = config.validate()
    H, W = cfg.image_size
    if H % split_factor or W % split_factor:
        from .errors import IndivisibleGrid
        raise IndivisibleGrid(f"S={split_factor} does not divide grid {H}x{W}")
    N = cfg.num_tokens
    crops = split_factor * split_factor
    n = N // crops
    R = cfg.num_representatives
    layers = cfg.num_blocks * R
    mix_blocks = cfg.num_blocks // cfg.mixing_interval if cfg.mixing_interval >= 1 else 0
    return {
        "split_factor": split_factor,
        "crops": crops,
        "tokens_per_crop": n,
        "entries_per_layer_per_crop": n * n,
        "spatial_layers": layers,
        "spatial_entries_total": layers * crops * n * n,
        "mixing_entries_total": mix_blocks * crops * n * R * R,
    }


# -- functional RNG -----------------------------------------------------------------

_PURPOSE_SHUFFLE = 0
_PURPOSE_DROPOUT = 1
_PURPOSE_CROPS = 2


def _derived_rng(seed: int, *key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


# -- the epoch loop -----------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    steps: int
    mean_loss: float
    last_loss: float
    last_lr: float
    ledger: CostLedger


def _epoch_examples(series: GridSeries, plan: TrainPlan, model_config: ModelConfig,
                    epoch: int) -> list:
    """(time index, Region) pairs in deterministic pre-shuffle order."""
    H, W = model_config.image_size
    lead = series.lead_steps(plan.lead_hours)
    times = range(len(series) - lead)
    if plan.crop_mode == "canonical":
        regions = canonical_crops(H, W, plan.split_factor, model_config.patch_size)
        return [(t, r) for t in times for r in regions]
    crop_rng = _derived_rng(plan.seed, epoch, _PURPOSE_CROPS)
    return [(t, random_crop(H, W, plan.split_factor, crop_rng, model_config.patch_size))
            for t in times]


def steps_per_epoch(series: GridSeries, plan: TrainPlan, model_config: ModelConfig) -> int:
    n = len(_epoch_examples(series, plan, model_config, epoch=0))
    spe = n // plan.batch_size
    if spe < 1:
        raise ValueError(
            f"epoch provides {n} examples, fewer than batch_size {plan.batch_size}")
    return spe


def _group(chunk) -> dict:
    by_region = {}
    for t, region in chunk:
        by_region.setdefault(region, []).append(t)
    return by_region


def _micro_loss(model: VartexModel, series: GridSeries, chunk, lead: int,
                weights: np.ndarray, rng) -> nx.Tensor:
    """Mean lat-MSE over one micro-batch; examples grouped per region."""
    by_region = _group(chunk)
    total = None
    n_chunk = len(chunk)
    for region in sorted(by_region, key=lambda r: (r.row_off, r.col_off)):
        ts = np.asarray(by_region[region])
        x = region.extract(series.data[ts])
        y = region.extract(series.data[ts + lead])
        pred = model.forward(x, region=region, mode="train", rng=rng)
        w_crop = weights[region.rows]
        term = nx.scale(lat_mse(pred, y, w_crop), len(ts) / n_chunk)
        total = term if total is None else nx.add(total, term)
    return total


def regional_train_epoch(series: GridSeries, plan: TrainPlan, model: VartexModel,
                         opt: AdamW, epoch: int = 0, total_steps: Optional[int] = None,
                         start_step: int = 0, max_steps: Optional[int] = None,
                         ledger: Optional[CostLedger] = None, log_fn=None) -> EpochStats:
    """One pass over the series: each canonical crop (or one random crop per
    sample) is an independent example; loss is measured on the crop only."""
    plan = plan.validate()
    cfg = model.config
    H, W = cfg.image_size
    if series.data.shape[2:] != (H, W):
        raise ShapeMismatch(f"series grid {series.data.shape[2:]} != model grid {(H, W)}")
    lead = series.lead_steps(plan.lead_hours)
    weights = latitude_weights(series.latitudes).astype(series.data.dtype)

    examples = _epoch_examples(series, plan, model_config=cfg, epoch=epoch)
    spe = len(examples) // plan.batch_size
    if spe < 1:
        raise ValueError(f"epoch provides {len(examples)} examples, "
                         f"fewer than batch_size {plan.batch_size}")
    if total_steps is None:
        total_steps = plan.epochs * spe
    perm = _derived_rng(plan.seed, epoch, _PURPOSE_SHUFFLE).permutation(len(examples))
    micro = plan.batch_size // plan.accumulation_steps
    if ledger is None:
        ledger = CostLedger()
    ledger.param_count = model.params.total_count

    losses = []
    lr = 0.0
    stop = spe if max_steps is None else min(spe, start_step + max_steps)
    for step in range(start_step, stop):
        global_step = epoch * spe + step
        lr = lr_at(global_step, plan, spe)
        batch_idx = perm[step * plan.batch_size:(step + 1) * plan.batch_size]
        model.params.zero_grads()
        step_loss = 0.0
        for a in range(plan.accumulation_steps):
            chunk = [examples[i] for i in batch_idx[a * micro:(a + 1) * micro]]
            rng = _derived_rng(plan.seed, epoch, _PURPOSE_DROPOUT, step, a)
            loss_t = _micro_loss(model, series, chunk, lead, weights, rng)
            loss = float(loss_t.value)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss is {loss} at epoch {epoch} step {step} "
                                    f"micro {a}")
            nx.backward(nx.scale(loss_t, 1.0 / plan.accumulation_steps))
            step_loss += loss / plan.accumulation_steps
            for region, ts in _group(chunk).items():
                n_tokens = (region.height // cfg.patch_size) * (region.width // cfg.patch_size)
                ledger.record_forward(cfg, n_tokens, len(ts),
                                      region.height * region.width)
        opt.step(lr)
        losses.append(step_loss)
        if log_fn is not None:
            log_fn({"epoch": epoch, "step": step, "global_step": global_step,
                    "lr": lr, "loss": step_loss,
                    "tokens": ledger.tokens_per_crop,
                    "attention_entries": ledger.entries_per_layer_per_crop})
    return EpochStats(epoch=epoch, steps=len(losses),
                      mean_loss=float(np.mean(losses)) if losses else float("nan"),
                      last_loss=losses[-1] if losses else float("nan"),
                      last_lr=lr, ledger=ledger)


def global_train_epoch(series: GridSeries, plan: TrainPlan, model: VartexModel,
                       opt: AdamW, **kw) -> EpochStats:
    """Full-grid training; by construction the S=1 regional path."""
    return regional_train_epoch(series, replace(plan, split_factor=1), model, opt, **kw)


# -- held-out evaluation helpers -----------------------------------------------------


def holdout_mse(model: VartexModel, series: GridSeries, t_indices, lead: int,
                batch: int = 8) -> float:
    """Global-forward standardized lat-MSE over (t, t+lead) pairs."""
    weights = latitude_weights(series.latitudes)
    t_indices = np.asarray(list(t_indices))
    total, count = 0.0, 0
    for lo in range(0, len(t_indices), batch):
        ts = t_indices[lo:lo + batch]
        pred = model.forward(series.data[ts], mode="eval").value
        total += lat_mse(pred, series.data[ts + lead], weights) * len(ts)
        count += len(ts)
    return total / count


def persistence_mse(series: GridSeries, t_indices, lead: int) -> float:
    """The forecast-equals-input baseline, same loss and units."""
    weights = latitude_weights(series.latitudes)
    t_indices = np.asarray(list(t_indices))
    return lat_mse(series.data[t_indices], series.data[t_indices + lead], weights)


def run_training(series: GridSeries, config: ModelConfig, plan: TrainPlan,
                 checkpoint_path=None, log_fn=None, model: Optional[VartexModel] = None,
                 opt: Optional[AdamW] = None, start_epoch: int = 0) -> dict:
    """Fit on the leading train_fraction, score the held-out tail.

    Returns the model plus a report comparing its standardized lat-MSE on the
    tail against the persistence baseline (forecast = input). Pass a
    checkpoint-restored model/opt and start_epoch to resume.
    """
    plan = plan.validate()
    n = len(series)
    n_train = max(2, int(round(n * plan.train_fraction)))
    train_series = series.subseries(0, n_train)
    holdout = series.subseries(n_train, n) if n_train < n else None

    if model is None:
        model = VartexModel(config, seed=plan.seed)
    if opt is None:
        opt = AdamW(model.params, **CHECKPOINT_HYPERS, weight_decay=plan.weight_decay)
    ledger = CostLedger()
    epoch_losses = []
    for epoch in range(start_epoch, plan.epochs):
        stats = regional_train_epoch(train_series, plan, model, opt, epoch,
                                     ledger=ledger, log_fn=log_fn)
        epoch_losses.append(stats.mean_loss)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, opt, plan,
                            {"epoch": epoch + 1, "step": 0,
                             "global_step": opt.step_count})

    report = {
        "epochs": plan.epochs,
        "train_loss_first": epoch_losses[0] if epoch_losses else None,
        "train_loss_last": epoch_losses[-1] if epoch_losses else None,
        "lr_peak": plan.lr_peak,
        "split_factor": plan.split_factor,
        "ledger": ledger.to_json(),
    }
    lead = series.lead_steps(plan.lead_hours)
    if holdout is not None and len(holdout) > lead:
        idx = range(len(holdout) - lead)
        model_mse = holdout_mse(model, holdout, idx, lead)
        pers_mse = persistence_mse(holdout, idx, lead)
        report["holdout_lat_mse"] = model_mse
        report["persistence_lat_mse"] = pers_mse
        report["skill_ratio"] = model_mse / pers_mse
    return {"model": model, "opt": opt, "report": report, "ledger": ledger}


# -- checkpointing ------------------------------------------------------------------


def save_checkpoint(path, model: VartexModel, opt: AdamW, plan: TrainPlan,
                    progress: dict):
    meta = {
        "kind": "train",
        "config": model.config.to_json(),
        "plan": plan.to_json(),
        "opt": {"betas": list(opt.betas), "eps": opt.eps,
                "weight_decay": opt.weight_decay, "step_count": opt.step_count},
        "progress": dict(progress),
    }
    arrays = dict(model.params.state_dict())
    arrays.update(opt.state_arrays())
    write_container(path, meta, arrays)


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None,
                    expected_plan: Optional[TrainPlan] = None):
    """Rebuilds (model, opt, plan, progress); refuses config/plan drift."""
    meta, arrays = read_container(path)
    if meta.get("kind") != "train":
        raise HeaderCorrupt(f"{path}: not a training checkpoint "
                            f"(kind={meta.get('kind')!r})")
    config = ModelConfig.from_json(meta["config"])
    if expected_config is not None:
        diff = config_diff(config, expected_config)
        if diff:
            raise ConfigMismatch(f"{path}: config differs on fields {diff}")
    plan = TrainPlan.from_json(meta["plan"])
    if expected_plan is not None:
        diff = plan_diff(plan, expected_plan)
        if diff:
            raise ConfigMismatch(f"{path}: plan differs on fields {diff}")
    model = VartexModel(config, seed=0)
    model.params.load_state_dict({k: v for k, v in arrays.items()
                                  if not k.startswith("opt.")})
    opt = AdamW(model.params, betas=tuple(meta["opt"]["betas"]), eps=meta["opt"]["eps"],
                weight_decay=meta["opt"]["weight_decay"])
    opt.load_state_arrays(arrays, meta["opt"]["step_count"])
    return model, opt, plan, meta["progress"]
