"""Command-line surface.

Subcommands: gen-data, train, eval, count-params, bench-attention,
export-maps. Every command is deterministic given its flags; VARTEX_SEED
overrides the default seed where --seed is not passed explicitly.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import _kernels
from .errors import VartexError
from .griddata import (
    SynthConfig,
    VariableRegistry,
    generate_synthetic,
    read_grid,
    series_manifest,
    write_grid,
)
from .inference import evaluate, export_maps
from .model import VartexModel, count_parameters, load_model
from .presets import (
    REFERENCE_PARAM_TOTALS,
    dump_config,
    expand_preset,
    load_config_file,
    preset_names,
)
from .training import attention_cost, load_checkpoint, run_training


def _default_seed() -> int:
    env = os.environ.get("VARTEX_SEED")
    return int(env) if env else 0


def _resolve_seed(value) -> int:
    return _default_seed() if value is None else value


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (preset + overrides)")
    p.add_argument("--preset", choices=preset_names(),
                   help="named configuration (ignored when --config is given)")


def _load_configs(args, default_preset="desk-tiny"):
    if args.config:
        return load_config_file(args.config)
    return expand_preset(args.preset or default_preset)


# -- commands ------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    if args.steps < 2:
        print("gen-data: --steps must be >= 2 (standardization needs two samples)",
              file=sys.stderr)
        return 1
    registry = (VariableRegistry.default() if args.variables == 47
                else VariableRegistry.synthetic(args.variables))
    cfg = SynthConfig(
        num_variables=args.variables,
        height=args.height,
        width=args.width,
        steps=args.steps,
        seed=_resolve_seed(args.seed),
        modes=args.modes,
        advection_speed=args.advection_speed,
        stats_fraction=args.stats_fraction,
        registry=registry,
    )
    series = generate_synthetic(cfg)
    write_grid(args.out, series)
    manifest = series_manifest(series)
    manifest["generator"] = {
        "seed": cfg.seed, "modes": cfg.modes,
        "advection_speed": cfg.advection_speed,
        "stats_fraction": cfg.stats_fraction,
    }
    manifest_path = args.out + ".json"
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    T, V, H, W = series.data.shape
    print(f"wrote {args.out}: {T} steps x {V} variables on {H}x{W} "
          f"(manifest {manifest_path})")
    return 0


def _cmd_train(args) -> int:
    series = read_grid(args.data)
    config, plan = _load_configs(args)
    if args.split is not None:
        plan = replace(plan, split_factor=args.split)
    if args.crop_mode is not None:
        plan = replace(plan, crop_mode=args.crop_mode)
    if args.lead_time is not None:
        plan = replace(plan, lead_hours=args.lead_time)
    if args.epochs is not None:
        plan = replace(plan, epochs=args.epochs)
    if args.batch_size is not None:
        plan = replace(plan, batch_size=args.batch_size)
    if args.lr is not None:
        plan = replace(plan, lr_peak=args.lr)
    if args.seed is not None or "VARTEX_SEED" in os.environ:
        plan = replace(plan, seed=_resolve_seed(args.seed))
    config.validate()
    plan.validate()

    T, V, H, W = series.data.shape
    if config.num_variables != V:
        print(f"train: model expects {config.num_variables} variables but "
              f"{args.data} holds {V}; adjust the config or regenerate the data",
              file=sys.stderr)
        return 1
    if config.image_size != (H, W):
        print(f"train: model grid {config.image_size} != data grid {(H, W)}",
              file=sys.stderr)
        return 1

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as f:
        json.dump(dump_config(config, plan), f, indent=2)

    model = opt = None
    start_epoch = 0
    if args.resume:
        model, opt, plan_ck, progress = load_checkpoint(
            args.resume, expected_config=config, expected_plan=plan)
        plan = plan_ck
        start_epoch = int(progress["epoch"])
        print(f"resuming from {args.resume} at epoch {start_epoch}")

    log_path = os.path.join(args.out, "train_log.jsonl")
    ckpt_path = os.path.join(args.out, "checkpoint.vtxc")
    with open(log_path, "a" if args.resume else "w") as log_file:
        def log_fn(rec):
            log_file.write(json.dumps(rec) + "\n")

        result = run_training(series, config, plan, checkpoint_path=ckpt_path,
                              log_fn=log_fn, model=model, opt=opt,
                              start_epoch=start_epoch)

    report = result["report"]
    report["kernel_backend"] = _kernels.BACKEND
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(report, f, indent=2)
    ledger = result["ledger"]
    crops = plan.split_factor ** 2
    print(f"split S={plan.split_factor}: {crops} crop(s) of "
          f"{H // plan.split_factor}x{W // plan.split_factor}, "
          f"{ledger.tokens_per_crop} tokens each")
    if report["train_loss_first"] is None:
        print(f"nothing left to train: checkpoint already covers all "
              f"{plan.epochs} epochs")
    else:
        print(f"train loss {report['train_loss_first']:.4f} -> "
              f"{report['train_loss_last']:.4f} over epochs "
              f"{start_epoch}..{plan.epochs - 1}")
    if "holdout_lat_mse" in report:
        print(f"holdout lat-MSE {report['holdout_lat_mse']:.4f} vs persistence "
              f"{report['persistence_lat_mse']:.4f} "
              f"(ratio {report['skill_ratio']:.3f})")
    print(f"checkpoint: {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    series = read_grid(args.data)
    model = load_model(args.checkpoint)
    targets = args.targets.split(",") if args.targets else None
    report = evaluate(model, series, targets=targets, split_factor=args.split,
                      lead_hours=args.lead_time)
    csv = report.to_csv()
    print(csv, end="")
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report.to_json(), f, indent=2)
        print(f"wrote {args.report}")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(csv)
        print(f"wrote {args.csv}")
    return 0


def _cmd_count_params(args) -> int:
    config, _ = _load_configs(args, default_preset="paper-r2")
    census = count_parameters(config)
    model_groups = None
    if args.verify:
        model_groups = VartexModel(config, seed=0).parameter_census()
    print(f"mixing_interval={config.mixing_interval} "
          f"share_spatial_weights={config.share_spatial_weights} "
          f"R={config.num_representatives} d_r={config.resolved_stream_dim}")
    for group in ("embeddings", "aggregation", "spatial_blocks", "mixing_blocks",
                  "head", "total"):
        line = f"{group:16s} {census[group]:>12,d}"
        if model_groups is not None:
            line += f"  (store: {model_groups[group]:,d})"
        print(line)
    preset = args.preset if args.config is None else None
    if preset in REFERENCE_PARAM_TOTALS:
        ref = REFERENCE_PARAM_TOTALS[preset]
        dev = (census["total"] - ref) / ref
        print(f"reference total {ref / 1e6:.2f}M, deviation {dev:+.2%}")
    return 0


def _cmd_bench_attention(args) -> int:
    config, _ = _load_configs(args, default_preset="paper-r2")
    base = attention_cost(config, 1)
    split = attention_cost(config, args.split)
    print(f"global: {base['tokens_per_crop']} tokens, "
          f"{base['entries_per_layer_per_crop']:,d} entries/layer, "
          f"{base['spatial_entries_total']:,d} spatial entries total")
    print(f"S={args.split}: {split['crops']} crops of {split['tokens_per_crop']} tokens, "
          f"{split['entries_per_layer_per_crop']:,d} entries/layer/crop, "
          f"{split['spatial_entries_total']:,d} spatial entries total")
    ratio = split["spatial_entries_total"] / base["spatial_entries_total"]
    print(f"total ratio {ratio:.6f} (1/S^2 = {1.0 / args.split ** 2:.6f}); "
          f"per-crop/layer ratio vs global "
          f"{split['entries_per_layer_per_crop'] / base['entries_per_layer_per_crop']:.6f}")
    print(f"mixing entries (split-independent): {split['mixing_entries_total']:,d}")
    return 0


def _cmd_export_maps(args) -> int:
    series = read_grid(args.data)
    model = load_model(args.checkpoint)
    targets = args.targets.split(",") if args.targets else None
    paths = export_maps(model, series, args.time_index, args.out, targets=targets,
                        split_factor=args.split, lead_hours=args.lead_time)
    for p in paths:
        print(p)
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vartex",
        description="Desk-scale weather-forecasting transformer with "
                    "multi-representative variable aggregation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic VTXG series")
    g.add_argument("--out", required=True)
    g.add_argument("--variables", type=int, default=47)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--steps", type=int, default=512)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--modes", type=int, default=6)
    g.add_argument("--advection-speed", type=float, default=1.0)
    g.add_argument("--stats-fraction", type=float, default=0.75)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a VTXG series")
    _add_config_flags(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--split", type=int, default=None, help="regional split factor S")
    t.add_argument("--crop-mode", choices=["canonical", "random"], default=None)
    t.add_argument("--lead-time", type=int, default=None, help="forecast lead in hours")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a test series")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--targets", default=None, help="comma-separated variable labels")
    e.add_argument("--split", type=int, default=1)
    e.add_argument("--lead-time", type=int, default=6)
    e.add_argument("--report", default=None, help="write JSON report here")
    e.add_argument("--csv", default=None, help="write CSV report here")
    e.set_defaults(fn=_cmd_eval)

    c = sub.add_parser("count-params", help="per-group parameter census")
    _add_config_flags(c)
    c.add_argument("--verify", action="store_true",
                   help="also build the model and census the parameter store")
    c.set_defaults(fn=_cmd_count_params)

    b = sub.add_parser("bench-attention", help="attention-entry arithmetic under splits")
    _add_config_flags(b)
    b.add_argument("--split", type=int, default=2)
    b.set_defaults(fn=_cmd_bench_attention)

    x = sub.add_parser("export-maps", help="CSV panels: initial/truth/prediction/bias")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--time-index", type=int, required=True)
    x.add_argument("--out", required=True, help="output directory")
    x.add_argument("--targets", default=None)
    x.add_argument("--split", type=int, default=1)
    x.add_argument("--lead-time", type=int, default=6)
    x.set_defaults(fn=_cmd_export_maps)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (VartexError, OSError, ValueError, KeyError) as e:
        print(f"vartex {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
