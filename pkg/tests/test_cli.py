"""Command-line behavior, run in-process through main(argv)."""

import json

import numpy as np
import pytest

from vartex import presets
from vartex.cli import main
from vartex.griddata import read_grid
from vartex.model import ModelConfig, load_model
from vartex.training import CHECKPOINT_HYPERS, AdamW, TrainPlan, save_checkpoint
from vartex.model import VartexModel


TINY_FILE_CONFIG = {
    "model": {"image_size": [8, 8], "patch_size": 2, "embed_dim": 16,
              "num_representatives": 2, "num_blocks": 2, "heads": 2,
              "mlp_ratio": 2, "mixing_interval": 1, "head_depth": 2,
              "head_hidden": 16, "drop_rate": 0.0, "drop_path": 0.0,
              "num_variables": 4},
    "plan": {"epochs": 2, "warmup_epochs": 1, "batch_size": 4,
             "accumulation_steps": 1, "lead_hours": 6, "seed": 3,
             "lr_peak": 1e-3, "weight_decay": 0.0, "train_fraction": 0.75},
}


def _gen(tmp_path, name="d.vtxg", **over):
    # 1-hour steps: a 6-hour lead consumes 6 of them, so leave the holdout
    # tail enough room to hold at least one (t, t+lead) pair
    flags = {"variables": 4, "height": 8, "width": 8, "steps": 40, "seed": 1}
    flags.update(over)
    path = str(tmp_path / name)
    argv = ["gen-data", "--out", path]
    for k, v in flags.items():
        argv += [f"--{k.replace('_', '-')}", str(v)]
    assert main(argv) == 0
    return path


def _config_file(tmp_path, obj=None, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj or TINY_FILE_CONFIG))
    return str(path)


# -- gen-data ---------------------------------------------------------------------


def test_gen_data_deterministic_bytes(tmp_path, capsys):
    a = _gen(tmp_path, "a.vtxg")
    b = _gen(tmp_path, "b.vtxg")
    assert open(a, "rb").read() == open(b, "rb").read()
    out = capsys.readouterr().out
    assert "40 steps x 4 variables on 8x8" in out
    manifest = json.loads(open(a + ".json").read())
    assert manifest["generator"]["seed"] == 1
    assert manifest["dims"] == {"T": 40, "V": 4, "H": 8, "W": 8}


def test_gen_data_refuses_single_step(tmp_path, capsys):
    rc = main(["gen-data", "--out", str(tmp_path / "x.vtxg"), "--steps", "1"])
    assert rc == 1
    assert "steps" in capsys.readouterr().err


def test_gen_data_uses_physical_registry_at_47(tmp_path):
    path = _gen(tmp_path, "w.vtxg", variables=47, height=4, width=8, steps=4)
    series = read_grid(path)
    assert "geopotential_500" in series.registry.names()


def test_gen_data_env_seed(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("VARTEX_SEED", "77")
    path = str(tmp_path / "e.vtxg")
    assert main(["gen-data", "--out", path, "--variables", "2", "--height", "8",
                 "--width", "8", "--steps", "4"]) == 0
    manifest = json.loads(open(path + ".json").read())
    assert manifest["generator"]["seed"] == 77


# -- train / eval / export flow -------------------------------------------------------


def test_train_eval_export_flow(tmp_path, capsys):
    data = _gen(tmp_path)
    cfg = _config_file(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--data", data, "--out", str(out), "--config", cfg]) == 0
    stdout = capsys.readouterr().out
    assert "split S=1" in stdout
    assert "train loss" in stdout
    assert "holdout lat-MSE" in stdout
    for name in ("config.json", "train_log.jsonl", "checkpoint.vtxc", "report.json"):
        assert (out / name).exists(), name

    report = json.loads((out / "report.json").read_text())
    assert report["kernel_backend"] in ("compiled", "python")
    assert report["skill_ratio"] > 0
    log_lines = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert log_lines[0]["global_step"] == 0
    assert {"epoch", "step", "lr", "loss", "tokens"} <= set(log_lines[0])

    assert main(["eval", "--checkpoint", str(out / "checkpoint.vtxc"), "--data", data,
                 "--report", str(tmp_path / "rep.json"),
                 "--csv", str(tmp_path / "rep.csv")]) == 0
    stdout = capsys.readouterr().out
    assert stdout.startswith("variable,unit,acc,rmse")
    assert "channel_00" in stdout
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert [r["variable"] for r in rep["rows"]] == [f"channel_{i:02d}" for i in range(4)]
    assert (tmp_path / "rep.csv").read_text().startswith("variable,unit,acc,rmse")

    maps = tmp_path / "maps"
    assert main(["export-maps", "--checkpoint", str(out / "checkpoint.vtxc"),
                 "--data", data, "--time-index", "0", "--out", str(maps),
                 "--targets", "channel_00"]) == 0
    assert (maps / "channel_00.prediction.csv").exists()
    assert (maps / "channel_00.bias.csv").exists()


def test_train_with_split_and_seed_overrides(tmp_path, capsys):
    data = _gen(tmp_path)
    # --epochs 1 needs warmup below it
    obj = json.loads(json.dumps(TINY_FILE_CONFIG))
    obj["plan"]["warmup_epochs"] = 0
    cfg = _config_file(tmp_path, obj)
    out = tmp_path / "run2"
    assert main(["train", "--data", data, "--out", str(out), "--config", cfg,
                 "--split", "2", "--epochs", "1", "--seed", "9"]) == 0
    stdout = capsys.readouterr().out
    assert "split S=2: 4 crop(s) of 4x4, 4 tokens each" in stdout
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["plan"]["split_factor"] == 2
    assert echoed["plan"]["seed"] == 9
    assert echoed["plan"]["epochs"] == 1


def test_train_rejects_variable_mismatch(tmp_path, capsys):
    data = _gen(tmp_path)   # 4 variables; desk-tiny expects 8
    rc = main(["train", "--data", data, "--out", str(tmp_path / "r"),
               "--preset", "desk-tiny"])
    assert rc == 1
    assert "variables" in capsys.readouterr().err


def test_train_rejects_grid_mismatch(tmp_path, capsys):
    data = _gen(tmp_path, variables=8, height=8, width=8, steps=4)
    rc = main(["train", "--data", data, "--out", str(tmp_path / "r"),
               "--preset", "desk-tiny"])
    assert rc == 1
    assert "grid" in capsys.readouterr().err


def test_train_resume_matches_straight_run(tmp_path, capsys):
    data = _gen(tmp_path)
    cfg = _config_file(tmp_path)
    out_a = tmp_path / "straight"
    assert main(["train", "--data", data, "--out", str(out_a), "--config", cfg]) == 0
    report_a = json.loads((out_a / "report.json").read_text())

    # recreate the state after epoch 0 of the same run, then resume via the CLI
    series = read_grid(data)
    config, plan = presets.parse_config_obj(TINY_FILE_CONFIG)
    from vartex.training import regional_train_epoch
    n_train = max(2, int(round(len(series) * plan.train_fraction)))
    model = VartexModel(config, seed=plan.seed)
    opt = AdamW(model.params, **CHECKPOINT_HYPERS, weight_decay=plan.weight_decay)
    regional_train_epoch(series.subseries(0, n_train), plan, model, opt, epoch=0)
    ck = tmp_path / "mid.vtxc"
    save_checkpoint(ck, model, opt, plan,
                    {"epoch": 1, "step": 0, "global_step": opt.step_count})

    out_b = tmp_path / "resumed"
    assert main(["train", "--data", data, "--out", str(out_b), "--config", cfg,
                 "--resume", str(ck)]) == 0
    assert "resuming from" in capsys.readouterr().out
    report_b = json.loads((out_b / "report.json").read_text())
    assert report_b["holdout_lat_mse"] == report_a["holdout_lat_mse"]


def test_train_resume_refuses_other_config(tmp_path, capsys):
    data = _gen(tmp_path)
    cfg = _config_file(tmp_path)
    out = tmp_path / "r"
    assert main(["train", "--data", data, "--out", str(out), "--config", cfg]) == 0
    capsys.readouterr()

    other = json.loads(json.dumps(TINY_FILE_CONFIG))
    other["model"]["num_representatives"] = 1
    cfg2 = _config_file(tmp_path, other, name="other.json")
    rc = main(["train", "--data", data, "--out", str(tmp_path / "r2"),
               "--config", cfg2, "--resume", str(out / "checkpoint.vtxc")])
    assert rc == 1
    assert "num_representatives" in capsys.readouterr().err


# -- count-params ------------------------------------------------------------------------


def test_count_params_reference_line(capsys):
    assert main(["count-params", "--preset", "paper-r2"]) == 0
    out = capsys.readouterr().out
    assert "R=2 d_r=512" in out
    assert "reference total 59.86M" in out
    assert "deviation" in out
    total_line = [l for l in out.splitlines() if l.startswith("total")][0]
    assert int(total_line.split()[1].replace(",", "")) == 59_849_916


def test_count_params_verify_builds_store(tmp_path, capsys):
    cfg = _config_file(tmp_path)
    assert main(["count-params", "--config", cfg, "--verify"]) == 0
    out = capsys.readouterr().out
    for line in out.splitlines()[1:]:
        if "(store:" in line:
            analytic = int(line.split()[1].replace(",", ""))
            store = int(line.split("(store:")[1].rstrip(")").replace(",", "").strip())
            assert analytic == store
    assert "reference" not in out   # no reference row for ad-hoc configs


# -- bench-attention -----------------------------------------------------------------------


def test_bench_attention_quarter_ratio(capsys):
    assert main(["bench-attention", "--preset", "paper-r2", "--split", "2"]) == 0
    out = capsys.readouterr().out
    assert "512 tokens" in out
    assert "4 crops of 128 tokens" in out
    assert "total ratio 0.250000 (1/S^2 = 0.250000)" in out
    assert "mixing entries" in out


def test_bench_attention_indivisible_split(capsys):
    rc = main(["bench-attention", "--preset", "paper-r2", "--split", "3"])
    assert rc == 1
    assert "S=3" in capsys.readouterr().err


# -- config plumbing -------------------------------------------------------------------------


def test_config_file_round_trip(tmp_path):
    config, plan = presets.parse_config_obj(TINY_FILE_CONFIG)
    doc = presets.dump_config(config, plan)
    config2, plan2 = presets.parse_config_obj(doc)
    assert config2 == config
    assert plan2 == plan


def test_config_file_unknown_keys(tmp_path, capsys):
    cfg = _config_file(tmp_path, {"model": {"no_such_field": 1}}, name="bad.json")
    rc = main(["count-params", "--config", cfg])
    assert rc == 1
    assert "no_such_field" in capsys.readouterr().err


def test_preset_expansion():
    config, plan = presets.expand_preset("desk-tiny")
    assert config.num_variables == 8
    assert config.image_size == (32, 64)
    assert plan.epochs == 10
    assert isinstance(plan, TrainPlan) and isinstance(config, ModelConfig)
    with pytest.raises(KeyError):
        presets.expand_preset("desk-huge")


def test_eval_checkpoint_is_loadable_as_model(tmp_path):
    data = _gen(tmp_path)
    obj = json.loads(json.dumps(TINY_FILE_CONFIG))
    obj["plan"]["warmup_epochs"] = 0
    cfg = _config_file(tmp_path, obj)
    out = tmp_path / "run3"
    assert main(["train", "--data", data, "--out", str(out), "--config", cfg,
                 "--epochs", "1"]) == 0
    model = load_model(out / "checkpoint.vtxc")
    assert model.config.num_variables == 4
    for t in model.params.tensors():
        assert np.isfinite(t.value).all()
