"""End-to-end CLI tests over a tiny synthetic run."""

import json

import numpy as np
import pytest

from paratime import cli
from paratime.analysis import load_weight_rows, read_sweep_csv
from paratime.errors import ConfigError
from paratime.model import load_checkpoint

TINY_INI = """
[data]
synthetic = true
synthetic_series = 2
synthetic_length = 600
synthetic_noise = 0.05
synthetic_seed = 3

[model]
dim = 8
n_layers = 1
patch_len = 8
lookback = 32
horizon = 8
heads = 2
n_registers = 2
d_state = 2
window = 2
seed = 5

[train]
epochs = 2
lr = 0.003
batch = 64
seed = 11

[run]
output_dir = {out}
"""


@pytest.fixture
def tiny_config(tmp_path):
    out = tmp_path / "run"
    path = tmp_path / "run.ini"
    path.write_text(TINY_INI.format(out=out))
    return path, out


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[model]\nwidth = 8\n")
    with pytest.raises(ConfigError):
        cli.load_run_config(str(path))


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[banana]\ndim = 8\n")
    with pytest.raises(ConfigError):
        cli.load_run_config(str(path))


def test_missing_config_file():
    with pytest.raises(ConfigError):
        cli.load_run_config("/nonexistent/run.ini")


def test_cli_flag_overrides_file(tiny_config):
    path, _ = tiny_config
    cfg = cli.load_run_config(str(path), {"model": {"dim": "16"}, "train": {"lr": "0.5"}})
    assert cfg.model.dim == 16
    assert cfg.train.lr == 0.5
    assert cfg.model.patch_len == 8  # untouched file value survives


def test_optional_fields_coerce_none(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[model]\nwindow = none\n")
    cfg = cli.load_run_config(str(path))
    assert cfg.model.window is None


def test_resolved_config_round_trips(tiny_config, tmp_path):
    path, _ = tiny_config
    cfg = cli.load_run_config(str(path))
    echo = tmp_path / "resolved.ini"
    cli.write_resolved_config(cfg, echo)
    again = cli.load_run_config(str(echo))
    assert again.model == cfg.model
    assert again.train == cfg.train
    assert again.data == cfg.data


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def test_train_eval_export_sweep_pipeline(tiny_config, capsys):
    path, out = tiny_config

    rc = cli.main(["train", "--config", str(path)])
    assert rc == 0
    metrics = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert metrics["split"] == "test" and metrics["mse"] > 0
    assert (out / "checkpoint.ptckpt").exists()
    assert (out / "history.jsonl").exists()
    assert (out / "config.resolved.ini").exists()
    assert (out / "metrics.json").exists()
    assert len((out / "history.jsonl").read_text().strip().splitlines()) == 2

    model = load_checkpoint(out / "checkpoint.ptckpt")
    assert model.cfg.dim == 8

    rc = cli.main(["eval", "--checkpoint", str(out / "checkpoint.ptckpt"), "--config", str(path)])
    assert rc == 0
    evaled = json.loads(capsys.readouterr().out.strip())
    assert evaled["mse"] == pytest.approx(metrics["mse"], rel=1e-6)

    rc = cli.main(
        ["export-weights", "--checkpoint", str(out / "checkpoint.ptckpt"), "--config", str(path), "--variate", "1"]
    )
    assert rc == 0
    paths = json.loads(capsys.readouterr().out.strip())
    rows = load_weight_rows(paths["patch_weights"])
    assert len(rows) == 4  # 1 layer x 4 patches
    means = load_weight_rows(paths["layer_means"])
    assert len(means) == 1

    rc = cli.main(
        ["sweep", "--config", str(path), "--layers", "1", "--patch-lens", "8,16", "--seeds", "2023", "--epochs", "1"]
    )
    assert rc == 0
    cells = read_sweep_csv(out / "sweep_cells.csv")
    assert len(cells) == 2
    assert {r["status"] for r in cells} == {"ok"}


def test_count_flops_subcommand(tiny_config, capsys):
    path, _ = tiny_config
    rc = cli.main(["count-flops", "--config", str(path), "--horizons", "96,720"])
    assert rc == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert [l["horizon"] for l in lines] == [96, 720]
    assert lines[0]["fwd_bwd_flops"] == 3 * lines[0]["fwd_flops"]


def test_error_exit_code_and_machine_readable_line(capsys):
    rc = cli.main(["train", "--config", "/nonexistent.ini"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "error kind=ConfigError" in err


def test_seed_flag_sets_model_and_train(tiny_config):
    path, _ = tiny_config
    parser = cli.build_parser()
    args = parser.parse_args(["train", "--config", str(path), "--seed", "77"])
    overrides = cli._collect_overrides(args)
    cfg = cli.load_run_config(str(path), overrides)
    assert cfg.model.seed == 77
    assert cfg.train.seed == 77
