"""Command-line drivers: train, eval, count-flops, export-weights, sweep.

Runs are configured by an INI file with one section per concern ([data],
[model], [train], [run]); every key mirrors a config dataclass field and
any CLI flag of the same name (kebab-case) overrides the file. Unknown keys
are rejected. The fully resolved configuration is echoed into the output
directory next to the run artifacts.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
import types
import typing
from dataclasses import dataclass
from pathlib import Path

from . import analysis
from .data import SplitSpec, load_csv, split, synthetic_sines
from .errors import ConfigError
from .model import ModelConfig, ParallelTime, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger(__name__)


@dataclass
class DataConfig:
    path: str | None = None
    synthetic: bool = False
    synthetic_series: int = 4
    synthetic_length: int = 4000
    synthetic_noise: float = 0.1
    synthetic_seed: int = 0
    scheme: str = "ratio"
    steps_per_month: int = 720
    date_column: str = "auto"


@dataclass
class RunSettings:
    output_dir: str = "runs/run"
    split: str = "test"


@dataclass
class RunConfig:
    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    run: RunSettings


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "run": RunSettings}


def _coerce(raw: str, annotation) -> object:
    """Parse an INI/CLI string by the target field annotation."""
    origin = typing.get_origin(annotation)
    if origin in (types.UnionType, typing.Union):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _coerce(raw, args[0])
    if annotation is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if annotation is int:
        return int(raw)
    if annotation is float:
        return float(raw)
    return raw


def _field_types(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def load_run_config(path: str | None, overrides: dict[str, dict[str, str]] | None = None) -> RunConfig:
    """Build the resolved run configuration from an INI file plus overrides."""
    values: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file {path!r} not found")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            hints = _field_types(_SECTIONS[section])
            for key, raw in parser.items(section):
                if key not in hints:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                values[section][key] = _coerce(raw, hints[key])
    for section, items in (overrides or {}).items():
        hints = _field_types(_SECTIONS[section])
        for key, raw in items.items():
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} for section [{section}]")
            values[section][key] = _coerce(raw, hints[key]) if isinstance(raw, str) else raw
    return RunConfig(
        data=DataConfig(**values["data"]),
        model=ModelConfig(**values["model"]),
        train=TrainConfig(**values["train"]),
        run=RunSettings(**values["run"]),
    )


def write_resolved_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    for section, obj in (("data", cfg.data), ("model", cfg.model), ("train", cfg.train), ("run", cfg.run)):
        parser.add_section(section)
        for field in dataclasses.fields(obj):
            val = getattr(obj, field.name)
            parser.set(section, field.name, "none" if val is None else str(val))
    with open(path, "w") as fh:
        parser.write(fh)


def _load_dataset(dcfg: DataConfig):
    if dcfg.synthetic:
        return synthetic_sines(
            n_series=dcfg.synthetic_series,
            t_total=dcfg.synthetic_length,
            noise=dcfg.synthetic_noise,
            seed=dcfg.synthetic_seed,
        )
    if dcfg.path is None:
        raise ConfigError("no dataset: set data.path or data.synthetic=true")
    return load_csv(dcfg.path, schema={"date_column": dcfg.date_column})


def _splits_for(dcfg: DataConfig, ds, lookback: int, horizon: int):
    spec = SplitSpec(scheme=dcfg.scheme, steps_per_month=dcfg.steps_per_month)
    return split(ds, spec, lookback=lookback, horizon=horizon)


# ---------------------------------------------------------------------------
# flag plumbing
# ---------------------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser, sections=("data", "model", "train", "run")) -> None:
    parser.add_argument("--config", help="INI config file")
    seen: dict[str, str] = {}
    for section in sections:
        for field in dataclasses.fields(_SECTIONS[section]):
            if field.name == "seed":
                continue  # single --seed flag covers model and train below
            flag = field.name.replace("_", "-")
            if flag in seen:
                raise AssertionError(f"flag collision: {flag} in {section} and {seen[flag]}")
            seen[flag] = section
            parser.add_argument(f"--{flag}", dest=f"{section}.{field.name}", metavar="V")
    if "model" in sections or "train" in sections:
        parser.add_argument("--seed", dest="seed", metavar="V", help="seed for both init and training")


def _collect_overrides(args: argparse.Namespace) -> dict[str, dict[str, str]]:
    overrides: dict[str, dict[str, str]] = {}
    for key, val in vars(args).items():
        if val is None or "." not in key:
            continue
        section, name = key.split(".", 1)
        overrides.setdefault(section, {})[name] = val
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("model", {})["seed"] = args.seed
        overrides.setdefault("train", {})["seed"] = args.seed
    return overrides


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config, _collect_overrides(args))
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out / "config.resolved.ini")
    ds = _load_dataset(cfg.data)
    splits = _splits_for(cfg.data, ds, cfg.model.lookback, cfg.model.horizon)
    model = ParallelTime(cfg.model)
    log.info("training %s on %s (%d parameters)", cfg.model.fusion_strategy, ds.name, model.parameter_count())
    result = train(model, ds, splits, cfg.train, history_path=out / "history.jsonl")
    save_checkpoint(model, out / "checkpoint.ptckpt")
    report = evaluate(model, ds, splits, split=cfg.run.split, batch=max(cfg.train.batch, 64))
    metrics = {
        "dataset": ds.name,
        "split": cfg.run.split,
        "horizon": cfg.model.horizon,
        "mse": report.mse,
        "mae": report.mae,
        "n_windows": report.n_windows,
        "best_epoch": result.best_epoch,
        "best_val_mse": result.best_val_mse,
        "param_count": model.parameter_count(),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(json.dumps(metrics))
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = load_run_config(args.config, _collect_overrides(args))
    ds = _load_dataset(cfg.data)
    splits = _splits_for(cfg.data, ds, model.cfg.lookback, model.cfg.horizon)
    report = evaluate(model, ds, splits, split=cfg.run.split, batch=max(cfg.train.batch, 64))
    print(json.dumps({"dataset": ds.name, "split": cfg.run.split, "horizon": report.horizon, "mse": report.mse, "mae": report.mae, "n_windows": report.n_windows}))
    return 0


def _cmd_count_flops(args) -> int:
    cfg = load_run_config(args.config, _collect_overrides(args))
    horizons = [int(h) for h in args.horizons.split(",")] if args.horizons else [cfg.model.horizon]
    rows = []
    for horizon in horizons:
        mcfg = dataclasses.replace(cfg.model, horizon=horizon)
        report = analysis.count_flops(mcfg)
        rows.append(
            {
                "horizon": horizon,
                "fwd_flops": report.fwd_flops,
                "fwd_bwd_flops": report.fwd_bwd_flops,
                "param_count": report.param_count,
            }
        )
        print(json.dumps(rows[-1]))
    if args.output:
        Path(args.output).write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return 0


def _cmd_export_weights(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = load_run_config(args.config, _collect_overrides(args))
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load_dataset(cfg.data)
    splits = _splits_for(cfg.data, ds, model.cfg.lookback, model.cfg.horizon)
    origin = int(args.origin) if args.origin is not None else None
    patch_path = out / "patch_weights.csv"
    means_path = out / "layer_means.csv"
    analysis.export_patch_weights(model, ds, splits, variate=int(args.variate), origin=origin, path=patch_path)
    analysis.export_layer_means(model, ds, splits, split=cfg.run.split, path=means_path)
    print(json.dumps({"patch_weights": str(patch_path), "layer_means": str(means_path)}))
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_run_config(args.config, _collect_overrides(args))
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out / "config.resolved.ini")
    ds = _load_dataset(cfg.data)
    splits = _splits_for(cfg.data, ds, cfg.model.lookback, cfg.model.horizon)
    layers = tuple(int(v) for v in args.layers.split(","))
    patch_lens = tuple(int(v) for v in args.patch_lens.split(","))
    seeds = tuple(int(v) for v in args.seeds.split(","))
    rows = analysis.sweep(ds, splits, cfg.model, cfg.train, layers=layers, patch_lens=patch_lens, seeds=seeds)
    summary = analysis.summarize_sweep(rows)
    analysis.write_sweep_csv(rows, out / "sweep_cells.csv")
    analysis.write_sweep_csv(summary, out / "sweep_summary.csv")
    for entry in summary:
        print(json.dumps(entry))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paratime", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and save the best checkpoint")
    _add_config_flags(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p_eval.add_argument("--checkpoint", required=True)
    _add_config_flags(p_eval)
    p_eval.set_defaults(func=_cmd_eval)

    p_flops = sub.add_parser("count-flops", help="analytic FLOPs and parameter counts")
    p_flops.add_argument("--horizons", help="comma-separated, e.g. 96,192,336,720")
    p_flops.add_argument("--output", help="write JSON lines here as well")
    _add_config_flags(p_flops)
    p_flops.set_defaults(func=_cmd_count_flops)

    p_export = sub.add_parser("export-weights", help="export branch-weight analyses")
    p_export.add_argument("--checkpoint", required=True)
    p_export.add_argument("--variate", default="0")
    p_export.add_argument("--origin", default=None)
    _add_config_flags(p_export)
    p_export.set_defaults(func=_cmd_export_weights)

    p_sweep = sub.add_parser("sweep", help="layers x patch-length x seeds robustness grid")
    p_sweep.add_argument("--layers", default="1,2,3")
    p_sweep.add_argument("--patch-lens", default="8,16")
    p_sweep.add_argument("--seeds", default="2022,2023,2024,2025,2026")
    _add_config_flags(p_sweep)
    p_sweep.set_defaults(func=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except Exception as exc:
        print(f'error kind={type(exc).__name__} msg="{exc}"', file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
