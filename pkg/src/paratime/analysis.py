"""Cost accounting and weight-analysis exports.

``count_params`` and ``count_flops`` are closed-form functions of the model
configuration; the parameter count is exact against instantiation and the
FLOP count mirrors the kernels the forward pass actually runs (attention is
counted over visible key pairs only). Weight exports serialize the per-patch
branch weights the fusion layer assigns, either for one sample or averaged
over a whole split.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .data import TimeSeriesDataset, count_windows, standardize, window_iter
from .errors import ConfigError, DataError
from .model import ModelConfig, ParallelTime
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "CostReport",
    "count_params",
    "count_macs",
    "count_flops",
    "visible_attention_pairs",
    "export_patch_weights",
    "export_layer_means",
    "load_weight_rows",
    "sweep",
    "summarize_sweep",
    "write_sweep_csv",
    "read_sweep_csv",
]

log = logging.getLogger(__name__)

FLOPS_PER_MAC = 2  # one multiply, one accumulate
BWD_FWD_RATIO = 2  # backward costs about two forward passes under this rule


@dataclass
class CostReport:
    fwd_flops: int
    fwd_bwd_flops: int
    param_count: int
    horizon: int


def _linear_params(n_in: int, n_out: int, bias: bool = True) -> int:
    return n_in * n_out + (n_out if bias else 0)


def count_params(cfg: ModelConfig) -> int:
    """Exact declared-parameter count; mirrors model construction one for one."""
    dim, di, s = cfg.dim, cfg.d_inner, cfg.d_state
    n_patches = cfg.n_patches
    total = 2 if cfg.revin_affine else 0
    # embedding: bias-free linear and conv paths, learned position table
    total += cfg.patch_len * dim + dim * 1 * cfg.k_embed + n_patches * dim
    dt_rank = -(-dim // 16)
    compressed = int(np.ceil(np.sqrt(dim)))
    dim_hidden = 4 * compressed
    per_block = (
        2 * dim  # ln_mix
        + 4 * _linear_params(dim, dim) + cfg.n_registers * dim  # attention
        + _linear_params(dim, 2 * di, bias=False)  # ssm in_proj
        + di * cfg.d_conv + di  # ssm depthwise conv + bias
        + _linear_params(di, dt_rank + 2 * s, bias=False)  # ssm x_proj
        + _linear_params(dt_rank, di)  # ssm dt_proj
        + di * s + di  # a_log, d_skip
        + _linear_params(di, dim, bias=False)  # ssm out_proj
        + 2 * dim  # weighter rms gains
        + 2 * _linear_params(dim, compressed, bias=False)  # weighter compressors
        + _linear_params(2 * compressed, dim_hidden)  # weighter w1
        + _linear_params(dim_hidden, 2)  # weighter w2
        + 2 * dim  # ln_ffn
        + _linear_params(dim, cfg.ffn_mult * dim) + _linear_params(cfg.ffn_mult * dim, dim)  # ffn
    )
    total += cfg.n_layers * per_block
    total += 2 * dim  # final norm
    if cfg.head == "ecp":
        ew, cw = cfg.ecp_expand_width, cfg.ecp_compress_width
        total += _linear_params(dim, ew) + _linear_params(ew, cw) + _linear_params(n_patches * cw, cfg.horizon)
    else:
        total += _linear_params(n_patches * dim, cfg.horizon)
    return total


def visible_attention_pairs(n_patches: int, n_registers: int, window: int) -> int:
    """Visible (query, key) pairs across the patch rows of the mask."""
    return sum(n_registers + min(window, i + 1) for i in range(n_patches))


def count_macs(cfg: ModelConfig) -> int:
    """Analytic multiply-accumulates of one eval-mode window forward."""
    dim, di, s = cfg.dim, cfg.d_inner, cfg.d_state
    p, r, w = cfg.n_patches, cfg.n_registers, cfg.resolved_window
    dt_rank = -(-dim // 16)
    compressed = int(np.ceil(np.sqrt(dim)))
    dim_hidden = 4 * compressed
    macs = p * cfg.patch_len * dim + p * dim * cfg.k_embed * cfg.patch_len  # embedding
    attn = (2 * (r + p) + 2 * p) * dim * dim  # K,V over registers+patches; Q,O over patches
    attn += 2 * visible_attention_pairs(p, r, w) * dim  # scores and values
    ssm = (
        p * dim * 2 * di  # in_proj
        + p * di * cfg.d_conv  # depthwise conv
        + p * di * (dt_rank + 2 * s)  # x_proj
        + p * dt_rank * di  # dt_proj
        + p * (2 * di * s + di)  # recurrence and skip
        + p * di * dim  # out_proj
    )
    weighter = 2 * p * dim * compressed + p * 2 * compressed * dim_hidden + p * dim_hidden * 2
    ffn = 2 * p * dim * cfg.ffn_mult * dim
    macs += cfg.n_layers * (attn + ssm + weighter + ffn)
    if cfg.head == "ecp":
        ew, cw = cfg.ecp_expand_width, cfg.ecp_compress_width
        macs += p * dim * ew + p * ew * cw + p * cw * cfg.horizon
    else:
        macs += p * dim * cfg.horizon
    return macs


def count_flops(cfg: ModelConfig) -> CostReport:
    """Forward and training FLOPs for one window, plus the parameter count.

    Counting rule: 1 MAC = 2 FLOPs over matmuls, convs, attention
    score/value products (visible pairs only) and scan steps; backward adds
    twice the forward cost, so training = 3x inference.
    """
    fwd = count_macs(cfg) * FLOPS_PER_MAC
    return CostReport(
        fwd_flops=fwd,
        fwd_bwd_flops=fwd * (1 + BWD_FWD_RATIO),
        param_count=count_params(cfg),
        horizon=cfg.horizon,
    )


# ---------------------------------------------------------------------------
# weight exports
# ---------------------------------------------------------------------------


def export_patch_weights(
    model: ParallelTime,
    ds: TimeSeriesDataset,
    splits,
    variate: int,
    origin: int | None = None,
    path=None,
) -> list[tuple[int, int, float, float]]:
    """Branch weights per (layer, patch) for one test-split window.

    ``origin`` is the first target timestamp; None picks the first
    admissible test origin. Rows are returned and, when ``path`` is given,
    written as CSV with full-precision floats (round-trippable).
    """
    cfg = model.cfg
    test_rng = splits[2]
    first = max(test_rng[0], cfg.lookback)
    last = test_rng[1] - cfg.horizon
    if origin is None:
        origin = first
    if not (0 <= variate < ds.n_variates):
        raise ConfigError(f"variate {variate} out of range [0, {ds.n_variates})")
    if not (first <= origin <= last):
        raise ConfigError(f"origin {origin} outside admissible test range [{first}, {last}]")
    std_ds, _, _ = standardize(ds, train_end=splits[0][1])
    lookback = std_ds.values[variate, origin - cfg.lookback : origin]
    captured: list = []
    model.forward(lookback[None, :], capture_weights=captured)
    rows = []
    for layer, pair in enumerate(captured):
        for patch in range(pair.w_att.shape[-1]):
            rows.append((layer, patch, float(pair.w_att[0, patch]), float(pair.w_mamba[0, patch])))
    if path is not None:
        _write_weight_rows(path, rows)
    return rows


def export_layer_means(
    model: ParallelTime,
    ds: TimeSeriesDataset,
    splits,
    split: str = "test",
    batch: int = 256,
    path=None,
) -> list[tuple[int, int, float, float]]:
    """Mean branch weights per layer over every token of every split window."""
    names = ("train", "val", "test")
    if split not in names:
        raise ConfigError(f"split must be one of {names}, got {split!r}")
    rng_range = splits[names.index(split)]
    cfg = model.cfg
    if count_windows(rng_range, cfg.lookback, cfg.horizon) < 1:
        raise DataError(f"{ds.name}: {split} split admits no window")
    std_ds, _, _ = standardize(ds, train_end=splits[0][1])
    sums = np.zeros((cfg.n_layers, 2), dtype=np.float64)
    count = 0
    for wb in window_iter(std_ds, rng_range, cfg.lookback, cfg.horizon, batch=batch):
        captured: list = []
        model.forward(wb.lookback, capture_weights=captured)
        for layer, pair in enumerate(captured):
            sums[layer, 0] += float(pair.w_att.sum())
            sums[layer, 1] += float(pair.w_mamba.sum())
        count += wb.lookback.shape[0] * cfg.n_patches
    rows = [(layer, count, float(sums[layer, 0] / count), float(sums[layer, 1] / count)) for layer in range(cfg.n_layers)]
    if path is not None:
        _write_weight_rows(path, rows, header=("layer", "n_tokens", "w_att", "w_mamba"))
    return rows


def _write_weight_rows(path, rows, header=("layer", "patch_index", "w_att", "w_mamba")) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def load_weight_rows(path) -> list[tuple]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = []
        for raw in reader:
            rows.append(tuple(int(v) if i < len(header) - 2 else float(v) for i, v in enumerate(raw)))
    return rows


# ---------------------------------------------------------------------------
# robustness sweep
# ---------------------------------------------------------------------------


def sweep(
    ds: TimeSeriesDataset,
    splits,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    layers: tuple[int, ...] = (1, 2, 3),
    patch_lens: tuple[int, ...] = (8, 16),
    seeds: tuple[int, ...] = (2022, 2023, 2024, 2025, 2026),
) -> list[dict]:
    """Grid of (layers x patch length) cells, each trained across the seeds.

    A failed cell is recorded with its error and does not stop the sweep.
    The seed drives both initialization and training.
    """
    rows = []
    for n_layers in layers:
        for patch_len in patch_lens:
            for seed in seeds:
                row = {"n_layers": n_layers, "patch_len": patch_len, "seed": seed}
                try:
                    cfg = dataclasses.replace(model_cfg, n_layers=n_layers, patch_len=patch_len, seed=seed)
                    tcfg = dataclasses.replace(train_cfg, seed=seed)
                    model = ParallelTime(cfg)
                    train(model, ds, splits, tcfg)
                    report = evaluate(model, ds, splits, split="test", batch=max(train_cfg.batch, 64))
                    row.update(status="ok", mse=report.mse, mae=report.mae)
                except Exception as exc:  # cell isolation is the contract
                    log.warning("sweep cell %s failed: %s", row, exc)
                    row.update(status="error", mse=float("nan"), mae=float("nan"), error=str(exc))
                rows.append(row)
    return rows


def summarize_sweep(rows: list[dict]) -> list[dict]:
    """Mean and standard deviation per grid cell over its successful seeds."""
    cells: dict[tuple[int, int], list[dict]] = {}
    for row in rows:
        cells.setdefault((row["n_layers"], row["patch_len"]), []).append(row)
    summary = []
    for (n_layers, patch_len), group in sorted(cells.items()):
        ok = [g for g in group if g["status"] == "ok"]
        entry = {"n_layers": n_layers, "patch_len": patch_len, "n_ok": len(ok), "n_total": len(group)}
        if ok:
            mses = np.array([g["mse"] for g in ok])
            maes = np.array([g["mae"] for g in ok])
            entry.update(
                mse_mean=float(mses.mean()),
                mse_std=float(mses.std()),
                mae_mean=float(maes.mean()),
                mae_std=float(maes.std()),
            )
        summary.append(entry)
    return summary


def write_sweep_csv(rows: list[dict], path) -> None:
    if not rows:
        return
    keys = sorted({k for row in rows for k in row}, key=lambda k: (k not in ("n_layers", "patch_len", "seed"), k))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]
