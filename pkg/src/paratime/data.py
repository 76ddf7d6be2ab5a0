"""Dataset loading, chronological splits and channel-independent windowing.

A dataset holds an ``[N variates x T timestamps]`` value matrix. Forecast
windows pair a lookback of length L with the H values that follow it; the
window origin is the index of the first target timestamp, so a window at
origin ``t`` reads ``values[v, t-L:t]`` and predicts ``values[v, t:t+H]``.
Validation/test windows may reach back into the preceding split for lookback
context (targets never cross forward).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, SplitError

__all__ = [
    "TimeSeriesDataset",
    "SplitSpec",
    "WindowBatch",
    "load_csv",
    "split",
    "standardize",
    "window_iter",
    "count_windows",
    "synthetic_sines",
]

log = logging.getLogger(__name__)


@dataclass
class TimeSeriesDataset:
    values: np.ndarray  # [N, T]
    variate_names: list[str]
    name: str = "dataset"
    timestamps: list[str] | None = None

    @property
    def n_variates(self) -> int:
        return self.values.shape[0]

    @property
    def n_timestamps(self) -> int:
        return self.values.shape[1]


@dataclass
class SplitSpec:
    """Chronological split boundaries.

    ``ratio`` splits 0.7/0.1/0.2 of T. ``ett_months`` uses the 12/4/4-month
    border convention of the transformer-forecasting benchmarks (months of
    30 days; ``steps_per_month`` = 30*24 for hourly data, 30*24*4 for
    15-minute data); any timestamps past month 20 are unused by protocol.
    """

    scheme: str = "ratio"
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    steps_per_month: int = 30 * 24


@dataclass
class WindowBatch:
    lookback: np.ndarray  # [batch, L]
    target: np.ndarray  # [batch, H]
    variate_ids: np.ndarray  # [batch]
    origins: np.ndarray  # [batch]


def load_csv(path, schema: dict | None = None) -> TimeSeriesDataset:
    """Load a delimited text file with a header row into a dataset.

    ``schema`` may carry ``date_column`` (name, or None for auto-detection of
    a leading 'date' column) and ``value_columns`` (subset of header names).
    Variates become rows. Missing cells are forward-filled (leading gaps are
    backfilled) with a logged count; a fully missing variate is an error.
    """
    schema = schema or {}
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise DataError(f"cannot open {path}: {e}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        date_col = schema.get("date_column", "auto")
        if date_col == "auto":
            date_col = header[0] if header and header[0].lower() in ("date", "time", "timestamp") else None
        date_idx = header.index(date_col) if date_col is not None else None

        value_cols = schema.get("value_columns")
        if value_cols is None:
            value_cols = [h for i, h in enumerate(header) if i != date_idx]
        missing = [c for c in value_cols if c not in header]
        if missing:
            raise DataError(f"{path}: value columns {missing} not in header {header}")
        value_idx = [header.index(c) for c in value_cols]

        rows: list[list[float]] = []
        timestamps: list[str] | None = [] if date_idx is not None else None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for i in value_idx:
                cell = row[i].strip()
                if cell == "" or cell.lower() in ("nan", "na", "null"):
                    vals.append(np.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: line {lineno}: cannot parse {row[i]!r} in column {header[i]!r}") from None
            rows.append(vals)
            if timestamps is not None:
                timestamps.append(row[date_idx].strip())
    if not rows:
        raise DataError(f"{path}: no data rows")

    values = np.asarray(rows, dtype=np.float64).T  # [N, T]
    n_filled = 0
    for v in range(values.shape[0]):
        col = values[v]
        bad = np.isnan(col)
        if bad.all():
            raise DataError(f"{path}: variate {value_cols[v]!r} is entirely missing")
        if bad.any():
            n_filled += int(bad.sum())
            idx = np.where(~bad, np.arange(col.size), -1)
            np.maximum.accumulate(idx, out=idx)
            first_valid = int(np.argmax(~bad))
            idx[idx < 0] = first_valid
            values[v] = col[idx]
    if n_filled:
        log.info("%s: forward-filled %d missing cells", path, n_filled)

    name = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return TimeSeriesDataset(values=values, variate_names=list(value_cols), name=name, timestamps=timestamps)


def split(
    ds: TimeSeriesDataset,
    spec: SplitSpec,
    lookback: int | None = None,
    horizon: int | None = None,
) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    """Return (train, val, test) index ranges as half-open (start, end) pairs.

    When ``lookback`` and ``horizon`` are given, every range is validated to
    admit at least one window (val/test borrow lookback context from the
    preceding range, so only the train range must fit L+H outright).
    """
    t_total = ds.n_timestamps
    if spec.scheme == "ratio":
        train_end = int(t_total * spec.ratios[0])
        val_end = train_end + int(t_total * spec.ratios[1])
        end = t_total
    elif spec.scheme == "ett_months":
        spm = spec.steps_per_month
        train_end = 12 * spm
        val_end = 16 * spm
        end = min(20 * spm, t_total)
    else:
        raise ConfigError(f"unknown split scheme {spec.scheme!r}")
    if not (0 < train_end < val_end < end <= t_total):
        raise SplitError(f"{ds.name}: split boundaries ({train_end}, {val_end}, {end}) invalid for T={t_total}")
    ranges = ((0, train_end), (train_end, val_end), (val_end, end))
    if lookback is not None and horizon is not None:
        for rng_name, rng in zip(("train", "val", "test"), ranges):
            if count_windows(rng, lookback, horizon) < 1:
                raise SplitError(
                    f"{ds.name}: {rng_name} range {rng} admits no window with L={lookback}, H={horizon}"
                )
    return ranges


def standardize(ds: TimeSeriesDataset, train_end: int, eps: float = 1e-8) -> tuple[TimeSeriesDataset, np.ndarray, np.ndarray]:
    """Per-variate z-score using statistics of ``[0, train_end)`` only.

    This is the benchmark-wide metric scale: models train and are scored on
    the standardized series (instance normalization inside the model is on
    top of it, and is inverted before scoring).
    """
    mean = ds.values[:, :train_end].mean(axis=1, keepdims=True)
    std = ds.values[:, :train_end].std(axis=1, keepdims=True)
    std = np.maximum(std, eps)
    out = TimeSeriesDataset(
        values=(ds.values - mean) / std,
        variate_names=list(ds.variate_names),
        name=ds.name,
        timestamps=ds.timestamps,
    )
    return out, mean[:, 0], std[:, 0]


def _admissible_origins(rng: tuple[int, int], lookback: int, horizon: int) -> np.ndarray:
    lo, hi = rng
    first = max(lo, lookback)
    last = hi - horizon  # inclusive
    if last < first:
        return np.empty(0, dtype=np.int64)
    return np.arange(first, last + 1, dtype=np.int64)


def count_windows(rng: tuple[int, int], lookback: int, horizon: int) -> int:
    """Admissible origins in a range (per variate)."""
    return int(_admissible_origins(rng, lookback, horizon).size)


def window_iter(
    ds: TimeSeriesDataset,
    rng: tuple[int, int],
    lookback: int,
    horizon: int,
    batch: int = 64,
    variate_subsample: int | None = None,
    seed: int = 0,
    shuffle: bool = False,
):
    """Yield :class:`WindowBatch` objects over one split range.

    Without subsampling, every (variate, origin) pair appears exactly once;
    with ``shuffle`` the order is randomized by the seeded generator. With
    ``variate_subsample=k``, each batch draws k distinct variates uniformly
    without replacement and fills its slots round-robin from them with
    random admissible origins; an epoch keeps the same total window count as
    a k-variate pass over the range. Subsampling changes which windows a
    batch holds, never their contents. Evaluation passes should simply not
    request subsampling.
    """
    origins = _admissible_origins(rng, lookback, horizon)
    if origins.size == 0:
        raise SplitError(f"{ds.name}: range {rng} admits no window with L={lookback}, H={horizon}")
    n_var = ds.n_variates
    if variate_subsample is not None and variate_subsample > n_var:
        raise ConfigError(f"variate_subsample={variate_subsample} exceeds {n_var} variates")
    gen = np.random.default_rng(seed)

    def slice_batch(var_ids: np.ndarray, origs: np.ndarray) -> WindowBatch:
        lb = np.empty((var_ids.size, lookback), dtype=ds.values.dtype)
        tg = np.empty((var_ids.size, horizon), dtype=ds.values.dtype)
        for i, (v, t) in enumerate(zip(var_ids, origs)):
            lb[i] = ds.values[v, t - lookback : t]
            tg[i] = ds.values[v, t : t + horizon]
        return WindowBatch(lookback=lb, target=tg, variate_ids=var_ids, origins=origs)

    if variate_subsample is None:
        pairs = np.stack(
            [np.repeat(np.arange(n_var), origins.size), np.tile(origins, n_var)],
            axis=1,
        )
        if shuffle:
            gen.shuffle(pairs, axis=0)
        for start in range(0, pairs.shape[0], batch):
            chunk = pairs[start : start + batch]
            yield slice_batch(chunk[:, 0], chunk[:, 1])
        return

    k = variate_subsample
    total = origins.size * k
    n_batches = math.ceil(total / batch)
    for _ in range(n_batches):
        chosen = gen.choice(n_var, size=k, replace=False)
        var_ids = chosen[np.arange(batch) % k]
        origs = gen.choice(origins, size=batch, replace=True)
        yield slice_batch(var_ids, origs)


def synthetic_sines(
    n_series: int = 4,
    t_total: int = 4000,
    periods: tuple[float, ...] = (24.0, 57.0, 151.0),
    noise: float = 0.1,
    seed: int = 0,
    name: str = "synthetic_sines",
) -> TimeSeriesDataset:
    """Noisy multi-frequency sinusoids with per-variate amplitudes and phases."""
    gen = np.random.default_rng(seed)
    t = np.arange(t_total, dtype=np.float64)
    values = np.zeros((n_series, t_total))
    for v in range(n_series):
        for period in periods:
            amp = gen.uniform(0.5, 1.2)
            phase = gen.uniform(0.0, 2.0 * np.pi)
            values[v] += amp * np.sin(2.0 * np.pi * t / period + phase)
        values[v] += gen.normal(0.0, noise, size=t_total)
        values[v] += gen.uniform(-1.0, 1.0)  # per-variate offset
    names = [f"s{v}" for v in range(n_series)]
    return TimeSeriesDataset(values=values, variate_names=names, name=name)
