"""Data loading, split and windowing tests."""

import numpy as np
import pytest

from paratime import data as D
from paratime.errors import ConfigError, DataError, SplitError


@pytest.fixture
def small_csv(tmp_path):
    path = tmp_path / "toy.csv"
    lines = ["date,a,b"]
    for i in range(10):
        lines.append(f"2020-01-{i + 1:02d},{i},{2 * i}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _dataset(n=2, t=1000, seed=0):
    gen = np.random.default_rng(seed)
    return D.TimeSeriesDataset(values=gen.standard_normal((n, t)), variate_names=[f"v{i}" for i in range(n)])


# ---------------------------------------------------------------------------
# load_csv
# ---------------------------------------------------------------------------


def test_load_csv_shapes(small_csv):
    ds = D.load_csv(small_csv)
    assert ds.n_variates == 2
    assert ds.n_timestamps == 10
    assert ds.variate_names == ["a", "b"]
    assert np.array_equal(ds.values[1], 2.0 * np.arange(10))


def test_load_csv_ragged_row_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("date,a,b\n2020,1,2\n2020,3\n")
    with pytest.raises(DataError) as e:
        D.load_csv(path)
    assert "line 3" in str(e.value)


def test_load_csv_unparseable_cell_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("date,a\n2020,1\n2021,oops\n")
    with pytest.raises(DataError) as e:
        D.load_csv(path)
    assert "line 3" in str(e.value) and "oops" in str(e.value)


def test_load_csv_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(DataError):
        D.load_csv(path)


def test_load_csv_forward_fill_and_all_nan(tmp_path):
    path = tmp_path / "gaps.csv"
    path.write_text("date,a,b\n1,,5\n2,2,\n3,,7\n")
    ds = D.load_csv(path)
    # leading gap backfills, interior gap forward-fills
    assert ds.values[0].tolist() == [2.0, 2.0, 2.0]
    assert ds.values[1].tolist() == [5.0, 5.0, 7.0]
    path2 = tmp_path / "dead.csv"
    path2.write_text("date,a\n1,\n2,\n")
    with pytest.raises(DataError):
        D.load_csv(path2)


def test_load_csv_no_date_column(tmp_path):
    path = tmp_path / "plain.csv"
    path.write_text("a,b\n1,2\n3,4\n")
    ds = D.load_csv(path)
    assert ds.n_variates == 2
    assert ds.timestamps is None


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------


def test_split_ratio_arithmetic():
    ds = _dataset(t=1000)
    train, val, test = D.split(ds, D.SplitSpec(scheme="ratio"))
    assert train == (0, 700)
    assert val == (700, 800)
    assert test == (800, 1000)


def test_split_ett_month_boundaries():
    # Convention oracle: 12 and 16 months of 30 days x 24 hourly steps.
    ds = _dataset(t=17420)
    train, val, test = D.split(ds, D.SplitSpec(scheme="ett_months"))
    assert train[1] == 12 * 30 * 24
    assert val == (12 * 30 * 24, 16 * 30 * 24)
    assert test == (16 * 30 * 24, 20 * 30 * 24)
    # window-count cross-check of the same convention
    assert D.count_windows(val, 512, 96) == (16 * 30 * 24) - (12 * 30 * 24) - 96 + 1


def test_split_too_small_for_one_window():
    ds = _dataset(t=400)
    with pytest.raises(SplitError):
        D.split(ds, D.SplitSpec(scheme="ratio"), lookback=512, horizon=96)


# ---------------------------------------------------------------------------
# window_iter
# ---------------------------------------------------------------------------


def test_window_count_tight_range():
    ds = _dataset(n=2, t=520)
    batches = list(D.window_iter(ds, (0, 520), lookback=512, horizon=8, batch=16))
    total = sum(b.lookback.shape[0] for b in batches)
    assert total == 2  # one admissible origin per variate


def test_windows_cover_every_origin_exactly_once():
    ds = _dataset(n=3, t=200)
    rng = (100, 200)
    seen = set()
    for b in D.window_iter(ds, rng, lookback=24, horizon=8, batch=7):
        for v, t in zip(b.variate_ids, b.origins):
            seen.add((int(v), int(t)))
    want = {(v, t) for v in range(3) for t in range(100, 193)}
    assert seen == want


def test_window_contents_match_source():
    ds = _dataset(n=2, t=300, seed=3)
    for b in D.window_iter(ds, (150, 300), lookback=32, horizon=4, batch=11):
        for i in range(b.lookback.shape[0]):
            v, t = int(b.variate_ids[i]), int(b.origins[i])
            assert np.array_equal(b.lookback[i], ds.values[v, t - 32 : t])
            assert np.array_equal(b.target[i], ds.values[v, t : t + 4])


def test_no_target_leakage_across_boundary():
    ds = _dataset(n=1, t=200)
    val_rng = (100, 150)
    for b in D.window_iter(ds, val_rng, lookback=64, horizon=10, batch=8):
        assert np.all(b.origins + 10 <= 150)
        # lookback may reach below 100 (context borrowing), targets may not
        assert np.all(b.origins >= 100)


def test_subsample_batches_have_exact_variate_count():
    ds = _dataset(n=50, t=400, seed=1)
    for b in D.window_iter(ds, (0, 400), lookback=96, horizon=8, batch=64, variate_subsample=30, seed=5):
        assert len(np.unique(b.variate_ids)) == 30


def test_subsample_too_large_is_config_error():
    ds = _dataset(n=4, t=400)
    with pytest.raises(ConfigError):
        next(D.window_iter(ds, (0, 400), 96, 8, batch=8, variate_subsample=5))


def test_fixed_seed_reproduces_batches():
    ds = _dataset(n=8, t=300, seed=2)

    def run():
        out = []
        for b in D.window_iter(ds, (0, 300), 64, 8, batch=16, variate_subsample=3, seed=9):
            out.append((b.variate_ids.copy(), b.origins.copy()))
        return out

    a, b = run(), run()
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))


def test_shuffle_is_permutation_of_full_pass():
    ds = _dataset(n=2, t=150)
    plain = [
        (int(v), int(t))
        for b in D.window_iter(ds, (0, 150), 32, 8, batch=10)
        for v, t in zip(b.variate_ids, b.origins)
    ]
    shuffled = [
        (int(v), int(t))
        for b in D.window_iter(ds, (0, 150), 32, 8, batch=10, shuffle=True, seed=4)
        for v, t in zip(b.variate_ids, b.origins)
    ]
    assert sorted(plain) == sorted(shuffled)
    assert plain != shuffled


# ---------------------------------------------------------------------------
# standardize / synthetic
# ---------------------------------------------------------------------------


def test_standardize_uses_train_stats_only():
    ds = _dataset(n=2, t=500, seed=7)
    ds.values[:, 400:] += 10.0  # regime shift outside the train split
    std_ds, mean, std = D.standardize(ds, train_end=400)
    train_part = std_ds.values[:, :400]
    assert np.allclose(train_part.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(train_part.std(axis=1), 1.0, atol=1e-12)
    assert np.allclose(std_ds.values * std[:, None] + mean[:, None], ds.values)


def test_synthetic_sines_shape_and_determinism():
    a = D.synthetic_sines(n_series=4, t_total=1000, seed=11)
    b = D.synthetic_sines(n_series=4, t_total=1000, seed=11)
    assert a.values.shape == (4, 1000)
    assert np.array_equal(a.values, b.values)
