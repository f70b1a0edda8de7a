import datetime as dt
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stl_forecast.data import (
    Lag,
    RawSeries,
    Scaler,
    Spike,
    SyntheticSpec,
    default_synthetic_spec,
    extract_stamps,
    gen_synthetic,
    load_csv,
    make_windows,
    split_and_scale,
    split_lengths,
    write_csv,
)
from stl_forecast.errors import ConfigError, DataError

ETT_HEADER = "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT"


def hourly(n, start="2016-07-01T00:00:00"):
    return np.datetime64(start, "s") + np.arange(n).astype("timedelta64[h]")


def series(values, start="2016-07-01T00:00:00"):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return RawSeries(hourly(len(values), start), values, [f"c{i}" for i in range(values.shape[1])])


# -- load_csv -------------------------------------------------------------


def test_load_small_file(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("date,a,b\n2016-07-01 00:00:00,1,2\n2016-07-01 01:00:00,3,4\n2016-07-01 02:00:00,5,6\n")
    s = load_csv(p)
    assert len(s) == 3 and s.values.shape == (3, 2)
    assert s.channel_names == ["a", "b"]
    assert s.interval == 3600


def test_load_gap_names_row(tmp_path):
    p = tmp_path / "gap.csv"
    p.write_text("date,a\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,2\n2016-07-01 03:00:00,3\n")
    with pytest.raises(DataError, match="row 3"):
        load_csv(p)


def test_load_ett_header(tmp_path):
    p = tmp_path / "ETTh1.csv"
    rows = [ETT_HEADER] + [f"2016-07-01 {h:02d}:00:00," + ",".join(str(h + k) for k in range(7)) for h in range(5)]
    p.write_text("\n".join(rows) + "\n")
    s = load_csv(p)
    assert s.values.shape[1] == 7
    assert s.interval == 3600
    assert s.channel_names[-1] == "OT"
    assert load_csv(p, ["OT", "HUFL"]).values[:, 0].tolist() == [6.0, 7.0, 8.0, 9.0, 10.0]


def test_load_parse_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("date,a\n2016-07-01 00:00:00,1\nnot a date,2\n")
    with pytest.raises(DataError, match="row 2"):
        load_csv(p)
    p.write_text("date,a\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,x\n")
    with pytest.raises(DataError, match="row 2"):
        load_csv(p)
    p.write_text("date,a\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,\n")
    with pytest.raises(DataError, match="row 2"):
        load_csv(p)
    with pytest.raises(DataError, match="nope.csv"):
        load_csv(tmp_path / "nope.csv")


def test_load_duplicate_and_frame_index(tmp_path):
    p = tmp_path / "dup.csv"
    p.write_text("date,a\n2016-07-01 00:00:00,1\n2016-07-01 00:00:00,2\n")
    with pytest.raises(DataError):
        load_csv(p)
    p.write_text("frame,x,y\n0,1,2\n1,3,4\n2,5,6\n")
    s = load_csv(p)
    assert not s.is_calendar and s.interval == 1


def test_csv_round_trip(tmp_path):
    s = gen_synthetic(SyntheticSpec(L=30, C=3, sigma=0.3, seed=4))
    back = load_csv(write_csv(s, tmp_path / "s.csv"))
    np.testing.assert_array_equal(back.values, s.values)
    np.testing.assert_array_equal(back.timestamps, s.timestamps)


# -- stamps ---------------------------------------------------------------


def test_stamp_calendar_lookup():
    code = extract_stamps(np.array(["2016-07-01T00:00:00"], dtype="datetime64[s]"), ("weekday", "hour", "date", "month"), 3600)
    assert code.tolist() == [[4, 0, 0, 6]]


@settings(max_examples=60, deadline=None)
@given(st.datetimes(min_value=dt.datetime(1971, 1, 1), max_value=dt.datetime(2099, 12, 31)))
def test_stamps_match_stdlib_calendar(when):
    ts = np.array([np.datetime64(when.replace(microsecond=0), "s")])
    code = extract_stamps(ts, ("month", "date", "weekday", "hour", "minute"), 900)[0]
    assert code.tolist() == [when.month - 1, when.day - 1, when.weekday(), when.hour, when.minute // 15]


def test_minute_bins_advance():
    ts = np.datetime64("2020-01-01T10:00", "s") + np.arange(6) * np.timedelta64(15, "m")
    bins = extract_stamps(ts, ("minute",))[:, 0]
    assert np.all((np.diff(bins) % 4) == 1)


def test_hourly_minute_request_rejected():
    with pytest.raises(ConfigError):
        extract_stamps(hourly(4), ("hour", "minute"))


def test_frame_index_components_rejected():
    with pytest.raises(ConfigError):
        extract_stamps(np.arange(4), ("hour",))


# -- splitting and scaling ------------------------------------------------


def test_split_lengths_example():
    assert split_lengths(10, (6, 2, 2)) == (6, 2, 2)
    assert sum(split_lengths(17420, (5, 1, 4))) == 17420


def test_zscore_example():
    sc = Scaler(np.array([5.0]), np.array([2.0]))
    assert sc.transform(np.array([[9.0]])).tolist() == [[2.0]]


def test_constant_channel_zero_with_warning():
    vals = np.stack([np.full(10, 3.0), np.arange(10.0)], axis=1)
    with pytest.warns(UserWarning, match="c0"):
        sp = split_and_scale(series(vals), (6, 2, 2))
    assert np.all(sp.train.values[:, 0] == 0) and np.all(sp.test.values[:, 0] == 0)


def test_split_is_chronological():
    sp = split_and_scale(series(np.arange(10.0)), (6, 2, 2), ("hour",))
    assert [len(s) for s in sp.segments().values()] == [6, 2, 2]
    assert [s.start for s in sp.segments().values()] == [0, 6, 8]
    assert sp.val.timestamps[0] == sp.train.timestamps[-1] + np.timedelta64(1, "h")


def test_split_too_small():
    with pytest.raises(DataError, match="val"):
        split_and_scale(series(np.arange(10.0)), (6, 2, 2), min_rows=3)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (20, 3), elements=st.floats(-1e3, 1e3)))
def test_scaler_round_trip(x):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sc = Scaler.fit(x)
    back = sc.inverse(sc.transform(x))
    ok = sc.std > 0
    np.testing.assert_allclose(back[:, ok], x[:, ok], atol=1e-10 * max(1.0, np.abs(x).max()))


def test_no_leakage_from_val_and_test():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(50, 2))
    a = split_and_scale(series(vals), (6, 2, 2))
    vals2 = vals.copy()
    vals2[30:] = rng.normal(size=(20, 2)) * 100
    b = split_and_scale(series(vals2), (6, 2, 2))
    np.testing.assert_array_equal(a.scaler.mean, b.scaler.mean)
    np.testing.assert_array_equal(a.scaler.std, b.scaler.std)


def test_manifest_pins_pipeline():
    sp = split_and_scale(series(np.arange(20.0)), (6, 2, 2), ("hour",))
    doc = json.loads(sp.manifest_json())
    assert doc["rows"] == 20 and doc["channels"] == 1 and doc["interval"] == 3600
    assert doc["splits"]["val"] == {"start": 12, "rows": 4}
    assert doc["scaler"]["mean"] == [5.5]


# -- windows --------------------------------------------------------------


def test_window_count_and_first_window():
    sp = split_and_scale(series(np.arange(10.0)), (1, 0, 0), ("hour",), min_rows=0)
    w = make_windows(sp.train, 3, 2)
    assert len(w) == 6
    first = w[0]
    np.testing.assert_array_equal(first.obs[:, 0], sp.train.values[0:3, 0])
    np.testing.assert_array_equal(first.target[:, 0], sp.train.values[3:5, 0])


def test_window_too_short():
    sp = split_and_scale(series(np.arange(5.0)), (1, 0, 0), min_rows=0)
    with pytest.raises(DataError):
        make_windows(sp.train, 3, 3)


def test_window_stride():
    sp = split_and_scale(series(np.arange(10.0)), (1, 0, 0), min_rows=0)
    assert len(make_windows(sp.train, 3, 2, stride=2)) == 3


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 30))
def test_window_stamp_alignment(T, tau, offset):
    n = 40
    sp = split_and_scale(series(np.sin(np.arange(n)), start=f"2016-07-01T{offset % 24:02d}:00:00"), (1, 0, 0), ("hour",), min_rows=0)
    w = make_windows(sp.train, T, tau)
    obs, tgt, ost, tst = w.batch(np.arange(len(w)))
    assert obs.shape == (len(w), T, 1) and tgt.shape == (len(w), tau, 1)
    for i in range(len(w)):
        to, tt = w.times(i)
        assert tt[0] - to[-1] == np.timedelta64(1, "h")
    assert np.all(tst[:, 0, 0] == (ost[:, -1, 0] + 1) % 24)


def test_windows_stay_inside_segment():
    sp = split_and_scale(series(np.arange(100.0)), (6, 2, 2), ("hour",))
    for seg in sp.segments().values():
        w = make_windows(seg, 5, 3)
        assert w.starts[-1] + 8 == len(seg)


# -- synthetic ------------------------------------------------------------


def test_synthetic_pure_sinusoid():
    s = gen_synthetic(SyntheticSpec(L=200, C=1, sigma=0.0))
    assert np.max(np.abs(s.values)) == 1.0
    np.testing.assert_allclose(s.values[:, 0], np.sin(2 * np.pi * np.arange(200) / 24), atol=1e-12)


def test_synthetic_lag_relation_exact():
    s = gen_synthetic(SyntheticSpec(L=100, C=2, lags=(Lag(1, 0, 3, 2.0),), sigma=0.0, spike=Spike()))
    np.testing.assert_array_equal(s.values[3:, 1], 2.0 * s.values[:-3, 0])


def test_synthetic_chained_lags():
    spec = SyntheticSpec(L=80, C=3, lags=(Lag(2, 1, 5, -0.5), Lag(1, 0, 0, 1.5)), sigma=0.0)
    s = gen_synthetic(spec)
    np.testing.assert_array_equal(s.values[:, 1], 1.5 * s.values[:, 0])
    np.testing.assert_array_equal(s.values[5:, 2], -0.5 * s.values[:-5, 1])


def test_synthetic_deterministic_and_seeded():
    spec = default_synthetic_spec(7)
    a, b = gen_synthetic(spec), gen_synthetic(spec)
    assert a.values.tobytes() == b.values.tobytes()
    c = gen_synthetic(default_synthetic_spec(8))
    assert a.values.tobytes() != c.values.tobytes()


def test_synthetic_spike_on_weekday_hours():
    s = gen_synthetic(SyntheticSpec(L=24 * 14, C=1, sigma=0.0, spike=Spike((0,), (9,), 2.0)))
    base = np.sin(2 * np.pi * np.arange(24 * 14) / 24)
    code = extract_stamps(s.timestamps, ("weekday", "hour"))
    on = (code[:, 0] == 0) & (code[:, 1] == 9)
    np.testing.assert_allclose(s.values[:, 0] - base, 2.0 * on, atol=1e-12)
    assert on.sum() == 2


def test_synthetic_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(lags=(Lag(1, 0, 24),), period=24)
    with pytest.raises(ConfigError):
        SyntheticSpec(sigma=-1.0)
    with pytest.raises(ConfigError):
        SyntheticSpec(C=2, lags=(Lag(1, 0, 1), Lag(1, 0, 2)))
    with pytest.raises(ConfigError):
        gen_synthetic(SyntheticSpec(C=3, lags=(Lag(1, 2, 1), Lag(2, 1, 1))))


def test_default_synthetic_benchmark_shape():
    s = gen_synthetic(default_synthetic_spec())
    assert s.values.shape == (4000, 4) and s.interval == 3600
