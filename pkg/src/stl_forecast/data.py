"""Series ingestion, calendar stamps, chronological splits and windowing."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Rng
from .errors import ConfigError, DataError
from .layers import COMPONENT_CARDINALITY

MINUTE_BIN = 15

# Finest sampling interval (seconds) at which each component still varies.
_COMPONENT_RESOLUTION = {
    "month": 28 * 86400,
    "date": 86400,
    "weekday": 86400,
    "hour": 3600,
    "minute": MINUTE_BIN * 60,
}


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    channels: int
    steps: int
    interval: str
    ratio: tuple[int, int, int]
    components: tuple[str, ...]


DATASETS = {
    "electricity": DatasetInfo("electricity", 321, 26304, "1h", (6, 2, 2), ("month", "date", "weekday", "hour")),
    "etth1": DatasetInfo("etth1", 7, 17420, "1h", (6, 2, 2), ("month", "date", "weekday", "hour")),
    "ettm1": DatasetInfo("ettm1", 7, 69680, "15min", (7, 1, 2), ("month", "date", "weekday", "hour", "minute")),
    "weather": DatasetInfo("weather", 21, 52696, "1h", (5, 1, 4), ("month", "date", "weekday", "hour")),
    "jaad": DatasetInfo("jaad", 4, 2800, "frame", (7, 1, 2), ()),
}


@dataclass
class RawSeries:
    """Uniformly sampled multivariate series.

    ``timestamps`` is ``datetime64[s]`` for calendar data or ``int64`` frame
    indices for trajectory data.
    """

    timestamps: np.ndarray
    values: np.ndarray
    channel_names: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"values must be (L, C), got shape {self.values.shape}")
        if len(self.timestamps) != self.values.shape[0]:
            raise DataError(f"{len(self.timestamps)} timestamps for {self.values.shape[0]} rows")
        if len(self.channel_names) != self.values.shape[1]:
            raise DataError(f"{len(self.channel_names)} channel names for {self.values.shape[1]} columns")
        if not np.all(np.isfinite(self.values)):
            raise DataError("series contains missing or non-finite cells")
        _check_uniform(self.timestamps)

    @property
    def is_calendar(self) -> bool:
        return np.issubdtype(self.timestamps.dtype, np.datetime64)

    @property
    def interval(self) -> int:
        """Sampling interval in seconds (calendar) or frames (index)."""
        if len(self.timestamps) < 2:
            return 0
        d = self.timestamps[1] - self.timestamps[0]
        return int(d / np.timedelta64(1, "s")) if self.is_calendar else int(d)

    def __len__(self):
        return self.values.shape[0]


def _check_uniform(ts: np.ndarray) -> None:
    if len(ts) < 2:
        return
    steps = np.diff(ts)
    step = steps[0]
    zero = np.timedelta64(0, "s") if np.issubdtype(ts.dtype, np.datetime64) else 0
    if step <= zero:
        raise DataError("timestamps must be strictly increasing (row 2)")
    bad = np.nonzero(steps != step)[0]
    if bad.size:
        row = int(bad[0]) + 2  # 1-based data row of the offending timestamp
        raise DataError(f"non-uniform interval at data row {row}: {ts[row - 2]} -> {ts[row - 1]}")


def _parse_stamp(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return np.datetime64(text.replace(" ", "T"), "s")
    except ValueError:
        return None


def load_csv(path, columns: Sequence[str] | None = None) -> RawSeries:
    """Read ``time,<channel>,...`` CSV.

    The first column holds ISO-like timestamps (``YYYY-MM-DD HH:MM:SS``) or
    integer frame indices. ``columns`` optionally selects channels by name.
    Errors name the 1-based data row (header excluded).
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open dataset {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        names = [h.strip() for h in header[1:]]
        if not names:
            raise DataError(f"{path} has no value columns")
        stamps, rows = [], []
        kind = None
        for i, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"row {i}: expected {len(header)} fields, got {len(rec)}")
            st = _parse_stamp(rec[0])
            if st is None:
                raise DataError(f"row {i}: cannot parse timestamp {rec[0]!r}")
            this_kind = "index" if isinstance(st, int) else "calendar"
            if kind is None:
                kind = this_kind
            elif kind != this_kind:
                raise DataError(f"row {i}: mixed timestamp kinds")
            try:
                rows.append([float(c) for c in rec[1:]])
            except ValueError:
                raise DataError(f"row {i}: non-numeric value in {rec[1:]}") from None
            stamps.append(st)
    if not rows:
        raise DataError(f"{path} has no data rows")
    ts = np.array(stamps, dtype="int64" if kind == "index" else "datetime64[s]")
    values = np.array(rows)
    if columns is not None:
        missing = [c for c in columns if c not in names]
        if missing:
            raise DataError(f"{path} lacks columns {missing}")
        sel = [names.index(c) for c in columns]
        values, names = values[:, sel], list(columns)
    return RawSeries(ts, values, names)


def write_csv(series: RawSeries, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date" if series.is_calendar else "frame"] + list(series.channel_names))
        for t, row in zip(series.timestamps, series.values):
            stamp = str(t).replace("T", " ") if series.is_calendar else str(int(t))
            w.writerow([stamp] + [repr(float(v)) for v in row])
    return path


# --------------------------------------------------------------------------
# Calendar stamps
# --------------------------------------------------------------------------


def extract_stamps(timestamps: np.ndarray, components: Sequence[str], interval: int | None = None) -> np.ndarray:
    """Integer codes ``(L, K)``, one column per component in the given order.

    month 0-11, date 0-30, weekday 0-6 (Monday = 0), hour 0-23, minute bin
    0-3. ``interval`` (seconds) defaults to the spacing of ``timestamps``.
    """
    components = tuple(components)
    ts = np.asarray(timestamps)
    unknown = [c for c in components if c not in COMPONENT_CARDINALITY]
    if unknown:
        raise ConfigError(f"unsupported date-time components {unknown}")
    if not components:
        return np.zeros((len(ts), 0), dtype=np.int64)
    if not np.issubdtype(ts.dtype, np.datetime64):
        raise ConfigError(f"components {list(components)} need calendar timestamps, got frame indices")
    ts = ts.astype("datetime64[s]")
    if interval is None and len(ts) > 1:
        interval = int((ts[1] - ts[0]) / np.timedelta64(1, "s"))
    if interval:
        coarse = [c for c in components if interval > _COMPONENT_RESOLUTION[c]]
        if coarse:
            raise ConfigError(f"interval of {interval}s is coarser than components {coarse}")

    month_start = ts.astype("datetime64[M]")
    day_start = ts.astype("datetime64[D]")
    cols = {
        "month": month_start.astype(np.int64) % 12,
        "date": (day_start - month_start.astype("datetime64[D]")).astype(np.int64),
        # 1970-01-01 was a Thursday (3 with Monday = 0).
        "weekday": (day_start.astype(np.int64) + 3) % 7,
        "hour": ((ts - day_start) // np.timedelta64(1, "h")).astype(np.int64),
        "minute": (((ts - day_start) // np.timedelta64(1, "m")).astype(np.int64) % 60) // MINUTE_BIN,
    }
    return np.stack([cols[c] for c in components], axis=-1).astype(np.int64)


# --------------------------------------------------------------------------
# Splits, scaling, windows
# --------------------------------------------------------------------------


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        safe = np.where(self.std == 0, 1.0, self.std)
        return np.where(self.std == 0, 0.0, (x - self.mean) / safe)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    @classmethod
    def fit(cls, x: np.ndarray, names: Sequence[str] = ()) -> "Scaler":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        flat = np.nonzero(std == 0)[0]
        if flat.size:
            label = [names[i] if i < len(names) else i for i in flat]
            warnings.warn(f"constant training channels {label} scaled to zeros", stacklevel=3)
        return cls(mean, std)


@dataclass
class Segment:
    name: str
    values: np.ndarray  # standardized (n, C)
    timestamps: np.ndarray
    stamps: np.ndarray  # (n, K)
    start: int  # row offset in the raw series

    def __len__(self):
        return self.values.shape[0]


@dataclass
class SplitData:
    train: Segment
    val: Segment
    test: Segment
    scaler: Scaler
    components: tuple[str, ...]
    channel_names: list[str]
    interval: int
    total_rows: int

    def segments(self) -> dict[str, Segment]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def manifest(self) -> dict:
        return {
            "rows": self.total_rows,
            "channels": len(self.channel_names),
            "channel_names": list(self.channel_names),
            "interval": self.interval,
            "components": list(self.components),
            "splits": {k: {"start": s.start, "rows": len(s)} for k, s in self.segments().items()},
            "scaler": {
                "mean": [float(v) for v in self.scaler.mean],
                "std": [float(v) for v in self.scaler.std],
            },
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), indent=2, sort_keys=True)


def split_lengths(total: int, ratio: Sequence[float]) -> tuple[int, int, int]:
    if len(ratio) != 3 or any(r < 0 for r in ratio) or ratio[0] <= 0 or sum(ratio) <= 0:
        raise ConfigError(f"split ratio must be three non-negative parts with train > 0, got {ratio}")
    s = float(sum(ratio))
    n_train = int(math.floor(total * ratio[0] / s + 1e-9))
    n_val = int(math.floor(total * ratio[1] / s + 1e-9))
    return n_train, n_val, total - n_train - n_val


def split_and_scale(
    series: RawSeries,
    ratio: Sequence[float] = (6, 2, 2),
    components: Sequence[str] = (),
    min_rows: int = 1,
) -> SplitData:
    """Chronological train/val/test split, z-scored with train statistics.

    ``min_rows`` is the smallest acceptable segment (e.g. ``T + tau``).
    """
    n_train, n_val, n_test = split_lengths(len(series), ratio)
    for name, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        if n < min_rows:
            raise DataError(f"{name} segment has {n} rows, fewer than the {min_rows} needed for one window")
    scaler = Scaler.fit(series.values[:n_train], series.channel_names)
    z = scaler.transform(series.values)
    stamps = extract_stamps(series.timestamps, components) if components else np.zeros((len(series), 0), np.int64)
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, len(series))}
    segs = {
        k: Segment(k, z[a:b], series.timestamps[a:b], stamps[a:b], a) for k, (a, b) in bounds.items()
    }
    return SplitData(
        segs["train"], segs["val"], segs["test"], scaler, tuple(components),
        list(series.channel_names), series.interval, len(series),
    )


@dataclass
class Window:
    obs: np.ndarray
    target: np.ndarray
    obs_stamps: np.ndarray
    target_stamps: np.ndarray


@dataclass
class WindowedDataset:
    """Stride-``stride`` sliding windows over one segment (views, no copies)."""

    segment: Segment
    T: int
    tau: int
    stride: int = 1
    starts: np.ndarray = field(init=False)

    def __post_init__(self):
        need = self.T + self.tau
        if self.T < 1 or self.tau < 1 or self.stride < 1:
            raise ConfigError(f"T, tau and stride must be >= 1, got {self.T}, {self.tau}, {self.stride}")
        if len(self.segment) < need:
            raise DataError(
                f"{self.segment.name} segment of {len(self.segment)} rows is shorter than T + tau = {need}"
            )
        self.starts = np.arange(0, len(self.segment) - need + 1, self.stride)

    @property
    def split(self) -> str:
        return self.segment.name

    @property
    def channels(self) -> int:
        return self.segment.values.shape[1]

    def __len__(self):
        return len(self.starts)

    def __getitem__(self, i) -> Window:
        s = int(self.starts[i])
        T, e = self.T, self.T + self.tau
        seg = self.segment
        return Window(seg.values[s : s + T], seg.values[s + T : s + e], seg.stamps[s : s + T], seg.stamps[s + T : s + e])

    def times(self, i) -> tuple[np.ndarray, np.ndarray]:
        s = int(self.starts[i])
        ts = self.segment.timestamps
        return ts[s : s + self.T], ts[s + self.T : s + self.T + self.tau]

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Stack windows: obs (B, T, C), target (B, tau, C), stamps (B, *, K)."""
        s = self.starts[np.asarray(indices)]
        obs_idx = s[:, None] + np.arange(self.T)[None, :]
        tgt_idx = s[:, None] + self.T + np.arange(self.tau)[None, :]
        v, st = self.segment.values, self.segment.stamps
        return v[obs_idx], v[tgt_idx], st[obs_idx], st[tgt_idx]


def make_windows(segment: Segment, T: int, tau: int, stride: int = 1) -> WindowedDataset:
    return WindowedDataset(segment, T, tau, stride)


# --------------------------------------------------------------------------
# Synthetic series
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Lag:
    """Channel ``target`` follows ``gain * channel[source](t - lag)``."""

    target: int
    source: int
    lag: int
    gain: float = 1.0


@dataclass(frozen=True)
class Spike:
    """Additive bump on ``weekdays`` (Monday = 0) during ``hours``."""

    weekdays: tuple[int, ...] = (0, 2, 4)
    hours: tuple[int, ...] = (8, 9, 10, 11)
    amplitude: float = 1.5


SYNTH_EPOCH = np.datetime64("2016-07-01T00:00:00", "s")


@dataclass(frozen=True)
class SyntheticSpec:
    L: int = 4000
    C: int = 4
    period: int = 24
    lags: tuple[Lag, ...] = ()
    spike: Spike | None = None
    sigma: float = 0.0
    seed: int = 2021

    def __post_init__(self):
        object.__setattr__(self, "lags", tuple(self.lags))
        if self.L < 1 or self.C < 1 or self.period < 1:
            raise ConfigError("L, C and period must be >= 1")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        targets = [g.target for g in self.lags]
        if len(set(targets)) != len(targets):
            raise ConfigError("each channel may follow at most one source")
        for g in self.lags:
            if not (0 <= g.source < self.C and 0 < g.target < self.C and g.source != g.target):
                raise ConfigError(f"invalid lag {g}")
            if not 0 <= g.lag < self.period:
                raise ConfigError(f"lag {g.lag} must be below the base period {self.period}")


def gen_synthetic(spec: SyntheticSpec) -> RawSeries:
    """Hourly series from a fixed epoch.

    Channel 0, and any channel that follows no source, is a phase-shifted
    sinusoid plus the weekday-hour spike plus noise. A lagged channel is
    ``gain * source(t - lag)`` plus its own noise.
    """
    by_target = {g.target: g for g in spec.lags}

    def depth(c, seen=()):
        if c in seen:
            raise ConfigError(f"lag cycle through channel {c}")
        g = by_target.get(c)
        return 0 if g is None else g.lag + depth(g.source, seen + (c,))

    pad = max((depth(c) for c in range(spec.C)), default=0)
    n = spec.L + pad
    t = np.arange(-pad, spec.L)
    stamps = SYNTH_EPOCH + t.astype("timedelta64[h]")
    rng = Rng(spec.seed)
    noise = rng.normal(n * spec.C, 0.0, 1.0).reshape(spec.C, n) * spec.sigma

    bump = np.zeros(n)
    if spec.spike is not None:
        code = extract_stamps(stamps, ("weekday", "hour"), interval=3600)
        on = np.isin(code[:, 0], spec.spike.weekdays) & np.isin(code[:, 1], spec.spike.hours)
        bump = spec.spike.amplitude * on

    def hops(c):
        g = by_target.get(c)
        return 0 if g is None else 1 + hops(g.source)

    out = np.zeros((spec.C, n))
    for c in sorted(range(spec.C), key=hops):
        g = by_target.get(c)
        if g is None:
            phase = 2 * math.pi * c / spec.C
            out[c] = np.sin(2 * math.pi * t / spec.period + phase) + bump + noise[c]
        else:
            shifted = np.empty(n)
            shifted[g.lag :] = out[g.source, : n - g.lag]
            shifted[: g.lag] = out[g.source, 0]
            out[c] = g.gain * shifted + noise[c]
    names = [f"ch{c}" for c in range(spec.C)]
    return RawSeries(stamps[pad:], out[:, pad:].T.copy(), names)


def default_synthetic_spec(seed: int = 2021) -> SyntheticSpec:
    """The 4-channel benchmark used for ablation checks."""
    return SyntheticSpec(
        L=4000,
        C=4,
        period=24,
        lags=(Lag(1, 0, 3, 2.0), Lag(2, 1, 5, -0.5)),
        spike=Spike(),
        sigma=0.1,
        seed=seed,
    )
