"""Evaluation protocols, experiment grids and report emission."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import (
    DATASETS,
    RawSeries,
    SplitData,
    SyntheticSpec,
    gen_synthetic,
    load_csv,
    make_windows,
    split_and_scale,
)
from .errors import DataError, StlError, UsageError
from .models import ROUTES, Forecaster, ModelConfig, make_model
from .train import TrainConfig, predict, train

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("variant", "dataset", "T", "tau", "seed", "mse", "mae")
BEST_T_GRID = (24, 48, 96, 192, 336, 504)
SCARCE_TAU_GRID = (24, 36, 48, 72, 96, 120, 144, 168, 192, 336)
ABLATION_VARIANTS = ("stl", "core+spatial", "core", "linear")


def evaluate(
    model: Forecaster,
    windows,
    raw_scale: bool = False,
    scaler=None,
    batch_size: int = 256,
) -> tuple[float, float]:
    """Test (MSE, MAE) over every window, channel and horizon step.

    Metrics are on the standardized scale unless ``raw_scale`` is set, in
    which case predictions and targets are mapped back through ``scaler``.
    """
    if len(windows) == 0:
        raise DataError("cannot evaluate on an empty test set")
    pred, tgt = predict(model, windows, batch_size)
    if raw_scale:
        if scaler is None:
            raise UsageError("raw-scale metrics need the fitted scaler")
        pred, tgt = scaler.inverse(pred), scaler.inverse(tgt)
    diff = pred - tgt
    return float(np.mean(diff * diff)), float(np.mean(np.abs(diff)))


# --------------------------------------------------------------------------
# Experiment specification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    """Where a series comes from and how it is split."""

    name: str
    path: str | None = None
    synthetic: SyntheticSpec | None = None
    ratio: tuple[float, float, float] = (6, 2, 2)
    components: tuple[str, ...] = ("month", "date", "weekday", "hour")
    columns: tuple[str, ...] | None = None

    def load(self) -> RawSeries:
        if self.synthetic is not None:
            return gen_synthetic(self.synthetic)
        if self.path is None:
            raise DataError(f"dataset {self.name!r} has neither a path nor a synthetic spec")
        return load_csv(self.path, self.columns)

    @classmethod
    def preset(cls, name: str, path: str | None = None) -> "DatasetSpec":
        info = DATASETS[name]
        return cls(name, path=path, ratio=info.ratio, components=info.components)


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: DatasetSpec
    model: ModelConfig  # template; T, tau, C, routes and kind are overridden per cell
    train: TrainConfig
    variants: tuple[str, ...] = ("stl",)
    T_values: tuple[int, ...] = (48,)
    tau_values: tuple[int, ...] = (24,)
    seeds: tuple[int, ...] = (2021,)
    best_T_mode: bool = False
    raw_scale: bool = False
    jobs: int = 1

    def __post_init__(self):
        for key in ("variants", "T_values", "tau_values", "seeds"):
            if not getattr(self, key):
                raise UsageError(f"experiment grid {key} is empty")

    def cells(self) -> list[tuple[str, int, int, int]]:
        return [
            (v, T, tau, s)
            for v in self.variants
            for T in self.T_values
            for tau in self.tau_values
            for s in self.seeds
        ]


def variant_config(
    name: str,
    template: ModelConfig,
    T: int,
    tau: int,
    C: int,
    components: Sequence[str] | None = None,
) -> ModelConfig:
    """Config for a named variant: ``stl``, a ``+``-joined route set, or a baseline kind.

    Without date-time components (trajectory data) the temporal route is dropped.
    """
    comps = template.datetime_components if components is None else tuple(components)
    if name in ("linear", "dlinear", "nlinear"):
        return template.replace(T=T, tau=tau, C=C, kind=name, routes=("core",), datetime_components=comps)
    routes = ROUTES if name == "stl" else tuple(name.split("+"))
    if not comps:
        routes = tuple(r for r in routes if r != "temporal") or ("core",)
    return template.replace(T=T, tau=tau, C=C, kind="stl", routes=routes, datetime_components=comps)


@dataclass
class ReportRow:
    variant: str
    dataset: str
    T: int
    tau: int
    seed: int | str
    mse: float
    mae: float
    status: str = "ok"
    error: str = ""

    def key(self):
        return (self.variant, self.dataset, self.T, self.tau, self.seed)


@dataclass
class MetricsReport:
    rows: list[ReportRow] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def ok_rows(self) -> list[ReportRow]:
        return [r for r in self.rows if r.status == "ok"]

    def failed(self) -> list[ReportRow]:
        return [r for r in self.rows if r.status != "ok"]

    def aggregate(self) -> list[ReportRow]:
        """Seed-averaged rows per (variant, dataset, T, tau)."""
        groups: dict[tuple, list[ReportRow]] = {}
        for r in self.ok_rows():
            groups.setdefault((r.variant, r.dataset, r.T, r.tau), []).append(r)
        return [
            ReportRow(v, d, T, tau, "mean", float(np.mean([r.mse for r in rs])), float(np.mean([r.mae for r in rs])))
            for (v, d, T, tau), rs in groups.items()
        ]

    def best_T(self) -> list[ReportRow]:
        """Per (variant, dataset, tau): the seed-averaged row with the smallest MSE over T."""
        best: dict[tuple, ReportRow] = {}
        for r in self.aggregate():
            k = (r.variant, r.dataset, r.tau)
            if k not in best or r.mse < best[k].mse:
                best[k] = r
        return list(best.values())


def _config_hash(spec: ExperimentSpec) -> str:
    blob = json.dumps(_spec_dict(spec), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _spec_dict(spec: ExperimentSpec) -> dict:
    d = asdict(spec)
    d["model"] = spec.model.to_dict()
    return d


def commit_id() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).resolve().parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


_SERIES_CACHE: dict[DatasetSpec, RawSeries] = {}


def _series(ds: DatasetSpec) -> RawSeries:
    if ds not in _SERIES_CACHE:
        _SERIES_CACHE[ds] = ds.load()
    return _SERIES_CACHE[ds]


def prepare(ds: DatasetSpec, T: int, tau: int) -> tuple[SplitData, dict]:
    split = split_and_scale(_series(ds), ds.ratio, ds.components, min_rows=T + tau)
    windows = {k: make_windows(seg, T, tau) for k, seg in split.segments().items()}
    return split, windows


@dataclass
class CellResult:
    row: ReportRow
    model: Forecaster | None = None
    history: list = field(default_factory=list)


def run_cell(
    spec: ExperimentSpec,
    variant: str,
    T: int,
    tau: int,
    seed: int,
    keep_model: bool = False,
    log_path=None,
    strict: bool = False,
) -> CellResult:
    """Train and test one grid cell.

    Errors are caught into a failed row unless ``strict`` is set.
    """
    try:
        split, win = prepare(spec.dataset, T, tau)
        cfg = variant_config(variant, spec.model, T, tau, len(split.channel_names), spec.dataset.components)
        model = make_model(cfg, seed)
        result = train(model, win["train"], replace(spec.train, seed=seed), win["val"], log_path=log_path)
        mse, mae = evaluate(model, win["test"], spec.raw_scale, split.scaler)
        row = ReportRow(variant, spec.dataset.name, T, tau, seed, mse, mae)
        return CellResult(row, model if keep_model else None, result.history_dicts())
    except (StlError, ValueError, ArithmeticError) as exc:
        if strict:
            raise
        log.warning("cell %s T=%d tau=%d seed=%d failed: %s", variant, T, tau, seed, exc)
        row = ReportRow(variant, spec.dataset.name, T, tau, seed, math.nan, math.nan, "failed", str(exc))
        return CellResult(row)


def _run_cell_row(args) -> ReportRow:
    spec, cell = args
    return run_cell(spec, *cell).row


def run_grid(spec: ExperimentSpec) -> MetricsReport:
    """Every (variant, T, tau, seed) cell. Failed cells are reported, not raised."""
    cells = spec.cells()
    if spec.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            rows = list(pool.map(_run_cell_row, [(spec, c) for c in cells]))
    else:
        rows = [run_cell(spec, *c).row for c in cells]
    provenance = {
        "config_hash": _config_hash(spec),
        "commit": commit_id(),
        "best_T_mode": spec.best_T_mode,
        "dataset": spec.dataset.name,
    }
    return MetricsReport(rows, provenance)


def best_T_spec(spec: ExperimentSpec) -> ExperimentSpec:
    return replace(spec, T_values=BEST_T_GRID, best_T_mode=True)


def scarce_spec(spec: ExperimentSpec) -> ExperimentSpec:
    return replace(spec, T_values=(48,), tau_values=SCARCE_TAU_GRID, best_T_mode=False)


def ablation_spec(spec: ExperimentSpec) -> ExperimentSpec:
    return replace(spec, variants=ABLATION_VARIANTS, T_values=(48,), tau_values=SCARCE_TAU_GRID, best_T_mode=False)


# --------------------------------------------------------------------------
# Report output
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else format(v, ".17g")
    return str(v)


def report_view(report: MetricsReport, view: str = "rows") -> list[ReportRow]:
    if view == "rows":
        return list(report.rows)
    if view == "mean":
        return report.aggregate()
    if view == "best_T":
        return report.best_T()
    raise UsageError(f"unknown report view {view!r}")


def report_csv(rows: Iterable[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS + ("status",))
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS] + [r.status])
    return buf.getvalue()


def report_markdown(rows: Sequence[ReportRow]) -> str:
    """Markdown table; the lowest MSE among variants at each (T, tau) is bolded."""
    best: dict[tuple, float] = {}
    for r in rows:
        if r.status == "ok":
            k = (r.dataset, r.T, r.tau)
            best[k] = min(best.get(k, math.inf), r.mse)
    lines = [
        "| " + " | ".join(REPORT_COLUMNS) + " |",
        "|" + "|".join("---" for _ in REPORT_COLUMNS) + "|",
    ]
    for r in rows:
        if r.status != "ok":
            mse, mae = "failed", "failed"
        else:
            mse, mae = f"{r.mse:.3f}", f"{r.mae:.3f}"
            if r.mse == best[(r.dataset, r.T, r.tau)]:
                mse = f"**{mse}**"
        lines.append(f"| {r.variant} | {r.dataset} | {r.T} | {r.tau} | {r.seed} | {mse} | {mae} |")
    return "\n".join(lines) + "\n"


def emit_report(report: MetricsReport, path, fmt: str = "csv", view: str = "rows") -> Path:
    rows = report_view(report, view)
    if fmt == "csv":
        text = report_csv(rows)
    elif fmt == "markdown":
        text = report_markdown(rows)
    else:
        raise UsageError(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot write report to {path}: {exc.strerror}") from exc
    return path


def read_report_csv(path) -> list[ReportRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            seed = rec["seed"]
            rows.append(
                ReportRow(
                    rec["variant"], rec["dataset"], int(rec["T"]), int(rec["tau"]),
                    int(seed) if seed.lstrip("-").isdigit() else seed,
                    float(rec["mse"]) if rec["mse"] else math.nan,
                    float(rec["mae"]) if rec["mae"] else math.nan,
                    rec.get("status", "ok"),
                )
            )
    return rows


def accuracy_curves(rows: Sequence[ReportRow], x: str = "tau") -> str:
    """CSV of 1/MSE per variant against ``x`` ("tau" or "T"), seed-averaged.

    A zero MSE is written as ``inf``; a missing cell is left blank.
    """
    if x not in ("tau", "T"):
        raise UsageError(f"x must be 'tau' or 'T', got {x!r}")
    if not rows:
        raise UsageError("no report rows to plot")
    variants = list(dict.fromkeys(r.variant for r in rows))
    acc: dict[tuple, list[float]] = {}
    for r in rows:
        if r.status == "ok":
            acc.setdefault((getattr(r, x), r.variant), []).append(r.mse)
    xs = sorted({getattr(r, x) for r in rows})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([x] + variants)
    for xv in xs:
        line = [xv]
        for v in variants:
            vals = acc.get((xv, v))
            if not vals:
                line.append("")
            else:
                m = float(np.mean(vals))
                line.append("inf" if m == 0 else format(1.0 / m, ".17g"))
        w.writerow(line)
    return buf.getvalue()


def trace_csv(observed: np.ndarray, future: np.ndarray, predictions: dict[str, np.ndarray]) -> str:
    """Per-variable trace: ground truth over T + tau steps, each variant over the last tau."""
    observed, future = np.asarray(observed).ravel(), np.asarray(future).ravel()
    T, tau = len(observed), len(future)
    for name, p in predictions.items():
        if np.asarray(p).ravel().shape != (tau,):
            raise UsageError(f"prediction {name!r} must have {tau} steps")
    truth = np.concatenate([observed, future])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "ground_truth"] + list(predictions))
    for t in range(T + tau):
        line = [t, format(truth[t], ".17g")]
        for p in predictions.values():
            line.append("" if t < T else format(float(np.asarray(p).ravel()[t - T]), ".17g"))
        w.writerow(line)
    return buf.getvalue()


def plot_series(source, path=None, x: str = "tau", **trace_kwargs) -> str:
    """1/MSE curves from a report (or rows), or a trace when given arrays.

    Writes the CSV to ``path`` when set and returns the text either way.
    """
    if isinstance(source, MetricsReport):
        text = accuracy_curves(source.rows, x)
    elif isinstance(source, (list, tuple)) and (not source or isinstance(source[0], ReportRow)):
        text = accuracy_curves(list(source), x)
    elif isinstance(source, dict):
        text = trace_csv(source["observed"], source["future"], source["predictions"])
    else:
        raise UsageError(f"cannot plot {type(source).__name__}")
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    return text


def write_manifest(spec: ExperimentSpec, path, extra: dict | None = None) -> Path:
    from . import __version__

    doc = {"spec": _spec_dict(spec), "version": __version__, "commit": commit_id()}
    doc.update(extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str), encoding="utf-8")
    return path
