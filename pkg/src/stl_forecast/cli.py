"""``stl`` command line: train, eval, sweep, synth, selfcheck.

Run files are INI documents::

    [dataset]
    name = etth1
    path = data/ETTh1.csv

    [model]
    T = 336
    tau = 24

    [train]
    epochs = 20

    [experiment]
    protocol = scarce

A ``[synthetic]`` section replaces ``path`` with a generated series. Unknown
sections or keys are rejected. When the dataset name (or ``--preset``)
matches a known dataset its tuned hyperparameters fill any key left unset.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numeric abort,
4 self-check failure.
"""
from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import __version__
from .data import DATASETS, Lag, Spike, SyntheticSpec, gen_synthetic, write_csv
from .errors import CheckpointError, ConfigError, DataError, NumericalError, StlError, UsageError
from .harness import (
    ABLATION_VARIANTS,
    BEST_T_GRID,
    SCARCE_TAU_GRID,
    DatasetSpec,
    ExperimentSpec,
    MetricsReport,
    emit_report,
    evaluate,
    plot_series,
    prepare,
    run_cell,
    run_grid,
    write_manifest,
)
from .models import ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig

log = logging.getLogger("stl_forecast")

# Best-configuration hyperparameters per dataset.
PRESETS = {
    "electricity": {"hidden_size": 512, "dropout": 0.0, "lr": 6e-4, "decay": 0.8, "activation": "silu"},
    "etth1": {"hidden_size": 256, "dropout": 0.1, "lr": 2e-4, "decay": 0.75, "activation": "leaky_relu"},
    "ettm1": {"hidden_size": 256, "dropout": 0.25, "lr": 2e-4, "decay": 0.8, "activation": "silu"},
    "weather": {"hidden_size": 512, "dropout": 0.25, "lr": 2e-4, "decay": 0.75, "activation": "silu"},
    "jaad": {"hidden_size": 512, "dropout": 0.0, "lr": 1e-3, "decay": 0.9, "activation": "silu"},
}

SECTION_KEYS = {
    "dataset": {"name", "path", "ratio", "components", "columns", "raw_scale"},
    "synthetic": {"L", "C", "period", "lags", "spike_weekdays", "spike_hours", "spike_amplitude", "sigma", "seed"},
    "model": {
        "T", "tau", "hidden_size", "dropout", "activation", "theta_T", "routes", "variant",
        "per_channel", "ma_kernel", "attn_axis", "d_emb", "gate_init",
    },
    "train": {"lr", "decay", "batch_size", "epochs", "seed", "patience"},
    "experiment": {"T_grid", "tau_grid", "seeds", "best_T_mode", "variants", "protocol", "jobs"},
}

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_SELFCHECK = 1, 2, 3, 4


@dataclass
class RunFile:
    dataset: DatasetSpec
    model: ModelConfig
    train: TrainConfig
    variant: str
    experiment: dict
    raw_scale: bool = False

    def experiment_spec(self, jobs: int | None = None) -> ExperimentSpec:
        ex = self.experiment
        spec = ExperimentSpec(
            dataset=self.dataset,
            model=self.model,
            train=self.train,
            variants=tuple(ex.get("variants") or (self.variant,)),
            T_values=tuple(ex.get("T_grid") or (self.model.T,)),
            tau_values=tuple(ex.get("tau_grid") or (self.model.tau,)),
            seeds=tuple(ex.get("seeds") or (self.train.seed,)),
            best_T_mode=bool(ex.get("best_T_mode", False)),
            raw_scale=self.raw_scale,
            jobs=jobs or int(ex.get("jobs", 1)),
        )
        protocol = ex.get("protocol", "custom")
        if protocol == "best_T":
            spec = replace(spec, T_values=tuple(ex.get("T_grid") or BEST_T_GRID), best_T_mode=True)
        elif protocol == "scarce":
            spec = replace(spec, T_values=(48,), tau_values=tuple(ex.get("tau_grid") or SCARCE_TAU_GRID))
        elif protocol == "ablation":
            spec = replace(
                spec, variants=ABLATION_VARIANTS, T_values=(48,),
                tau_values=tuple(ex.get("tau_grid") or SCARCE_TAU_GRID),
            )
        elif protocol != "custom":
            raise ConfigError(f"unknown protocol {protocol!r} (custom, best_T, scarce, ablation)")
        return spec

    def to_ini(self) -> str:
        """Fully resolved run file that reproduces this run."""
        cp = configparser.ConfigParser()
        cp.optionxform = str
        ds = self.dataset
        cp["dataset"] = {
            "name": ds.name,
            "ratio": ":".join(_num(r) for r in ds.ratio),
            "components": ",".join(ds.components),
            "raw_scale": str(self.raw_scale).lower(),
        }
        if ds.path:
            cp["dataset"]["path"] = ds.path
        if ds.columns:
            cp["dataset"]["columns"] = ",".join(ds.columns)
        if ds.synthetic is not None:
            s = ds.synthetic
            cp["synthetic"] = {
                "L": str(s.L), "C": str(s.C), "period": str(s.period),
                "lags": ",".join(f"{g.target}<-{g.source}:{g.lag}:{g.gain!r}" for g in s.lags),
                "sigma": repr(s.sigma), "seed": str(s.seed),
            }
            if s.spike is not None:
                cp["synthetic"].update({
                    "spike_weekdays": ",".join(map(str, s.spike.weekdays)),
                    "spike_hours": ",".join(map(str, s.spike.hours)),
                    "spike_amplitude": repr(s.spike.amplitude),
                })
        m = self.model
        cp["model"] = {
            "T": str(m.T), "tau": str(m.tau), "hidden_size": str(m.hidden_size), "dropout": repr(m.dropout),
            "activation": m.activation, "theta_T": str(m.theta_T), "routes": ",".join(m.routes),
            "variant": self.variant, "per_channel": str(m.per_channel).lower(), "ma_kernel": str(m.ma_kernel),
            "attn_axis": m.attn_axis, "d_emb": str(m.d_emb), "gate_init": repr(m.gate_init),
        }
        t = self.train
        cp["train"] = {
            "lr": repr(t.lr), "decay": repr(t.decay), "batch_size": str(t.batch_size),
            "epochs": str(t.epochs), "seed": str(t.seed), "patience": str(t.patience),
        }
        ex = {}
        for key, val in self.experiment.items():
            ex[key] = ",".join(map(str, val)) if isinstance(val, (list, tuple)) else str(val).lower() if isinstance(val, bool) else str(val)
        if ex:
            cp["experiment"] = ex
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _num(v) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _ints(text: str) -> tuple[int, ...]:
    out = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _names(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _lags(text: str) -> tuple[Lag, ...]:
    """``target<-source:lag:gain`` items separated by commas."""
    lags = []
    for item in _names(text):
        try:
            head, rest = item.split("<-")
            parts = rest.split(":")
            gain = float(parts[2]) if len(parts) > 2 else 1.0
            lags.append(Lag(int(head), int(parts[0]), int(parts[1]), gain))
        except (ValueError, IndexError):
            raise ConfigError(f"bad lag {item!r}; expected target<-source:lag[:gain]") from None
    return tuple(lags)


def parse_runfile(text: str, preset: str | None = None, seed: int | None = None, base_dir: Path | None = None) -> RunFile:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse run file: {exc}") from exc
    for section in cp.sections():
        if section not in SECTION_KEYS:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(cp[section]) - SECTION_KEYS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    get = lambda sec, key: cp[sec][key] if cp.has_section(sec) and key in cp[sec] else None  # noqa: E731

    try:
        name = (get("dataset", "name") or preset or "custom").lower()
        preset_name = preset or (name if name in PRESETS else None)
        if preset_name is not None and preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
        defaults = PRESETS.get(preset_name, {})
        info = DATASETS.get(preset_name or name)

        synth = None
        if cp.has_section("synthetic"):
            s = cp["synthetic"]
            spike = None
            if any(k in s for k in ("spike_weekdays", "spike_hours", "spike_amplitude")):
                spike = Spike(
                    _ints(s.get("spike_weekdays", "0,2,4")),
                    _ints(s.get("spike_hours", "8-11")),
                    float(s.get("spike_amplitude", "1.5")),
                )
            synth = SyntheticSpec(
                L=int(s.get("L", "4000")), C=int(s.get("C", "4")), period=int(s.get("period", "24")),
                lags=_lags(s.get("lags", "")), spike=spike, sigma=float(s.get("sigma", "0.0")),
                seed=int(s.get("seed", "2021")),
            )
        path = get("dataset", "path")
        if path and base_dir is not None and not Path(path).is_absolute():
            path = str((base_dir / path).resolve())
        if synth is None and not path:
            raise ConfigError("[dataset] needs a path or a [synthetic] section")
        ratio_text = get("dataset", "ratio")
        ratio = tuple(float(r) for r in ratio_text.replace(",", ":").split(":")) if ratio_text else (info.ratio if info else (6, 2, 2))
        comp_text = get("dataset", "components")
        if comp_text is not None:
            components = _names(comp_text)
        elif info is not None:
            components = info.components
        else:
            components = ("month", "date", "weekday", "hour")
        cols = get("dataset", "columns")
        dataset = DatasetSpec(name, path, synth, ratio, components, _names(cols) if cols else None)
        raw_scale = _bool(get("dataset", "raw_scale") or "false")

        def pick(sec, key, cast, fallback):
            v = get(sec, key)
            if v is not None:
                return cast(v)
            return cast(defaults[key]) if key in defaults else fallback

        T = get("model", "T")
        tau = get("model", "tau")
        if T is None or tau is None:
            raise ConfigError("[model] needs T and tau")
        variant = (get("model", "variant") or "stl").strip()
        routes_text = get("model", "routes")
        if routes_text and variant == "stl":
            chosen = set(_names(routes_text))
            if chosen - {"core", "temporal", "spatial"}:
                raise ConfigError(f"unknown routes in {routes_text!r}")
            if chosen != {"core", "temporal", "spatial"}:
                variant = "+".join(r for r in ("core", "temporal", "spatial") if r in chosen)
        model = ModelConfig(
            T=int(T), tau=int(tau), C=1,
            hidden_size=pick("model", "hidden_size", int, 256),
            dropout=pick("model", "dropout", float, 0.0),
            activation=pick("model", "activation", str, "silu"),
            theta_T=pick("model", "theta_T", int, 96),
            datetime_components=components or ("month",),
            per_channel=pick("model", "per_channel", _bool, False),
            ma_kernel=pick("model", "ma_kernel", int, 25),
            attn_axis=pick("model", "attn_axis", str, "rows"),
            d_emb=pick("model", "d_emb", int, 8),
            gate_init=pick("model", "gate_init", float, 1.0),
        )
        train_cfg = TrainConfig(
            lr=pick("train", "lr", float, 1e-3),
            decay=pick("train", "decay", float, 1.0),
            batch_size=pick("train", "batch_size", int, 32),
            epochs=pick("train", "epochs", int, 20),
            seed=seed if seed is not None else pick("train", "seed", int, 2021),
            patience=pick("train", "patience", int, 5),
        )
        ex: dict = {}
        if cp.has_section("experiment"):
            e = cp["experiment"]
            for key, cast in (("T_grid", _ints), ("tau_grid", _ints), ("seeds", _ints), ("variants", _names)):
                if key in e:
                    ex[key] = list(cast(e[key]))
            if "best_T_mode" in e:
                ex["best_T_mode"] = _bool(e["best_T_mode"])
            if "protocol" in e:
                ex["protocol"] = e["protocol"].strip()
            if "jobs" in e:
                ex["jobs"] = int(e["jobs"])
        if seed is not None and "seeds" not in ex:
            ex["seeds"] = [seed]
    except ValueError as exc:
        if isinstance(exc, StlError):
            raise
        raise ConfigError(f"invalid run file value: {exc}") from exc
    return RunFile(dataset, model, train_cfg, variant, ex, raw_scale)


def load_runfile(path, preset=None, seed=None) -> RunFile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read run file {path}: {exc.strerror}") from exc
    return parse_runfile(text, preset, seed, base_dir=path.parent)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    run = load_runfile(args.config, args.preset, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = run.experiment_spec()
    log_path = out / "train.log"
    from .train import write_run_log_header

    write_run_log_header(log_path)
    cell = run_cell(spec, run.variant, run.model.T, run.model.tau, run.train.seed,
                    keep_model=True, log_path=log_path, strict=True)
    model, row = cell.model, cell.row
    save_checkpoint(model, out / "model.ckpt", seed=run.train.seed)
    (out / "runfile.ini").write_text(run.to_ini(), encoding="utf-8")
    write_manifest(spec, out / "manifest.json", {
        "command": "train",
        "variant": run.variant,
        "metrics": {"test_mse": row.mse, "test_mae": row.mae},
        "parameters": model.num_parameters(),
        "dataset_manifest": prepare(spec.dataset, run.model.T, run.model.tau)[0].manifest(),
    })
    print(f"test mse={row.mse:.6f} mae={row.mae:.6f}  artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    run = load_runfile(args.config, args.preset, args.seed)
    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    split, win = prepare(run.dataset, cfg.T, cfg.tau)
    mse, mae = evaluate(model, win["test"], run.raw_scale, split.scaler)
    doc = {"checkpoint": str(args.checkpoint), "test_mse": mse, "test_mae": mae, "windows": len(win["test"])}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
    print(f"test mse={mse:.6f} mae={mae:.6f}")
    return 0


def cmd_sweep(args) -> int:
    run = load_runfile(args.config, args.preset, args.seed)
    if args.ablation:
        run.experiment["protocol"] = "ablation"
    elif args.protocol:
        run.experiment["protocol"] = args.protocol
    spec = run.experiment_spec(args.jobs)
    report = run_grid(spec)
    out = Path(args.out)
    write_outputs(report, spec, out)
    (out / "runfile.ini").write_text(run.to_ini(), encoding="utf-8")
    write_manifest(spec, out / "manifest.json", {"command": "sweep", "provenance": report.provenance})
    failed = report.failed()
    print(f"{len(report.rows) - len(failed)} cells ok, {len(failed)} failed; reports in {out}")
    for r in failed:
        print(f"  failed: {r.variant} T={r.T} tau={r.tau} seed={r.seed}: {r.error}", file=sys.stderr)
    return 0


def write_outputs(report: MetricsReport, spec: ExperimentSpec, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    emit_report(report, out / "report.csv", "csv")
    emit_report(report, out / "report.md", "markdown", view="mean")
    if spec.best_T_mode:
        emit_report(report, out / "report_best_T.csv", "csv", view="best_T")
        emit_report(report, out / "report_best_T.md", "markdown", view="best_T")
    if report.ok_rows():
        plot_series(report.ok_rows(), out / "curves_tau.csv", x="tau")
        if len(spec.T_values) > 1:
            plot_series(report.ok_rows(), out / "curves_T.csv", x="T")


def cmd_synth(args) -> int:
    spike = None if args.no_spike else Spike(_ints(args.spike_weekdays), _ints(args.spike_hours), args.spike_amplitude)
    spec = SyntheticSpec(
        L=args.L, C=args.C, period=args.period, lags=_lags(args.lags or ""),
        spike=spike, sigma=args.sigma, seed=args.seed if args.seed is not None else 2021,
    )
    try:
        write_csv(gen_synthetic(spec), args.out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc.strerror}") from exc
    print(f"wrote {args.L} rows x {args.C} channels to {args.out}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    results = run_all()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_SELFCHECK if failed else 0


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the configuration code rather than 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stl", description="SpatioTemporal-Linear forecasting")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", required=True, help="run file (INI)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="override the training seed")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="dataset hyperparameter preset")

    sp = sub.add_parser("train", help="train one model and write a checkpoint")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(sp, out_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="run an experiment grid")
    common(sp)
    sp.add_argument("--jobs", type=int, help="grid cells to run concurrently")
    sp.add_argument("--ablation", action="store_true", help="the four-variant ablation at T=48")
    sp.add_argument("--protocol", choices=("custom", "best_T", "scarce", "ablation"))
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("synth", help="write a synthetic spatiotemporal CSV")
    sp.add_argument("--out", required=True)
    sp.add_argument("--L", type=int, default=4000)
    sp.add_argument("--C", type=int, default=4)
    sp.add_argument("--period", type=int, default=24)
    sp.add_argument("--lags", default="1<-0:3:2,2<-1:5:-0.5", help="target<-source:lag[:gain],...")
    sp.add_argument("--sigma", type=float, default=0.1)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--spike-weekdays", default="0,2,4")
    sp.add_argument("--spike-hours", default="8-11")
    sp.add_argument("--spike-amplitude", type=float, default=1.5)
    sp.add_argument("--no-spike", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("selfcheck", help="gradient, oracle and determinism checks")
    sp.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
