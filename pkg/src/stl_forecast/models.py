"""STL forecaster, LTSF-style linear baselines, and checkpoint I/O."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .errors import CheckpointError, ConfigError, DimensionError, UsageError
from .layers import (
    COMPONENT_CARDINALITY,
    DateTimeEmbedding,
    DynamicCoder,
    Linear,
    Module,
    ResLBlock,
    SpatialAttention,
    positional_encoding,
)

ROUTES = ("core", "temporal", "spatial")
BASELINES = ("linear", "dlinear", "nlinear")


@dataclass(frozen=True)
class ModelConfig:
    T: int
    tau: int
    C: int
    hidden_size: int = 256
    dropout: float = 0.0
    activation: str = "silu"
    theta_T: int = 96
    routes: tuple[str, ...] = ROUTES
    datetime_components: tuple[str, ...] = ("month", "date", "weekday", "hour")
    per_channel: bool = False
    kind: str = "stl"
    ma_kernel: int = 25
    attn_axis: str = "rows"
    d_emb: int = 8
    gate_init: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "routes", tuple(self.routes))
        object.__setattr__(self, "datetime_components", tuple(self.datetime_components))
        self.validate()

    def validate(self):
        for key in ("T", "tau", "C", "hidden_size", "d_emb"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.theta_T < 0:
            raise ConfigError(f"theta_T must be >= 0, got {self.theta_T}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.activation not in ("silu", "leaky_relu"):
            raise ConfigError(f"activation must be silu or leaky_relu, got {self.activation!r}")
        if self.kind not in ("stl",) + BASELINES:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.attn_axis not in ("rows", "cols"):
            raise ConfigError(f"attn_axis must be rows or cols, got {self.attn_axis!r}")
        if self.kind == "dlinear" and (self.ma_kernel < 1 or self.ma_kernel % 2 == 0):
            raise ConfigError(f"ma_kernel must be a positive odd integer, got {self.ma_kernel}")
        if self.kind == "stl":
            if not self.routes:
                raise ConfigError("an STL model needs at least one route")
            bad = [r for r in self.routes if r not in ROUTES]
            if bad:
                raise ConfigError(f"unknown routes {bad}")
            if len(set(self.routes)) != len(self.routes):
                raise ConfigError(f"duplicate routes in {self.routes}")
            if "temporal" in self.routes and not self.datetime_components:
                raise ConfigError("the temporal route needs at least one date-time component")
        unknown = [c for c in self.datetime_components if c not in COMPONENT_CARDINALITY]
        if unknown:
            raise ConfigError(f"unknown date-time components {unknown}")

    @property
    def temporal_active(self) -> bool:
        return self.kind == "stl" and "temporal" in self.routes and self.T <= self.theta_T

    @property
    def variant(self) -> str:
        if self.kind != "stl":
            return self.kind
        if set(self.routes) == set(ROUTES):
            return "stl"
        return "+".join(r for r in ROUTES if r in self.routes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["routes"] = list(self.routes)
        d["datetime_components"] = list(self.datetime_components)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def _as_batch(x: Tensor, expected: tuple[int, int]) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
        single = True
    elif x.ndim == 3:
        single = False
    else:
        raise DimensionError(f"expected (T, C) or (B, T, C) input, got {x.shape}")
    if x.shape[1:] != expected:
        raise DimensionError(f"expected input (..., {expected[0]}, {expected[1]}), got {x.shape}")
    return x, single


def _batch_stamps(stamps, batch: int, length: int, k: int, label: str) -> np.ndarray:
    s = np.asarray(stamps)
    if s.ndim == 2:
        s = s[None]
    if s.shape != (batch, length, k):
        raise DimensionError(f"{label} must have shape ({batch}, {length}, {k}), got {s.shape}")
    return s


class Forecaster(Module):
    config: ModelConfig

    def __call__(self, x, obs_stamps=None, target_stamps=None, training=False, rng=None) -> Tensor:
        raise NotImplementedError


class StlModel(Forecaster):
    def __init__(self, config: ModelConfig, rng: Rng):
        cfg = self.config = config
        ch = cfg.C if cfg.per_channel else None
        act, p, h = cfg.activation, cfg.dropout, cfg.hidden_size
        self._pe = positional_encoding(cfg.T, cfg.C)
        if "core" in cfg.routes:
            self.core = ResLBlock(cfg.T, cfg.tau, rng.spawn("core"), act, p, ch)
        if "temporal" in cfg.routes:
            r = rng.spawn("temporal")
            self.dt_embed = DateTimeEmbedding(cfg.datetime_components, r.spawn("dt_embed"), cfg.d_emb)
            self.encoder = DynamicCoder(cfg.T, h, self.dt_embed, r.spawn("encoder"), act, p, ch, cfg.gate_init)
            self.mid1 = ResLBlock(h, h, r.spawn("mid1"), act, p, ch)
            self.mid2 = ResLBlock(h, cfg.tau, r.spawn("mid2"), act, p, ch)
            self.decoder = DynamicCoder(cfg.tau, cfg.tau, self.dt_embed, r.spawn("decoder"), act, p, ch, cfg.gate_init)
        if "spatial" in cfg.routes:
            r = rng.spawn("spatial")
            self.pre1 = ResLBlock(cfg.T, h, r.spawn("pre1"), act, p, ch)
            self.pre2 = ResLBlock(h, cfg.tau, r.spawn("pre2"), act, p, ch)
            self.attn = SpatialAttention(cfg.attn_axis)
            self.post = ResLBlock(cfg.tau, cfg.tau, r.spawn("post"), act, p, ch)

    def __call__(self, x, obs_stamps=None, target_stamps=None, training=False, rng=None) -> Tensor:
        return stl_forward(self, x, obs_stamps, target_stamps, training, rng)


def stl_forward(
    model: StlModel,
    x: Tensor,
    obs_stamps=None,
    target_stamps=None,
    training: bool = False,
    rng: Rng | None = None,
) -> Tensor:
    """Sum of the active routes. x is (T, C) or (B, T, C); output matches with tau rows."""
    cfg = model.config
    xb, single = _as_batch(x, (cfg.T, cfg.C))
    batch = xb.shape[0]
    xt = ad.transpose(xb)  # (B, C, T)
    need_pe = cfg.temporal_active or "spatial" in cfg.routes
    if need_pe:
        pe = ad.constant(np.broadcast_to(model._pe.T, (batch, cfg.C, cfg.T)))
        x_pe = ad.add(xt, pe)

    outs = []
    if "core" in cfg.routes:
        outs.append(model.core(xt, training, rng))
    if cfg.temporal_active:
        if obs_stamps is None or target_stamps is None:
            raise UsageError("the temporal route is active but stamps were not supplied")
        k = len(cfg.datetime_components)
        obs = _batch_stamps(obs_stamps, batch, cfg.T, k, "obs_stamps")
        tgt = _batch_stamps(target_stamps, batch, cfg.tau, k, "target_stamps")
        h = model.encoder(x_pe, obs, training, rng)
        h = model.mid1(h, training, rng)
        h = model.mid2(h, training, rng)
        outs.append(model.decoder(h, tgt, training, rng))
    if "spatial" in cfg.routes:
        h = model.pre1(x_pe, training, rng)
        h = model.pre2(h, training, rng)
        h = model.attn(h)
        outs.append(model.post(h, training, rng))

    y = outs[0]
    for o in outs[1:]:
        y = ad.add(y, o)
    y = ad.transpose(y)  # (B, tau, C)
    return ad.reshape(y, y.shape[1:]) if single else y


def moving_average_matrix(length: int, kernel: int) -> np.ndarray:
    """(length, length) matrix A with trend = A @ x for a centered moving
    average whose ends are padded by repeating the first/last value."""
    half = (kernel - 1) // 2
    a = np.zeros((length, length))
    for t in range(length):
        for j in range(t - half, t + half + 1):
            a[t, min(max(j, 0), length - 1)] += 1.0 / kernel
    return a


class BaselineModel(Forecaster):
    def __init__(self, config: ModelConfig, rng: Rng):
        cfg = self.config = config
        ch = cfg.C if cfg.per_channel else None
        if cfg.kind == "dlinear":
            self.trend = Linear(cfg.T, cfg.tau, rng.spawn("trend"), ch)
            self.remainder = Linear(cfg.T, cfg.tau, rng.spawn("remainder"), ch)
            self._ma = moving_average_matrix(cfg.T, cfg.ma_kernel)
        else:
            self.linear = Linear(cfg.T, cfg.tau, rng.spawn("linear"), ch)

    def decompose(self, xt: Tensor) -> tuple[Tensor, Tensor]:
        """Split (B, C, T) into (trend, remainder)."""
        trend = ad.matmul(xt, ad.constant(self._ma.T))
        return trend, ad.sub(xt, trend)

    def __call__(self, x, obs_stamps=None, target_stamps=None, training=False, rng=None) -> Tensor:
        return baseline_forward(self, x)


def baseline_forward(model: BaselineModel, x: Tensor) -> Tensor:
    cfg = model.config
    xb, single = _as_batch(x, (cfg.T, cfg.C))
    xt = ad.transpose(xb)  # (B, C, T)
    if cfg.kind == "linear":
        y = model.linear(xt)
    elif cfg.kind == "dlinear":
        trend, rem = model.decompose(xt)
        y = ad.add(model.trend(trend), model.remainder(rem))
    else:
        last_col = _last_step(xt)
        y = model.linear(ad.sub(xt, ad.broadcast_to(last_col, xt.shape)))
        y = ad.add(y, ad.broadcast_to(last_col, y.shape))
    y = ad.transpose(y)
    return ad.reshape(y, y.shape[1:]) if single else y


def _last_step(xt: Tensor) -> Tensor:
    """(B, C, 1) slice holding the final observation, differentiable."""
    T = xt.shape[-1]
    pick = np.zeros((T, 1))
    pick[-1, 0] = 1.0
    return ad.matmul(xt, ad.constant(pick))


def make_model(config: ModelConfig, seed: int) -> Forecaster:
    """Build a forecaster with parameters drawn deterministically from ``seed``.

    Sub-modules draw from streams keyed by their name, so a route shared by
    two variants gets identical initial weights.
    """
    config.validate()
    rng = Rng(seed)
    if config.kind == "stl":
        return StlModel(config, rng)
    return BaselineModel(config, rng)


def ablation_variants(config: ModelConfig) -> list[ModelConfig]:
    """Full STL, core + spatial, core only, plain linear (in that order)."""
    base = config.replace(kind="stl", routes=ROUTES)
    return [
        base,
        base.replace(routes=("core", "spatial")),
        base.replace(routes=("core",)),
        base.replace(kind="linear", routes=("core",)),
    ]


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic      8 bytes   b"STLCKPT\0"
#   version    uint32
#   hlen       uint32    length of the UTF-8 JSON header
#   header     hlen bytes  {"config", "seed", "params": [{"name", "shape"}], "sha256"}
#   payload    float64 little-endian, parameters concatenated in header order
#
# sha256 covers the payload; a short or altered file is rejected.

CHECKPOINT_MAGIC = b"STLCKPT\0"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Forecaster, path, seed: int | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    params = model.parameters()
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params.values())
    header = {
        "config": model.config.to_dict(),
        "seed": seed,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params.items()],
        "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, name -> array) after validating the container."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an STL checkpoint (bad magic or truncated)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    if len(blob) < 16 + hlen:
        raise CheckpointError(f"checkpoint {path} is corrupt: header truncated")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} is corrupt: unreadable header") from exc
    payload = blob[16 + hlen :]
    expected = 8 * sum(int(np.prod(p["shape"])) for p in header["params"])
    if len(payload) != expected:
        raise CheckpointError(f"checkpoint {path} is corrupt: payload {len(payload)} bytes, expected {expected}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"checkpoint {path} is corrupt: checksum mismatch")
    values = np.frombuffer(payload, dtype="<f8")
    arrays, offset = {}, 0
    for p in header["params"]:
        n = int(np.prod(p["shape"]))
        arrays[p["name"]] = values[offset : offset + n].reshape(p["shape"]).astype(np.float64)
        offset += n
    return header, arrays


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Forecaster:
    header, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    if expected_config is not None and expected_config != config:
        raise CheckpointError(f"checkpoint config {config} does not match the expected {expected_config}")
    model = make_model(config, header.get("seed") or 0)
    load_parameters(model, arrays)
    return model


def load_parameters(model: Forecaster, arrays: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        arr = np.array(arrays[name], dtype=np.float64)
        if arr.shape != p.shape:
            raise CheckpointError(f"parameter {name} has shape {arr.shape}, model expects {p.shape}")
        arr.setflags(write=False)
        p.data = arr


def snapshot(model: Forecaster) -> dict[str, np.ndarray]:
    return {n: p.data for n, p in model.parameters().items()}
