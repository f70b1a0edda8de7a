"""Building blocks for the STL forecaster.

All layers map along the last (time) axis of a ``(batch, channels, length)``
tensor; unbatched ``(channels, length)`` input is accepted where noted.
"""
from __future__ import annotations

import math
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .errors import ConfigError, DataError, DimensionError

# Embedding cardinalities of the supported calendar components. Minute is
# bucketed into 15-minute bins.
COMPONENT_CARDINALITY = {"month": 12, "date": 31, "weekday": 7, "hour": 24, "minute": 4}


class Module:
    """Parameter container. Tensors that require grad and child modules are
    collected in attribute definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Tensor) and v.requires_grad:
                        yield f"{name}.{k}", v
                    elif isinstance(v, Module):
                        yield from v.named_parameters(f"{name}.{k}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))


class Linear(Module):
    """y = x W^T + b along the last axis.

    With ``channels`` set, each channel row gets its own weight matrix
    (``weight`` is then ``(channels, out, in)``); otherwise one weight is
    shared by every channel.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, channels: int | None = None):
        if in_dim < 1 or out_dim < 1:
            raise ConfigError(f"linear dims must be positive, got {in_dim}->{out_dim}")
        self.in_dim, self.out_dim, self.channels = in_dim, out_dim, channels
        bound = 1.0 / math.sqrt(in_dim)
        lead = () if channels is None else (channels,)
        w_shape = lead + (out_dim, in_dim)
        b_shape = lead + (out_dim,)
        self.weight = ad.parameter(rng.uniform(int(np.prod(w_shape)), -bound, bound).reshape(w_shape))
        self.bias = ad.parameter(rng.uniform(int(np.prod(b_shape)), -bound, bound).reshape(b_shape))

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(f"linear expects last axis {layer.in_dim}, got shape {x.shape}")
    if layer.channels is None:
        if x.ndim == 1:
            x = ad.reshape(x, (1, x.shape[0]))
            y = ad.add(ad.matmul(x, ad.transpose(layer.weight)), layer.bias)
            return ad.reshape(y, (layer.out_dim,))
        return ad.add(ad.matmul(x, ad.transpose(layer.weight)), layer.bias)

    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1] != layer.channels:
        raise DimensionError(f"per-channel linear expects (B, {layer.channels}, {layer.in_dim}), got {x.shape}")
    xc = ad.permute(x, (1, 0, 2))  # (C, B, in)
    y = ad.matmul(xc, ad.transpose(layer.weight))
    bias = ad.broadcast_to(ad.reshape(layer.bias, (layer.channels, 1, layer.out_dim)), y.shape)
    y = ad.permute(ad.add(y, bias), (1, 0, 2))
    if squeeze:
        y = ad.reshape(y, y.shape[1:])
    return y


class ResLBlock(Module):
    """Residual linear unit: l1(x) + dropout(l3(g(l2(x))))."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: Rng,
        activation: str = "silu",
        dropout_p: float = 0.0,
        channels: int | None = None,
        leaky_alpha: float = 0.01,
    ):
        if activation not in ("silu", "leaky_relu"):
            raise ConfigError(f"Res-L activation must be silu or leaky_relu, got {activation!r}")
        if not 0.0 <= dropout_p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {dropout_p}")
        self.activation = activation
        self.dropout_p = dropout_p
        self.leaky_alpha = leaky_alpha
        self.l1 = Linear(in_dim, out_dim, rng.spawn("l1"), channels)
        self.l2 = Linear(in_dim, out_dim, rng.spawn("l2"), channels)
        self.l3 = Linear(out_dim, out_dim, rng.spawn("l3"), channels)

    @property
    def in_dim(self) -> int:
        return self.l1.in_dim

    @property
    def out_dim(self) -> int:
        return self.l1.out_dim

    def __call__(self, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        return res_l_forward(self, x, training, rng)


def res_l_forward(block: ResLBlock, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
    skip = block.l1(x)
    h = ad.activation(block.l2(x), block.activation, block.leaky_alpha)
    h = block.l3(h)
    if training and block.dropout_p > 0:
        if rng is None:
            raise ConfigError("training with dropout needs an rng")
        h = ad.dropout(h, block.dropout_p, rng, training=True)
    return ad.add(skip, h)


def positional_encoding(T: int, C: int) -> np.ndarray:
    """Sinusoidal (T, C) table: even columns sin(p / 10000^(2i/C)), odd cos.

    For odd C the final column is an unpaired sin term.
    """
    if T < 1 or C < 1:
        raise ConfigError(f"positional encoding needs T, C >= 1, got {T}, {C}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    col = np.arange(C)
    pair = col // 2
    freq = 1.0 / np.power(10000.0, 2.0 * pair / C)
    angle = pos * freq[None, :]
    pe = np.where(col % 2 == 0, np.sin(angle), np.cos(angle))
    pe.setflags(write=False)
    return pe


class DateTimeEmbedding(Module):
    """Per-component embedding tables reduced to one scalar per time step."""

    def __init__(
        self,
        components: Sequence[str],
        rng: Rng,
        d_emb: int = 8,
        cardinalities: Mapping[str, int] | None = None,
    ):
        if not components:
            raise ConfigError("date-time embedding needs at least one component")
        card = dict(COMPONENT_CARDINALITY)
        card.update(cardinalities or {})
        unknown = [c for c in components if c not in card]
        if unknown:
            raise ConfigError(f"unknown date-time components {unknown}")
        self.components = tuple(components)
        self.cardinality = {c: card[c] for c in self.components}
        self.d_emb = d_emb
        self.tables = {
            c: ad.parameter(rng.spawn(f"table.{c}").normal(card[c] * d_emb, 0.0, 0.02).reshape(card[c], d_emb))
            for c in self.components
        }
        self.reducer = Linear(d_emb * len(self.components), 1, rng.spawn("reducer"))

    def __call__(self, stamps: np.ndarray) -> Tensor:
        return datetime_features(self, stamps)


def datetime_features(embed: DateTimeEmbedding, stamps: np.ndarray) -> Tensor:
    """Map integer stamps ``(L, K)`` or ``(B, L, K)`` to features ``(L, 1)`` or ``(B, L)``.

    Column k of ``stamps`` holds component ``embed.components[k]``.
    """
    stamps = np.asarray(stamps)
    if stamps.ndim not in (2, 3) or stamps.shape[-1] != len(embed.components):
        raise DimensionError(
            f"stamps must be (..., L, {len(embed.components)}) for {embed.components}, got {stamps.shape}"
        )
    pieces = []
    for k, comp in enumerate(embed.components):
        idx = stamps[..., k]
        n = embed.cardinality[comp]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            bad = int(idx.max()) if idx.max() >= n else int(idx.min())
            raise DataError(f"date-time component {comp!r} index {bad} outside [0, {n})")
        pieces.append(ad.embedding(embed.tables[comp], idx))
    feats = embed.reducer(ad.concat(pieces, axis=-1) if len(pieces) > 1 else pieces[0])
    if stamps.ndim == 2:
        return feats  # (L, 1)
    return ad.reshape(feats, feats.shape[:2])


def minmax_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Rescale each slice along ``axis`` to [0, 1]; constant slices map to zeros."""
    lo = ad.min(x, axis=axis, keepdims=True)
    hi = ad.max(x, axis=axis, keepdims=True)
    span = ad.sub(hi, lo)
    flat = span.data == 0.0
    if flat.any():
        span = ad.add(span, ad.constant(flat.astype(np.float64)))
    lo_b = lo if lo.shape == (1,) else ad.broadcast_to(lo, x.shape)
    span_b = span if span.shape == (1,) else ad.broadcast_to(span, x.shape)
    out = ad.div(ad.sub(x, lo_b), span_b)
    if flat.any():
        out = ad.mask(out, np.broadcast_to(~flat, x.shape))
    return out


class DynamicCoder(Module):
    """Res-L preceded by a learnable scalar gate on normalized date-time features."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        dt_embed: DateTimeEmbedding,
        rng: Rng,
        activation: str = "silu",
        dropout_p: float = 0.0,
        channels: int | None = None,
        gate_init: float = 1.0,
    ):
        self.m = ad.parameter([gate_init])
        self.inner = ResLBlock(in_dim, out_dim, rng.spawn("inner"), activation, dropout_p, channels)
        # Shared with the sibling coder; not registered as a child so its
        # parameters are counted once by the owning model.
        self._dt_embed = dt_embed

    @property
    def dt_embed(self) -> DateTimeEmbedding:
        return self._dt_embed

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}m", self.m
        yield from self.inner.named_parameters(prefix + "inner.")

    def __call__(self, x: Tensor, stamps: np.ndarray, training: bool = False, rng: Rng | None = None) -> Tensor:
        return dynamic_coder_forward(self, x, stamps, training, rng)


def dynamic_coder_forward(
    coder: DynamicCoder,
    x: Tensor,
    stamps: np.ndarray,
    training: bool = False,
    rng: Rng | None = None,
) -> Tensor:
    """x: (C, L) with stamps (L, K), or (B, C, L) with stamps (B, L, K)."""
    stamps = np.asarray(stamps)
    length = x.shape[-1]
    if stamps.ndim != x.ndim or stamps.shape[-2] != length or (x.ndim == 3 and stamps.shape[0] != x.shape[0]):
        raise DimensionError(f"stamps {stamps.shape} do not align with input {x.shape}")
    feats = datetime_features(coder.dt_embed, stamps)
    if x.ndim == 2:
        f = minmax_normalize(ad.reshape(feats, (1, length)))  # (1, L)
    else:
        f = minmax_normalize(feats)  # (B, L)
    gated = ad.mul(coder.m, f)
    if x.ndim == 2:
        gated = ad.broadcast_to(gated, x.shape)
    else:
        gated = ad.broadcast_to(ad.reshape(gated, (x.shape[0], 1, length)), x.shape)
    return res_l_forward(coder.inner, ad.add(x, gated), training, rng)


def spatial_attention_forward(x_prel: Tensor, axis: str = "rows") -> Tensor:
    """x + W^T x with W = softmax(tanh(x) tanh(x)^T).

    ``axis="rows"`` normalizes each row of the interaction matrix;
    ``"cols"`` normalizes columns instead.
    """
    if axis not in ("rows", "cols"):
        raise ConfigError(f"attention softmax axis must be 'rows' or 'cols', got {axis!r}")
    if x_prel.ndim not in (2, 3):
        raise DimensionError(f"spatial attention expects (C, tau) or (B, C, tau), got {x_prel.shape}")
    scores = ad.tanh(x_prel)
    interact = ad.matmul(scores, ad.transpose(scores))
    weights = ad.softmax(interact, axis=-1 if axis == "rows" else -2)
    return ad.add(x_prel, ad.matmul(ad.transpose(weights), x_prel))


class SpatialAttention(Module):
    """Parameter-free channel mixing."""

    def __init__(self, axis: str = "rows"):
        if axis not in ("rows", "cols"):
            raise ConfigError(f"attention softmax axis must be 'rows' or 'cols', got {axis!r}")
        self.axis = axis

    def __call__(self, x_prel: Tensor) -> Tensor:
        return spatial_attention_forward(x_prel, self.axis)
