"""Gradient, oracle and determinism checks runnable from the command line."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import oracles
from .autodiff import Rng
from .layers import (
    DateTimeEmbedding,
    DynamicCoder,
    Linear,
    ResLBlock,
    minmax_normalize,
    positional_encoding,
    spatial_attention_forward,
)
from .models import ModelConfig, make_model, moving_average_matrix

GRAD_EPS = 1e-5
GRAD_TOL = 1e-4
ORACLE_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name:<32} max_err={self.error:.3e}  tol={self.tol:.0e}  {self.detail}".rstrip()


def _random_stamps(rng: np.random.Generator, length: int, components) -> np.ndarray:
    from .layers import COMPONENT_CARDINALITY

    return np.stack([rng.integers(0, COMPONENT_CARDINALITY[c], length) for c in components], axis=-1)


def _weights(rng, shape):
    return ad.parameter(rng.uniform(-1.0, 1.0, shape))


def _grad(name: str, f: Callable, inputs) -> CheckResult:
    rep = ad.grad_check(f, inputs, GRAD_EPS, GRAD_TOL)
    return CheckResult(f"grad:{name}", rep.max_rel_error, GRAD_TOL, rep.passed)


def gradient_checks(seed: int = 7) -> list[CheckResult]:
    """Central-difference checks for every differentiable op and layer."""
    rng = np.random.default_rng(seed)
    out = []
    a, b = _weights(rng, (3, 4)), _weights(rng, (3, 4))
    row = _weights(rng, (4,))
    out.append(_grad("add", lambda a, b: ad.sum(ad.mul(ad.add(a, b), ad.add(a, b))), [a, b]))
    out.append(_grad("sub", lambda a, b: ad.sum(ad.mul(ad.sub(a, b), a)), [a, b]))
    out.append(_grad("mul", lambda a, r: ad.sum(ad.mul(a, r)), [a, row]))
    pos = ad.parameter(rng.uniform(0.5, 2.0, (3, 4)))
    out.append(_grad("div", lambda a, p: ad.sum(ad.div(a, p)), [a, pos]))
    out.append(_grad("scale", lambda a: ad.sum(ad.mul(ad.scale(a, -2.5), a)), [a]))
    out.append(_grad("tanh", lambda a: ad.sum(ad.tanh(a)), [a]))
    out.append(_grad("silu", lambda a: ad.sum(ad.silu(a)), [a]))
    shifted = ad.parameter(a.data + np.where(np.abs(a.data) < 0.05, 0.1, 0.0))
    out.append(_grad("leaky_relu", lambda a: ad.sum(ad.mul(ad.leaky_relu(a, 0.01), a)), [shifted]))
    m1, m2 = _weights(rng, (2, 3, 4)), _weights(rng, (4, 5))
    out.append(_grad("matmul", lambda x, y: ad.sum(ad.tanh(ad.matmul(x, y))), [m1, m2]))
    m3 = _weights(rng, (2, 4, 3))
    out.append(_grad("matmul_batched", lambda x, y: ad.sum(ad.tanh(ad.matmul(x, y))), [m1, m3]))
    out.append(_grad("transpose_permute", lambda x: ad.sum(ad.mul(ad.permute(ad.transpose(x), (1, 0, 2)), ad.constant(np.arange(24.0).reshape(4, 2, 3)))), [m1]))
    out.append(_grad("softmax", lambda x: ad.sum(ad.mul(ad.softmax(x, -1), ad.constant(np.arange(12.0).reshape(3, 4)))), [a]))
    out.append(_grad("softmax_axis0", lambda x: ad.sum(ad.mul(ad.softmax(x, 0), ad.constant(np.arange(12.0).reshape(3, 4)))), [a]))
    for op in ("sum", "mean", "min", "max"):
        out.append(_grad(f"reduce_{op}", lambda x, op=op: ad.sum(ad.tanh(ad.reduce(op, x, axis=1))), [a]))
    out.append(_grad("broadcast_to", lambda r: ad.sum(ad.mul(ad.broadcast_to(ad.reshape(r, (1, 4)), (3, 4)), ad.constant(np.arange(12.0).reshape(3, 4)))), [row]))
    out.append(_grad("concat", lambda x, y: ad.sum(ad.tanh(ad.concat([x, y], -1))), [a, b]))
    table = _weights(rng, (5, 3))
    idx = np.array([[0, 4, 4], [2, 1, 0]])
    out.append(_grad("embedding", lambda t: ad.sum(ad.tanh(ad.embedding(t, idx))), [table]))

    r = Rng(seed)
    lin = Linear(6, 4, r.spawn("lin"))
    x = ad.parameter(rng.normal(size=(2, 3, 6)))
    out.append(_grad("linear", lambda x, w, b: ad.sum(ad.tanh(lin(x))), [x, lin.weight, lin.bias]))
    plin = Linear(6, 4, r.spawn("plin"), channels=3)
    out.append(_grad("linear_per_channel", lambda x, w, b: ad.sum(ad.tanh(plin(x))), [x, plin.weight, plin.bias]))
    for act in ("silu", "leaky_relu"):
        blk = ResLBlock(6, 4, r.spawn(f"res.{act}"), act)
        out.append(_grad(f"res_l_{act}", lambda x, *ps, blk=blk: ad.sum(ad.tanh(blk(x))), [x] + list(blk.parameters().values())))
    pe = ad.constant(positional_encoding(6, 3).T[None].repeat(2, axis=0))
    blk = ResLBlock(6, 4, r.spawn("res.pe"))
    out.append(_grad("pe_added_input", lambda x, *ps: ad.sum(ad.tanh(blk(ad.add(x, pe)))), [x] + list(blk.parameters().values())))
    comps = ("month", "date", "weekday", "hour")
    emb = DateTimeEmbedding(comps, r.spawn("emb"))
    st = _random_stamps(rng, 6, comps)
    out.append(_grad("datetime_embedding", lambda *ps: ad.sum(ad.tanh(emb(st))), list(emb.parameters().values())))
    feats = ad.parameter(rng.normal(size=(2, 6)))
    out.append(_grad("minmax_normalize", lambda f: ad.sum(ad.mul(minmax_normalize(f), ad.constant(np.arange(12.0).reshape(2, 6)))), [feats]))
    coder = DynamicCoder(6, 4, emb, r.spawn("coder"))
    stb = np.stack([st, _random_stamps(rng, 6, comps)])
    cps = list(coder.parameters().values()) + list(emb.parameters().values())
    out.append(_grad("dynamic_coder", lambda x, *ps: ad.sum(ad.tanh(coder(x, stb))), [x] + cps))
    xa = ad.parameter(rng.normal(size=(2, 3, 5)))
    out.append(_grad("spatial_attention", lambda x: ad.sum(ad.tanh(spatial_attention_forward(x))), [xa]))
    out.append(_grad("spatial_attention_cols", lambda x: ad.sum(ad.tanh(spatial_attention_forward(x, "cols"))), [xa]))
    out.append(tiny_stl_gradient_check(seed))
    for kind in ("linear", "dlinear", "nlinear"):
        cfg = ModelConfig(T=6, tau=3, C=2, kind=kind, ma_kernel=3)
        model = make_model(cfg, seed)
        xb = ad.constant(rng.normal(size=(2, 6, 2)))
        yb = ad.constant(rng.normal(size=(2, 3, 2)))
        out.append(_grad(f"baseline_{kind}", lambda *ps, model=model: ad.mse(model(xb), yb), list(model.parameters().values())))
    return out


def tiny_stl_gradient_check(seed: int = 7) -> CheckResult:
    """Every parameter of a T=4, tau=3, C=2, hidden=5 STL with all routes active."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(T=4, tau=3, C=2, hidden_size=5)
    model = make_model(cfg, seed)
    x = ad.constant(rng.normal(size=(2, 4, 2)))
    y = ad.constant(rng.normal(size=(2, 3, 2)))
    obs = np.stack([_random_stamps(rng, 4, cfg.datetime_components) for _ in range(2)])
    tgt = np.stack([_random_stamps(rng, 3, cfg.datetime_components) for _ in range(2)])
    params = list(model.parameters().values())
    return _grad("tiny_stl", lambda *ps: ad.mse(model(x, obs, tgt), y), params)


def oracle_checks(trials: int = 100, seed: int = 11) -> list[CheckResult]:
    """Layer outputs against the loop oracles on random small inputs."""
    rng = np.random.default_rng(seed)
    errs = {"spatial_attention": 0.0, "datetime_features": 0.0, "res_l": 0.0, "moving_average": 0.0}
    comps = ("month", "date", "weekday", "hour")
    for k in range(trials):
        C, tau = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        x = rng.normal(size=(C, tau)) * 2
        got = spatial_attention_forward(ad.constant(x)).data
        errs["spatial_attention"] = max(errs["spatial_attention"], float(np.max(np.abs(got - oracles.spatial_attention(x)))))

        emb = DateTimeEmbedding(comps, Rng(k))
        L = int(rng.integers(1, 6))
        st = _random_stamps(rng, L, comps)
        got = emb(st).data[:, 0]
        tables = {c: emb.tables[c].data for c in comps}
        want = oracles.datetime_features(tables, emb.reducer.weight.data, emb.reducer.bias.data, st, comps)
        errs["datetime_features"] = max(errs["datetime_features"], float(np.max(np.abs(got - want))))

        T, h = int(rng.integers(1, 7)), int(rng.integers(1, 5))
        act = "silu" if k % 2 else "leaky_relu"
        blk = ResLBlock(T, h, Rng(1000 + k), act)
        xr = rng.normal(size=(C, T))
        p = {n: (getattr(blk, n).weight.data, getattr(blk, n).bias.data) for n in ("l1", "l2", "l3")}
        got = blk(ad.constant(xr)).data
        errs["res_l"] = max(errs["res_l"], float(np.max(np.abs(got - oracles.res_l(xr, p, act)))))

        n = int(rng.integers(1, 12))
        kernel = int(rng.choice([1, 3, 5, 7, 25]))
        series = rng.normal(size=n)
        got = moving_average_matrix(n, kernel) @ series
        errs["moving_average"] = max(errs["moving_average"], float(np.max(np.abs(got - oracles.moving_average(series, kernel)))))
    return [CheckResult(f"oracle:{k}", v, ORACLE_TOL, v < ORACLE_TOL, f"{trials} trials") for k, v in errs.items()]


def determinism_checks(seed: int = 2021) -> list[CheckResult]:
    cfg = ModelConfig(T=8, tau=4, C=3, hidden_size=6)
    a = make_model(cfg, seed).parameters()
    b = make_model(cfg, seed).parameters()
    same = all(np.array_equal(a[n].data, b[n].data) for n in a)
    r1, r2 = Rng(seed).normal(1000), Rng(seed).normal(1000)
    return [
        CheckResult("determinism:init", 0.0 if same else 1.0, 0.0, same),
        CheckResult("determinism:rng", float(np.max(np.abs(r1 - r2))), 0.0, bool(np.array_equal(r1, r2))),
    ]


def run_all() -> list[CheckResult]:
    return gradient_checks() + oracle_checks() + determinism_checks()
