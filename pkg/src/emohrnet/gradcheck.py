"""Finite-difference verification of every differentiable op and the full model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .autodiff import Tensor
from .model import HRNetConfig, build, forward, head, hrim_forward, residual_block

TOLERANCE = 1e-4
EPS = 1e-4

# every op name the tape can record
OPS = (
    "add",
    "mul",
    "sum",
    "relu",
    "crop",
    "upsample_nearest",
    "conv2d",
    "global_avg_pool",
    "linear",
    "softmax",
    "cross_entropy",
    "softmax_cross_entropy",
)

DESK = HRNetConfig(
    in_mels=8, in_frames=12, stem_channels=16, n_stages=3, branch_channels=(16, 32, 64),
    blocks_per_branch=1, n_classes=8, fuse_channels=64,
)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _param(gen, *shape, away_from_zero: float = 0.0) -> Tensor:
    x = gen.standard_normal(shape)
    if away_from_zero:
        x = x + np.sign(x) * away_from_zero
    return Tensor(x, requires_grad=True)


def _probe(gen, shape) -> Tensor:
    # fixed random weights so the scalar depends on every output coordinate
    return Tensor(gen.standard_normal(shape))


def _weighted(out: Tensor, w: Tensor) -> Tensor:
    return ad.total(ad.mul(out, w))


def _unary(op: Callable[[Tensor], Tensor], shape, out_shape, away=0.0):
    def make(gen):
        x = _param(gen, *shape, away_from_zero=away)
        w = _probe(gen, out_shape)
        return (lambda x: _weighted(op(x), w)), [x]

    return make


def _onehot(gen, n, k):
    y = np.zeros((n, k))
    y[np.arange(n), gen.integers(0, k, n)] = 1
    return y


def _case_add(gen):
    a, b, w = _param(gen, 2, 3, 4), _param(gen, 2, 3, 4), _probe(gen, (2, 3, 4))
    return (lambda a, b: _weighted(ad.add(a, b), w)), [a, b]


def _case_mul(gen):
    a, b, w = _param(gen, 3, 5), _param(gen, 3, 5), _probe(gen, (3, 5))
    return (lambda a, b: _weighted(ad.mul(a, b), w)), [a, b]


def _case_sum(gen):
    x = _param(gen, 4, 3)
    return (lambda x: ad.mul(ad.total(x), ad.total(x))), [x]


def _case_conv(gen):
    x, k, b = _param(gen, 2, 3, 7, 6), _param(gen, 4, 3, 3, 3), _param(gen, 4)
    w = _probe(gen, (2, 4, 4, 3))
    return (lambda x, k, b: _weighted(ad.conv2d(x, k, b, stride=2, padding=1), w)), [x, k, b]


def _case_linear(gen):
    x, W, b = _param(gen, 3, 5), _param(gen, 4, 5), _param(gen, 4)
    w = _probe(gen, (3, 4))
    return (lambda x, W, b: _weighted(ad.linear(x, W, b), w)), [x, W, b]


def _case_softmax(gen):
    z, w = _param(gen, 3, 5), _probe(gen, (3, 5))
    return (lambda z: _weighted(ad.softmax(z), w)), [z]


def _case_ce(gen):
    # probabilities fed directly (not from softmax) exercise the unfused path
    y = _onehot(gen, 4, 3)
    p = Tensor(gen.uniform(0.2, 1.0, (4, 3)), requires_grad=True)
    return (lambda p: ad.cross_entropy(p, y)), [p]


def _case_softmax_ce(gen):
    y = _onehot(gen, 4, 5)
    z = _param(gen, 4, 5)
    return (lambda z: ad.cross_entropy(ad.softmax(z), y)), [z]


def _case_composite(gen):
    x, k, b = _param(gen, 2, 2, 6, 5), _param(gen, 3, 2, 3, 3), _param(gen, 3)
    W, c = _param(gen, 4, 3), _param(gen, 4)
    y = _onehot(gen, 2, 4)

    def f(x, k, b, W, c):
        h = ad.global_avg_pool(ad.relu(ad.conv2d(x, k, b, padding=1)))
        return ad.cross_entropy(ad.softmax(ad.linear(h, W, c)), y)

    return f, [x, k, b, W, c]


OP_CASES: dict[str, Callable] = {
    "add": _case_add,
    "mul": _case_mul,
    "sum": _case_sum,
    "relu": _unary(ad.relu, (3, 7), (3, 7), away=0.1),
    "crop": _unary(lambda x: ad.crop(x, 3, 2), (2, 2, 5, 4), (2, 2, 3, 2)),
    "upsample_nearest": _unary(lambda x: ad.upsample_nearest(x, 3), (2, 2, 3, 2), (2, 2, 9, 6)),
    "conv2d": _case_conv,
    "global_avg_pool": _unary(ad.global_avg_pool, (2, 3, 4, 5), (2, 3)),
    "linear": _case_linear,
    "softmax": _case_softmax,
    "cross_entropy": _case_ce,
    "softmax_cross_entropy": _case_softmax_ce,
    "composite": _case_composite,
}


def check_op(name: str, seed: int = 0, eps: float = EPS) -> CheckResult:
    gen = rngmod.make_rng(seed, rngmod.stream_id(rngmod.GRADCHECK, 0, list(OP_CASES).index(name)))
    builder, inputs = OP_CASES[name](gen)
    return CheckResult(name, ad.grad_check(builder, inputs, eps))


def _model_inputs(cfg: HRNetConfig, seed: int, n: int = 2):
    gen = rngmod.make_rng(seed, rngmod.stream_id(rngmod.GRADCHECK, 1))
    model = build(cfg, gen)
    # nonzero biases so the check also covers bias paths away from init
    for k, p in model.params.items():
        if k.endswith(".bias"):
            p.data = 0.1 * gen.standard_normal(p.shape)
    x = Tensor(gen.standard_normal((n, 1, cfg.in_mels, cfg.in_frames)))
    y = _onehot(gen, n, cfg.n_classes)
    return model, x, y, gen


def check_model(cfg: HRNetConfig = DESK, seed: int = 0, coords_per_param: int = 3, eps: float = EPS) -> CheckResult:
    """Full-model loss gradient, sampling a few coordinates of every parameter."""
    model, x, y, gen = _model_inputs(cfg, seed)
    # unnormalized activations grow with depth; a smaller head keeps the
    # softmax away from saturation so the check point is well conditioned
    model.params["head.weight"].data *= 0.02
    names = list(model.params)

    def f(*ps):
        return ad.cross_entropy(forward(x, model), y)

    err = ad.grad_check(f, [model.params[k] for k in names], eps, max_coords=coords_per_param, rng=gen)
    return CheckResult("model", err)


def check_hrim(cfg: HRNetConfig = DESK, seed: int = 0, eps: float = EPS) -> CheckResult:
    model, x, _, gen = _model_inputs(cfg, seed)
    x.requires_grad = True
    w = _probe(gen, (x.shape[0], cfg.stem_channels, cfg.in_mels, cfg.in_frames))
    p = [model.params["stem.weight"], model.params["stem.bias"]]
    return CheckResult("hrim", ad.grad_check(lambda x, *_: _weighted(hrim_forward(x, model), w), [x, *p], eps), 1e-5)


def check_residual(cfg: HRNetConfig = DESK, seed: int = 0, eps: float = EPS) -> CheckResult:
    model, _, _, gen = _model_inputs(cfg, seed)
    c = cfg.branch_channels[0]
    x = _param(gen, 2, c, 5, 4)
    w = _probe(gen, (2, c, 5, 4))
    name = "s0.b0.blk0"
    ps = [model.params[f"{name}.conv{k}.{t}"] for k in (1, 2) for t in ("weight", "bias")]
    return CheckResult(
        "residual_block", ad.grad_check(lambda x, *_: _weighted(residual_block(x, model.params, name), w), [x, *ps], eps)
    )


def check_head(cfg: HRNetConfig = DESK, seed: int = 0, eps: float = EPS) -> CheckResult:
    model, _, y, gen = _model_inputs(cfg, seed)
    f_fl = _param(gen, 2, cfg.fuse_channels, 3, 4)
    ps = [model.params["head.weight"], model.params["head.bias"]]
    err = ad.grad_check(lambda f, *_: ad.cross_entropy(head(f, model.params), y), [f_fl, *ps], eps)
    return CheckResult("head", err, 1e-6)


def run_all(seed: int = 0, cfg: HRNetConfig = DESK) -> list[CheckResult]:
    results = [check_op(name, seed) for name in OP_CASES]
    results += [check_hrim(cfg, seed), check_residual(cfg, seed), check_head(cfg, seed), check_model(cfg, seed)]
    return results


def recorded_ops(cfg: HRNetConfig = DESK) -> set[str]:
    """Op names actually taped by a full forward/loss pass (coverage audit)."""
    model, x, y, _ = _model_inputs(cfg, 0)
    with ad.Graph() as g:
        ad.cross_entropy(forward(x, model), y)
    return {n.op for n in g.nodes}

