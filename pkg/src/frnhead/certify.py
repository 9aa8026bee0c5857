"""Finite-difference certification of every differentiable op at desk shapes."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import frn as F
from .geometry import BBox
from .tensor import (
    concat_channels_backward,
    concat_channels_forward,
    conv2d_backward,
    conv2d_forward,
    finite_diff_check,
    maxpool2d_backward,
    maxpool2d_forward,
    relu_backward,
    relu_forward,
)
from .training import DetectorConfig, ToyDetector, detection_loss

ELEMENTWISE_TOL = 1e-5
TOL = 1e-4


@dataclass
class OpResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape):
    # a shuffled grid keeps every pool window free of near-ties
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) / n - 0.5) * 2


def _conv(rng):
    x, w, b = rng.uniform(-1, 1, (2, 3, 7, 6)), rng.uniform(-1, 1, (4, 3, 3, 3)), rng.uniform(-1, 1, 4)
    return (lambda x, w, b: conv2d_forward(x, w, b, 2, 1), lambda d, c: conv2d_backward(d, c), [x, w, b])


def _maxpool(rng):
    return (lambda x: maxpool2d_forward(x, 2, 2), maxpool2d_backward,
            [_distinct(rng, (2, 3, 7, 8))])


def _relu(rng):
    return (relu_forward, lambda d, m: relu_backward(d, m), [_away_from_zero(rng, (2, 4, 5, 5))])


def _concat(rng):
    a, b = rng.uniform(-1, 1, (2, 3, 4, 4)), rng.uniform(-1, 1, (2, 5, 4, 4))
    return (lambda a, b: concat_channels_forward([a, b]), lambda d, c: concat_channels_backward(d, c), [a, b])


def _channel_weight(rng):
    f, w = rng.uniform(-1, 1, (2, 4, 5, 5)), rng.uniform(-1, 1, 4)
    return (lambda f, w: (F.channel_weight_forward(f, w), (f, w)),
            lambda d, c: F.channel_weight_backward(d, *c), [f, w])


def _decomp(rng):
    f, m = rng.uniform(-1, 1, (2, 3, 4, 5)), rng.uniform(-1, 1, (3, 2, 2))
    return (lambda f, m: (F.decomp_upsample_forward(f, m, 2), (f, m)),
            lambda d, c: F.decomp_upsample_backward(d, c[0], c[1], 2), [f, m])


def _perturbed(params, rng, scale=0.3):
    return {k: v + rng.uniform(-scale, scale, v.shape) for k, v in params.items()}


def _synthesis(rng):
    paths = (2, 3, 3)
    params = _perturbed(F.init_synthesis_params(5, paths, rng), rng)
    names = sorted(params)
    x = _distinct(rng, (2, 5, 6, 6))

    def fwd(x, *ps):
        return F.inception_synthesis_forward(x, dict(zip(names, ps)), paths)

    def bwd(d, cache):
        dx, g = F.inception_synthesis_backward(d, cache)
        return [dx] + [g[n] for n in names]

    return fwd, bwd, [x, *(params[n] for n in names)]


def _block(rng):
    cfg = F.FrnConfig(fine_channels=4, mid_channels=3, coarse_channels=5, out_channels=8, split=(2, 3, 3))
    block = F.FrnBlock.create(cfg)
    params = _perturbed(block.params, rng)
    names = sorted(params)
    ins = [_distinct(rng, (2, 4, 8, 8)), _distinct(rng, (2, 3, 4, 4)), _distinct(rng, (2, 5, 2, 2))]

    def fwd(a, b, c, *ps):
        return F.frn_forward(a, b, c, F.FrnBlock(cfg, dict(zip(names, ps))))

    def bwd(d, cache):
        da, db, dc, g = F.frn_backward(d, cache)
        return [da, db, dc] + [g[n] for n in names]

    return fwd, bwd, [*ins, *(params[n] for n in names)]


def _loss(rng):
    out = rng.normal(size=(2, 5, 6, 6))
    anns = [[BBox(1, 2, 11, 13)], [BBox(5, 5, 20, 19), BBox(0, 0, 5, 6)]]

    def fwd(o):
        loss, grad = detection_loss(o, anns)
        return np.array([loss]), grad

    return fwd, lambda d, grad: [d[0] * grad], [out]


def _detector(fusion):
    def build(rng):
        det = ToyDetector.create(DetectorConfig(widths=(2, 2, 3), out_channels=4, fusion=fusion),
                                 seed=1, dtype=np.float64)
        det.params.update(_perturbed(det.params, rng, 0.2))
        names = sorted(det.params)
        x = rng.uniform(0, 1, (1, 1, 16, 16))

        def fwd(x, *ps):
            d = ToyDetector(det.config, dict(zip(names, ps)))
            out, cache = d.forward(x)
            return out, (d, cache)

        def bwd(dout, cache):
            d, c = cache
            grads, dx = d.backward(dout, c)
            return [dx] + [grads[n] for n in names]

        return fwd, bwd, [x, *(det.params[n] for n in names)]
    return build


SUITE: dict[str, tuple[Callable, float]] = {
    "conv2d": (_conv, TOL),
    "maxpool2d": (_maxpool, TOL),
    "relu": (_relu, ELEMENTWISE_TOL),
    "concat_channels": (_concat, ELEMENTWISE_TOL),
    "channel_weight": (_channel_weight, ELEMENTWISE_TOL),
    "decomp_upsample": (_decomp, TOL),
    "inception_synthesis": (_synthesis, TOL),
    "frn_block": (_block, TOL),
    "detection_loss": (_loss, TOL),
    "toy_detector_frn": (_detector("frn"), TOL),
    "toy_detector_concat": (_detector("concat"), TOL),
}


def run_suite(seed: int = 0, corrupt: frozenset[str] = frozenset(), only=None) -> list[OpResult]:
    """Check every op in :data:`SUITE`.  Names in ``corrupt`` get their
    analytic gradients scaled by 1.01, a hook that must make them fail."""
    unknown = set(corrupt) - set(SUITE)
    if unknown:
        raise KeyError(f"unknown ops {sorted(unknown)}")
    results = []
    for k, (name, (build, tol)) in enumerate(SUITE.items()):
        if only is not None and name not in only:
            continue
        fwd, bwd, inputs = build(np.random.default_rng(seed + k))
        if name in corrupt:
            bwd = (lambda b: lambda d, c: [1.01 * g for g in b(d, c)])(bwd)
        t = time.perf_counter()
        rep = finite_diff_check(fwd, bwd, inputs, tolerance=tol, seed=seed)
        results.append(OpResult(name, rep.worst, tol, time.perf_counter() - t))
    return results
