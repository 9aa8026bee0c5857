"""Feature refine block: per-channel weighting, learned decomposition
upsampling, channel concatenation and a three-path Inception-style synthesis.

Parameters live in flat ``dict[str, ndarray]`` containers so the trainer,
the serializer and the optimizer can treat every block the same way.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    as_tensor4,
    concat_channels_backward,
    concat_channels_forward,
    conv2d_backward,
    conv2d_forward,
    load_params,
    maxpool2d_backward,
    maxpool2d_forward,
    relu_backward,
    relu_forward,
    save_params,
)

GROUPS = ("fine", "mid", "coarse")


# --------------------------------------------------------------------------
# channel weighting

def channel_weight_forward(f, w):
    f = as_tensor4(f)
    w = np.asarray(w)
    if w.shape != (f.shape[1],):
        raise ShapeError(f"{w.shape[0] if w.ndim else 0} weights for {f.shape[1]} channels")
    return f * w[None, :, None, None]


def channel_weight_backward(upstream, f, w):
    """Return ``(grad_f, grad_w)`` under the full chain rule."""
    upstream = as_tensor4(upstream)
    if upstream.shape != np.shape(f):
        raise ShapeError(f"upstream shape {upstream.shape} != input shape {np.shape(f)}")
    grad_f = upstream * np.asarray(w)[None, :, None, None]
    grad_w = np.einsum("bchw,bchw->c", upstream, f)
    return grad_f, grad_w


# --------------------------------------------------------------------------
# decomposition upsampling

def decomp_upsample_forward(f, M, N=2):
    """Expand every pixel ``p`` of channel ``i`` into the block ``p * M[i]``."""
    f = as_tensor4(f)
    M = np.asarray(M)
    if N < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {N}")
    b, c, h, w = f.shape
    if M.shape != (c, N, N):
        raise ShapeError(f"mapping matrices {M.shape} do not match ({c}, {N}, {N})")
    out = f[:, :, :, None, :, None] * M[None, :, None, :, None, :]
    return out.reshape(b, c, h * N, w * N)


def decomp_upsample_backward(upstream, f, M, N=2):
    """Return ``(grad_f, grad_M)``; ``grad_M`` is summed over the batch."""
    upstream = as_tensor4(upstream)
    b, c, h, w = np.shape(f)
    if upstream.shape != (b, c, h * N, w * N):
        raise ShapeError(f"upstream shape {upstream.shape} != {(b, c, h * N, w * N)}")
    up = upstream.reshape(b, c, h, N, w, N)
    grad_f = np.einsum("bcxmyn,cmn->bcxy", up, M)
    grad_M = np.einsum("bcxmyn,bcxy->cmn", up, f)
    return grad_f, grad_M


def nearest_upsample(x, factor):
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def nearest_upsample_backward(dout, factor):
    b, c, H, W = dout.shape
    return dout.reshape(b, c, H // factor, factor, W // factor, factor).sum(axis=(3, 5))


# --------------------------------------------------------------------------
# Inception-style synthesis

@dataclass(frozen=True)
class FrnConfig:
    fine_channels: int = 16
    mid_channels: int = 16
    coarse_channels: int = 24
    out_channels: int = 16
    split: tuple[int, int, int] | None = None
    factor: int = 2

    @property
    def in_channels(self) -> int:
        return self.fine_channels + self.mid_channels + self.coarse_channels

    @property
    def paths(self) -> tuple[int, int, int]:
        if self.split is not None:
            if sum(self.split) != self.out_channels:
                raise ValueError(f"split {self.split} does not sum to {self.out_channels}")
            return tuple(self.split)
        a = self.out_channels // 4
        b = (self.out_channels - a) // 2
        return a, b, self.out_channels - a - b

    def to_dict(self) -> dict:
        return {
            "fine_channels": self.fine_channels,
            "mid_channels": self.mid_channels,
            "coarse_channels": self.coarse_channels,
            "out_channels": self.out_channels,
            "split": list(self.paths),
            "factor": self.factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrnConfig":
        d = dict(d)
        if d.get("split") is not None:
            d["split"] = tuple(d["split"])
        return cls(**d)


# (name, in, out, kernel, stride, pad) for every synthesis convolution.
def synthesis_layout(in_channels: int, paths: tuple[int, int, int]):
    a, b, c = paths
    bb, cb = max(1, b // 2), max(1, c // 2)
    return {
        "a": [("syn_a1", in_channels, a, 1, 1, 0)],
        "b": [("syn_b1", in_channels, bb, 1, 1, 0), ("syn_b2", bb, b, 3, 2, 1)],
        "c": [("syn_c1", in_channels, cb, 1, 1, 0), ("syn_c2", cb, cb, 3, 1, 1),
              ("syn_c3", cb, c, 3, 2, 1)],
    }


def init_synthesis_params(in_channels, paths, rng, dtype=np.float64):
    params = {}
    for layers in synthesis_layout(in_channels, paths).values():
        for name, cin, cout, k, _, _ in layers:
            fan_in = cin * k * k
            params[name + "_w"] = (rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)).astype(dtype)
            params[name + "_b"] = np.zeros(cout, dtype=dtype)
    return params


def _conv_chain_forward(x, layers, params, crop):
    caches = []
    for name, _, _, _, stride, pad in layers:
        y, cc = conv2d_forward(x, params[name + "_w"], params[name + "_b"], stride, pad)
        full = y.shape
        if stride == 2:
            y = y[:, :, :crop[0], :crop[1]]
        x, mask = relu_forward(y)
        caches.append((name, cc, mask, full))
    return x, caches


def _conv_chain_backward(d, caches, grads):
    for name, cc, mask, full in reversed(caches):
        (d,) = relu_backward(d, mask)
        if d.shape != full:
            padded = np.zeros(full, dtype=d.dtype)
            padded[:, :, :d.shape[2], :d.shape[3]] = d
            d = padded
        d, gw, gb = conv2d_backward(d, cc)
        grads[name + "_w"] = gw
        grads[name + "_b"] = gb
    return d


def inception_synthesis_forward(x, params, paths):
    """Three parallel paths concatenated; channels reduce to ``sum(paths)`` and
    the spatial size halves (odd sizes floor)."""
    x = as_tensor4(x)
    in_channels = params["syn_a1_w"].shape[1]
    if x.shape[1] != in_channels:
        raise ShapeError(f"synthesis expects {in_channels} channels, got {x.shape[1]}")
    h, w = x.shape[2:]
    if h < 2 or w < 2:
        raise ShapeError(f"spatial size {(h, w)} too small to halve")
    crop = (h // 2, w // 2)
    layout = synthesis_layout(in_channels, paths)

    ya, ca = _conv_chain_forward(x, layout["a"], params, crop)
    ya, pool_cache = maxpool2d_forward(ya, 2, 2, 0)
    yb, cb = _conv_chain_forward(x, layout["b"], params, crop)
    yc, cc = _conv_chain_forward(x, layout["c"], params, crop)
    out, sizes = concat_channels_forward([ya, yb, yc])
    return out, (ca, pool_cache, cb, cc, sizes)


def inception_synthesis_backward(dout, cache):
    """Return ``(dx, grads)``."""
    ca, pool_cache, cb, cc, sizes = cache
    da, db, dc = concat_channels_backward(dout, sizes)
    grads = {}
    (da,) = maxpool2d_backward(da, pool_cache)
    dx = _conv_chain_backward(da, ca, grads)
    dx = dx + _conv_chain_backward(db, cb, grads)
    dx = dx + _conv_chain_backward(dc, cc, grads)
    return dx, grads


# --------------------------------------------------------------------------
# the block

@dataclass
class FrnBlock:
    config: FrnConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, config: FrnConfig, seed=0, dtype=np.float64) -> "FrnBlock":
        rng = np.random.default_rng(seed)
        n = config.factor
        params = {
            "cw_fine": np.ones(config.fine_channels, dtype=dtype),
            "cw_mid": np.ones(config.mid_channels, dtype=dtype),
            "cw_coarse": np.ones(config.coarse_channels, dtype=dtype),
            "dm_mid": np.ones((config.mid_channels, n, n), dtype=dtype),
            "dm_coarse1": np.ones((config.coarse_channels, n, n), dtype=dtype),
            "dm_coarse2": np.ones((config.coarse_channels, n, n), dtype=dtype),
        }
        params.update(init_synthesis_params(config.in_channels, config.paths, rng, dtype))
        return cls(config, params)

    def channel_weights(self) -> dict[str, np.ndarray]:
        return {g: self.params["cw_" + g] for g in GROUPS}

    def copy(self) -> "FrnBlock":
        return FrnBlock(self.config, {k: v.copy() for k, v in self.params.items()})

    def save(self, directory):
        save_params(directory, self.params, self.config.to_dict())

    @classmethod
    def load(cls, directory) -> "FrnBlock":
        params, config = load_params(directory)
        return cls(FrnConfig.from_dict(config), params)


def frn_forward(fine, mid, coarse, block: FrnBlock):
    """Weight, upsample, concatenate and synthesize three feature levels.

    ``mid`` must be half the spatial size of ``fine`` and ``coarse`` a quarter;
    ``coarse`` goes through two chained 2x decomposition stages.
    """
    fine, mid, coarse = as_tensor4(fine), as_tensor4(mid), as_tensor4(coarse)
    p, n = block.params, block.config.factor
    fh, fw = fine.shape[2:]
    if (mid.shape[2] * n, mid.shape[3] * n) != (fh, fw):
        raise ShapeError(f"mid spatial {mid.shape[2:]} is not fine {(fh, fw)} / {n}")
    if (coarse.shape[2] * n * n, coarse.shape[3] * n * n) != (fh, fw):
        raise ShapeError(f"coarse spatial {coarse.shape[2:]} is not fine {(fh, fw)} / {n * n}")

    fw_ = channel_weight_forward(fine, p["cw_fine"])
    mw = channel_weight_forward(mid, p["cw_mid"])
    cw = channel_weight_forward(coarse, p["cw_coarse"])
    mu = decomp_upsample_forward(mw, p["dm_mid"], n)
    cu1 = decomp_upsample_forward(cw, p["dm_coarse1"], n)
    cu2 = decomp_upsample_forward(cu1, p["dm_coarse2"], n)
    cat, sizes = concat_channels_forward([fw_, mu, cu2])
    out, syn_cache = inception_synthesis_forward(cat, p, block.config.paths)
    cache = (fine, mid, coarse, mw, cw, cu1, sizes, syn_cache, block)
    return out, cache


def frn_backward(dout, cache):
    """Return ``(d_fine, d_mid, d_coarse, grads)``."""
    fine, mid, coarse, mw, cw, cu1, sizes, syn_cache, block = cache
    p, n = block.params, block.config.factor
    dcat, grads = inception_synthesis_backward(dout, syn_cache)
    dfw, dmu, dcu2 = concat_channels_backward(dcat, sizes)
    dcu1, grads["dm_coarse2"] = decomp_upsample_backward(dcu2, cu1, p["dm_coarse2"], n)
    dcw, grads["dm_coarse1"] = decomp_upsample_backward(dcu1, cw, p["dm_coarse1"], n)
    dmw, grads["dm_mid"] = decomp_upsample_backward(dmu, mw, p["dm_mid"], n)
    d_fine, grads["cw_fine"] = channel_weight_backward(dfw, fine, p["cw_fine"])
    d_mid, grads["cw_mid"] = channel_weight_backward(dmw, mid, p["cw_mid"])
    d_coarse, grads["cw_coarse"] = channel_weight_backward(dcw, coarse, p["cw_coarse"])
    return d_fine, d_mid, d_coarse, grads


# --------------------------------------------------------------------------
# plain-concatenation baseline: the three levels brought to the block's output
# stride (fine max-pooled 2x2, coarse replicated 2x) and stacked; nothing learned

def concat_fusion_forward(fine, mid, coarse):
    fine, mid, coarse = as_tensor4(fine), as_tensor4(mid), as_tensor4(coarse)
    n = mid.shape[2] // coarse.shape[2]
    pooled, pool_cache = maxpool2d_forward(fine, 2, 2, 0)
    if pooled.shape[2:] != mid.shape[2:] or coarse.shape[2] * n != mid.shape[2]:
        raise ShapeError(f"levels {fine.shape[2:]}, {mid.shape[2:]}, {coarse.shape[2:]} do not align")
    out, sizes = concat_channels_forward([pooled, mid, nearest_upsample(coarse, n)])
    return out, (sizes, pool_cache, n)


def concat_fusion_backward(dout, cache):
    sizes, pool_cache, n = cache
    dfine, dmid, dcoarse = concat_channels_backward(dout, sizes)
    (dfine,) = maxpool2d_backward(dfine, pool_cache)
    return dfine, dmid, nearest_upsample_backward(dcoarse, n)


# --------------------------------------------------------------------------
# channel-weight ablation

def ablate_channels(block: FrnBlock, threshold: float):
    """Copy of ``block`` with every channel weight ``|w| < threshold`` zeroed.

    Returns ``(new_block, zeroed_per_group)``.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    out = block.copy()
    counts = {}
    for g in GROUPS:
        w = out.params["cw_" + g]
        kill = np.abs(w) < threshold
        counts[g] = int(kill.sum())
        w[kill] = 0.0
    return out, counts


def zero_channel(block: FrnBlock, group: str, index: int) -> FrnBlock:
    out = block.copy()
    out.params["cw_" + group][index] = 0.0
    return out


def weight_ranking(block: FrnBlock):
    """All channels as ``(group, index, weight)`` sorted by descending |weight|."""
    rows = [(g, i, float(w)) for g in GROUPS for i, w in enumerate(block.params["cw_" + g])]
    return sorted(rows, key=lambda r: (-abs(r[2]), GROUPS.index(r[0]), r[1]))


__all__ = [
    "FrnBlock", "FrnConfig", "GROUPS", "ablate_channels", "channel_weight_backward",
    "channel_weight_forward", "concat_fusion_backward", "concat_fusion_forward",
    "decomp_upsample_backward", "decomp_upsample_forward", "frn_backward", "frn_forward",
    "inception_synthesis_backward", "inception_synthesis_forward",
    "init_synthesis_params", "nearest_upsample", "weight_ranking", "zero_channel",
]
