"""A small trainable detector: three-stage conv backbone (strides 2/4/8), a
refine block (or the plain-concatenation baseline) and a 1x1 dense head
predicting objectness plus centre offsets and log sizes per stride-4 cell.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import frn as F
from .dataio import Annotation
from .geometry import BBox, Detection, nms
from .tensor import (
    conv2d_backward,
    conv2d_forward,
    load_params,
    relu_backward,
    relu_forward,
    save_params,
)

log = logging.getLogger(__name__)

HEAD_STRIDE = 4


@dataclass(frozen=True)
class DetectorConfig:
    in_channels: int = 1
    widths: tuple[int, int, int] = (16, 16, 24)
    out_channels: int = 16
    split: tuple[int, int, int] | None = None
    fusion: str = "frn"
    reg_weight: float = 1.0
    prior: float = 0.01

    def __post_init__(self):
        if self.fusion not in ("frn", "concat"):
            raise ValueError(f"unknown fusion {self.fusion!r}")

    @property
    def head_channels(self) -> int:
        return self.out_channels if self.fusion == "frn" else sum(self.widths)

    @property
    def frn_config(self) -> F.FrnConfig:
        c1, c2, c3 = self.widths
        return F.FrnConfig(c1, c2, c3, self.out_channels, self.split)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["split"] = list(self.split) if self.split else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        if d.get("split"):
            d["split"] = tuple(d["split"])
        return cls(**d)


def backbone_layout(cfg: DetectorConfig):
    c1, c2, c3 = cfg.widths
    return [
        [("bb1", cfg.in_channels, c1, 2)],
        [("bb2a", c1, c2, 2), ("bb2b", c2, c2, 1)],
        [("bb3a", c2, c3, 2), ("bb3b", c3, c3, 1), ("bb3c", c3, c3, 1)],
    ]


@dataclass
class ToyDetector:
    config: DetectorConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, config: DetectorConfig = DetectorConfig(), seed: int = 0,
               dtype=np.float32) -> "ToyDetector":
        rng = np.random.default_rng(seed)
        params = {}
        for stage in backbone_layout(config):
            for name, cin, cout, _ in stage:
                params[name + "_w"] = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
                params[name + "_b"] = np.zeros(cout)
        fcfg = config.frn_config
        if config.fusion == "frn":
            params.update(F.FrnBlock.create(fcfg, seed=int(rng.integers(2**31))).params)
        cin = config.head_channels
        params["head_w"] = rng.standard_normal((5, cin, 1, 1)) * np.sqrt(1.0 / cin) * 0.1
        params["head_b"] = np.zeros(5)
        params["head_b"][0] = -math.log((1 - config.prior) / config.prior)
        return cls(config, {k: np.asarray(v, dtype=dtype) for k, v in params.items()})

    @property
    def block(self) -> F.FrnBlock:
        """The refine-block view onto this detector's parameters (shared arrays)."""
        if self.config.fusion != "frn":
            raise ValueError("detector uses plain concatenation, it has no refine block")
        keys = F.FrnBlock.create(self.config.frn_config).params.keys()
        return F.FrnBlock(self.config.frn_config, {k: self.params[k] for k in keys})

    def with_block(self, block: F.FrnBlock) -> "ToyDetector":
        params = dict(self.params)
        for k, v in block.params.items():
            params[k] = v.astype(self.params[k].dtype)
        return ToyDetector(self.config, params)

    def copy(self) -> "ToyDetector":
        return ToyDetector(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "ToyDetector":
        return ToyDetector(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def save(self, directory, extra: dict | None = None):
        """Write the checkpoint; ``extra`` keys land beside the detector config."""
        save_params(directory, self.params, {**(extra or {}), "detector": self.config.to_dict()})

    @classmethod
    def load(cls, directory, dtype=np.float32) -> "ToyDetector":
        params, cfg = load_params(directory)
        if "detector" not in cfg:
            raise ValueError(f"{directory} is not a detector checkpoint")
        return cls(DetectorConfig.from_dict(cfg["detector"]),
                   {k: v.astype(dtype) for k, v in params.items()})

    # ------------------------------------------------------------------
    def features(self, x):
        p = self.params
        caches, feats = [], []
        for stage in backbone_layout(self.config):
            for name, _, _, stride in stage:
                y, cc = conv2d_forward(x, p[name + "_w"], p[name + "_b"], stride, 1)
                x, mask = relu_forward(y)
                caches.append((name, cc, mask))
            feats.append(x)
        return feats, caches

    def forward(self, x):
        """Head output (B, 5, H/4, W/4) and a cache for :meth:`backward`."""
        x = np.asarray(x, dtype=self.params["head_w"].dtype)
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError(f"image size {x.shape[2:]} must be a multiple of 8")
        (fine, mid, coarse), bb_caches = self.features(x)
        if self.config.fusion == "frn":
            z, fuse_cache = F.frn_forward(fine, mid, coarse, self.block)
        else:
            z, fuse_cache = F.concat_fusion_forward(fine, mid, coarse)
        out, head_cache = conv2d_forward(z, self.params["head_w"], self.params["head_b"])
        return out, (bb_caches, fuse_cache, head_cache)

    def backward(self, dout, cache):
        """Return ``(grads, d_image)``."""
        bb_caches, fuse_cache, head_cache = cache
        grads = {}
        dz, grads["head_w"], grads["head_b"] = conv2d_backward(dout, head_cache)
        if self.config.fusion == "frn":
            dfine, dmid, dcoarse, g = F.frn_backward(dz, fuse_cache)
            grads.update(g)
        else:
            dfine, dmid, dcoarse = F.concat_fusion_backward(dz, fuse_cache)
        # stage outputs are the last activation of each stage
        stage_ends = {"bb1": dfine, "bb2b": dmid, "bb3c": dcoarse}
        d = None
        for name, cc, mask in reversed(bb_caches):
            if name in stage_ends:
                d = stage_ends[name] if d is None else d + stage_ends[name]
            (d,) = relu_backward(d, mask)
            d, grads[name + "_w"], grads[name + "_b"] = conv2d_backward(d, cc)
        return grads, d


# --------------------------------------------------------------------------
# targets, loss, decoding

def cell_centers(h: int, w: int, stride: int = HEAD_STRIDE):
    cy = (np.arange(h) + 0.5) * stride
    cx = (np.arange(w) + 0.5) * stride
    return cx, cy


def encode_targets(boxes: Sequence[BBox], h: int, w: int, stride: int = HEAD_STRIDE):
    """Objectness (h, w) and regression targets (4, h, w).

    A cell is positive when its centre lies inside a box; overlapping boxes
    go to the smallest one.
    """
    obj = np.zeros((h, w))
    reg = np.zeros((4, h, w))
    cx, cy = cell_centers(h, w, stride)
    for b in sorted(boxes, key=lambda b: -b.area):
        jx = np.nonzero((cx >= b.xmin) & (cx < b.xmax))[0]
        iy = np.nonzero((cy >= b.ymin) & (cy < b.ymax))[0]
        if not len(jx) or not len(iy):
            continue
        bx, by = b.center
        sl = np.ix_(iy, jx)
        obj[sl] = 1.0
        reg[0][sl] = ((bx - cx[jx])[None, :] / stride).repeat(len(iy), 0)
        reg[1][sl] = ((by - cy[iy])[:, None] / stride).repeat(len(jx), 1)
        reg[2][sl] = math.log(b.width / stride)
        reg[3][sl] = math.log(b.height / stride)
    return obj, reg


def detection_loss(out, annotations: Sequence[Annotation | Sequence[BBox]], reg_weight: float = 1.0,
                   stride: int = HEAD_STRIDE):
    """BCE on objectness over all cells plus L1 on regression at positive
    cells, both normalized by the positive count.  Returns ``(loss, grad)``."""
    out = np.asarray(out)
    b, _, h, w = out.shape
    obj = np.zeros((b, h, w))
    reg = np.zeros((b, 4, h, w))
    for k, ann in enumerate(annotations):
        boxes = ann.boxes if isinstance(ann, Annotation) else ann
        obj[k], reg[k] = encode_targets(boxes, h, w, stride)
    norm = max(1.0, float(obj.sum()))
    z = out[:, 0].astype(np.float64)
    # softplus(z) - y z, computed stably
    bce = np.maximum(z, 0) - z * obj + np.log1p(np.exp(-np.abs(z)))
    diff = out[:, 1:].astype(np.float64) - reg
    pos = obj[:, None]
    l1 = np.abs(diff) * pos
    loss = (bce.sum() + reg_weight * l1.sum()) / norm
    grad = np.empty((b, 5, h, w))
    grad[:, 0] = (1.0 / (1.0 + np.exp(-z)) - obj) / norm
    grad[:, 1:] = reg_weight * np.sign(diff) * pos / norm
    return float(loss), grad.astype(out.dtype)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def decode_detections(out, score_threshold: float = 0.5, nms_threshold: float = 0.4,
                      stride: int = HEAD_STRIDE) -> list[Detection]:
    """Decode one head map (5, h, w) or (1, 5, h, w) into NMS'd detections."""
    out = np.asarray(out, dtype=np.float64)
    if out.ndim == 4:
        out = out[0]
    _, h, w = out.shape
    scores = sigmoid(out[0])
    iy, jx = np.nonzero(scores >= score_threshold)
    cx, cy = cell_centers(h, w, stride)
    dets = []
    for i, j in zip(iy, jx):
        bx = cx[j] + out[1, i, j] * stride
        by = cy[i] + out[2, i, j] * stride
        bw = math.exp(min(out[3, i, j], 10.0)) * stride
        bh = math.exp(min(out[4, i, j], 10.0)) * stride
        if bw <= 0 or bh <= 0:
            continue
        dets.append(Detection(BBox(bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2), float(scores[i, j])))
    return nms(dets, nms_threshold)


def targets_as_head(boxes: Sequence[BBox], h: int, w: int, stride: int = HEAD_STRIDE, logit: float = 12.0):
    """A head map that decodes exactly to ``boxes`` (up to NMS)."""
    obj, reg = encode_targets(boxes, h, w, stride)
    out = np.empty((5, h, w))
    out[0] = np.where(obj > 0, logit, -logit)
    out[1:] = reg
    return out


def detect(detector: ToyDetector, image, score_threshold=0.5, nms_threshold=0.4):
    out, _ = detector.forward(image)
    return decode_detections(out, score_threshold, nms_threshold)


# --------------------------------------------------------------------------
# optimization

@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 4000
    batch_size: int = 2
    momentum: float = 0.9
    weight_decay: float = 0.0005
    # (until fraction of iterations, learning rate)
    lr_stages: tuple[tuple[float, float], ...] = ((0.5, 0.01), (0.8, 0.001), (1.0, 0.0001))
    warmup: int = 100
    seed: int = 0
    flip: bool = True
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if any(lr <= 0 for _, lr in self.lr_stages):
            raise ValueError("learning rates must be positive")

    def lr_at(self, it: int) -> float:
        frac = it / max(1, self.iterations)
        lr = self.lr_stages[-1][1]
        for until, stage_lr in self.lr_stages:
            if frac < until:
                lr = stage_lr
                break
        if self.warmup and it < self.warmup:
            lr *= (it + 1) / self.warmup
        return lr


class DivergenceError(FloatingPointError):
    pass


def sgd_step(params: dict, grads: dict, state: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0005):
    """In-place momentum SGD with L2 weight decay:
    ``v <- m v - lr (g + wd p)``, ``p <- p + v``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = 0.0
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        v *= momentum
        v -= lr * (g + weight_decay * p)
        p += v
    return params, state


def _augment(img, ann: Annotation, rng):
    if rng.random() < 0.5:
        return img, ann
    w = img.shape[-1]
    boxes = [BBox(w - b.xmax, b.ymin, w - b.xmin, b.ymax) for b in ann.boxes]
    return img[..., ::-1].copy(), Annotation(ann.image_id, ann.width, ann.height, boxes)


def train(detector: ToyDetector, dataset: Sequence, cfg: TrainConfig = TrainConfig(),
          log_every: int = 100):
    """Train in place; returns ``(detector, loss_curve)``.

    ``dataset`` is a sequence of ``(image 1xCxHxW, Annotation)``; images in a
    batch must share a size.  Deterministic for a fixed seed.
    """
    if not len(dataset):
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    state: dict = {}
    curve = []
    order = []
    dtype = detector.params["head_w"].dtype
    for it in range(cfg.iterations):
        batch = []
        while len(batch) < cfg.batch_size:
            if not order:
                order = list(rng.permutation(len(dataset)))
            batch.append(dataset[order.pop()])
        if cfg.flip:
            batch = [_augment(img, ann, rng) for img, ann in batch]
        by_size: dict = {}
        for img, ann in batch:
            by_size.setdefault(img.shape[2:], []).append((img, ann))
        loss = 0.0
        grads: dict = {}
        for group in by_size.values():
            x = np.concatenate([img for img, _ in group]).astype(dtype)
            out, cache = detector.forward(x)
            l, dout = detection_loss(out, [a for _, a in group], detector.config.reg_weight)
            g, _ = detector.backward(dout, cache)
            loss += l * len(group) / len(batch)
            for k, v in g.items():
                grads[k] = grads.get(k, 0) + v * (len(group) / len(batch))
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at iteration {it}")
        if cfg.grad_clip:
            total = math.sqrt(sum(float(np.sum(np.square(v, dtype=np.float64))) for v in grads.values()))
            if total > cfg.grad_clip:
                grads = {k: v * (cfg.grad_clip / total) for k, v in grads.items()}
        sgd_step(detector.params, grads, state, cfg.lr_at(it), cfg.momentum, cfg.weight_decay)
        curve.append(loss)
        if log_every and (it + 1) % log_every == 0:
            log.info("iter %d loss %.4f lr %.2g", it + 1, float(np.mean(curve[-log_every:])), cfg.lr_at(it))
    return detector, curve
