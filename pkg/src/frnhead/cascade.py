"""Two-detector cascade: clip-size selection by a weighted signal-to-noise
objective, training-clip generation, greedy test-time clip cover, remapping of
local detections and the final merge.

A small-head box is *reserved* by a clip when strictly more than
``reserve_fraction`` of its own area lies inside the clip.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataio import Annotation
from .geometry import BBox, Detection, detection_order, intersection_area, is_small, nms

DEFAULT_SIZES = (64, 80, 96, 112, 128, 144, 160, 176)

# distinguished value for clips whose weighted noise is exactly zero
NO_NOISE = math.inf


@dataclass(frozen=True)
class ClipConfig:
    w: int = 112
    f: float = 3
    small_threshold: float = 20.0
    reserve_fraction: float = 0.9
    w_s: float = 0.8
    w_l: float = 0.2
    sizes: tuple[int, ...] = DEFAULT_SIZES

    def __post_init__(self):
        if self.f < 1:
            raise ValueError("zoom factor f must be >= 1")
        if not 0 < self.reserve_fraction <= 1:
            raise ValueError("reserve_fraction must be in (0, 1]")
        if self.w_s <= 0 or self.w_l <= 0:
            raise ValueError("noise weights must be positive")


@dataclass(frozen=True)
class Clip:
    x: int
    y: int
    side: int
    seed: BBox
    seed_score: float = 1.0
    reserved: tuple[BBox, ...] = field(default=(), compare=False)

    @property
    def box(self) -> BBox:
        return BBox(self.x, self.y, self.x + self.side, self.y + self.side)


def place_clip(seed: BBox, side: int, width: int, height: int, score: float = 1.0) -> Clip:
    """A ``side`` x ``side`` window centred on ``seed``, translated to stay
    inside the image."""
    if side > width or side > height:
        raise ValueError(f"clip side {side} exceeds image {width}x{height}")
    cx, cy = seed.center
    x = int(round(cx - side / 2))
    y = int(round(cy - side / 2))
    x = min(max(x, 0), width - side)
    y = min(max(y, 0), height - side)
    return Clip(x, y, side, seed, score)


def inside_fraction(box: BBox, clip_box: BBox) -> float:
    return intersection_area(box, clip_box) / box.area


def is_reserved(box: BBox, clip_box: BBox, reserve_fraction: float) -> bool:
    return inside_fraction(box, clip_box) > reserve_fraction


# --------------------------------------------------------------------------
# clip-size objective

@dataclass(frozen=True)
class ClipSNR:
    signal: float
    small_noise: float
    large_noise: float
    ratio: float

    @property
    def no_noise(self) -> bool:
        return self.ratio == NO_NOISE


def clip_snr(clip: Clip, boxes: Sequence[BBox], cfg: ClipConfig) -> ClipSNR:
    """Signal = area of reserved small heads; noise = overlap with every
    abandoned small head and every large head."""
    cb = clip.box
    s = n_s = n_l = 0.0
    for b in boxes:
        inter = intersection_area(b, cb)
        if inter == 0.0:
            continue
        if is_small(b, cfg.small_threshold):
            if inter / b.area > cfg.reserve_fraction:
                s += b.area
            else:
                n_s += inter
        else:
            n_l += inter
    denom = cfg.w_s * n_s + cfg.w_l * n_l
    if s == 0.0:
        ratio = 0.0
    elif denom == 0.0:
        ratio = NO_NOISE
    else:
        ratio = s / denom
    return ClipSNR(s, n_s, n_l, ratio)


def optimize_clip_size(annotations: Sequence[Annotation], cfg: ClipConfig = ClipConfig()):
    """Pick the clip side from ``cfg.sizes`` maximizing the mean clip SNR.

    One clip per small-head annotation is placed for every candidate side.
    No-noise clips count as ten times the largest finite ratio seen in the
    run (1.0 when none is finite).  Ties go to the smaller side.
    Sides that do not fit inside the smallest image are left out.
    Returns ``(best_side, {side: mean_ratio})``.
    """
    ratios: dict[int, list[float]] = {}
    n_small = 0
    limit = min((min(a.width, a.height) for a in annotations), default=0)
    sizes = [s for s in cfg.sizes if s <= limit]
    if not sizes and annotations:
        raise ValueError(f"no candidate clip size fits a {limit} px image")
    for side in sizes:
        vals = []
        for ann in annotations:
            for b in ann.boxes:
                if not is_small(b, cfg.small_threshold):
                    continue
                clip = place_clip(b, side, ann.width, ann.height)
                vals.append(clip_snr(clip, ann.boxes, cfg).ratio)
        ratios[side] = vals
        n_small = len(vals)
    if n_small == 0:
        raise ValueError("no small heads in the dataset")
    finite = [r for vals in ratios.values() for r in vals if r != NO_NOISE]
    cap = 10.0 * max(finite) if finite and max(finite) > 0 else 1.0
    table = {}
    for side, vals in ratios.items():
        table[side] = float(np.mean([cap if r == NO_NOISE else r for r in vals]))
    best = min(table, key=lambda s: (-table[s], s))
    return best, table


# --------------------------------------------------------------------------
# training clips

def resize_nearest(img: np.ndarray, f: float) -> np.ndarray:
    """Nearest-neighbour zoom of the last two axes by ``f``."""
    h, w = img.shape[-2:]
    oh, ow = int(round(h * f)), int(round(w * f))
    ri = np.minimum((np.arange(oh) / f).astype(int), h - 1)
    ci = np.minimum((np.arange(ow) / f).astype(int), w - 1)
    return img[..., ri[:, None], ci[None, :]]


def crop_clip(image: np.ndarray, clip: Clip, f: float) -> np.ndarray:
    patch = image[..., clip.y:clip.y + clip.side, clip.x:clip.x + clip.side]
    return resize_nearest(patch, f)


def to_clip_coords(box: BBox, clip: Clip, f: float) -> BBox:
    return box.shifted(-clip.x, -clip.y).scaled(f)


def make_training_clips(image: np.ndarray, ann: Annotation, cfg: ClipConfig, prefix: str | None = None):
    """One zoomed clip per small head, annotated only with its reserved small
    heads.  Returns a list of ``(clip_image, Annotation)``."""
    prefix = prefix or ann.image_id
    out = []
    side = int(round(cfg.w * cfg.f))
    k = 0
    for b in ann.boxes:
        if not is_small(b, cfg.small_threshold):
            continue
        clip = place_clip(b, cfg.w, ann.width, ann.height)
        cb = clip.box
        kept = [to_clip_coords(o, clip, cfg.f) for o in ann.boxes
                if is_small(o, cfg.small_threshold) and is_reserved(o, cb, cfg.reserve_fraction)]
        out.append((crop_clip(image, clip, cfg.f), Annotation(f"{prefix}_clip{k:03d}", side, side, kept)))
        k += 1
    return out


# --------------------------------------------------------------------------
# test-time cover

def plan_test_clips(small_dets: Sequence[Detection], width: int, height: int,
                    cfg: ClipConfig) -> list[Clip]:
    """Greedy clip cover of the small detections ``B``.

    Detections are visited by descending score; each clip removes from ``B``
    its seed and every detection it reserves.
    """
    remaining = detection_order(small_dets)
    clips = []
    while remaining:
        seed = remaining[0]
        clip = place_clip(seed.box, cfg.w, width, height, seed.score)
        cb = clip.box
        taken = [seed] + [d for d in remaining[1:] if is_reserved(d.box, cb, cfg.reserve_fraction)]
        taken_ids = {id(d) for d in taken}
        remaining = [d for d in remaining if id(d) not in taken_ids]
        clips.append(Clip(clip.x, clip.y, clip.side, clip.seed, clip.seed_score,
                          tuple(d.box for d in taken)))
    return clips


def remap_local_detections(dets: Sequence[Detection], clip: Clip, f: float) -> list[Detection]:
    if f < 1:
        raise ValueError("zoom factor f must be >= 1")
    return [Detection(d.box.scaled(1.0 / f).shifted(clip.x, clip.y), d.score) for d in dets]


def merge_results(global_dets: Sequence[Detection], local_dets: Sequence[Detection],
                  iou_threshold: float) -> list[Detection]:
    return nms(list(global_dets) + list(local_dets), iou_threshold)


def clip_plan_rows(image_id: str, clips: Sequence[Clip], f: float):
    return [[image_id, c.x, c.y, c.side, f, c.seed_score] for c in clips]
