"""Global-only and two-detector cascade inference, plus the local training set."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cascade import ClipConfig, crop_clip, make_training_clips, merge_results, plan_test_clips, remap_local_detections
from .dataio import Annotation
from .geometry import Detection, intersection_area, is_small
from .training import ToyDetector, decode_detections


@dataclass(frozen=True)
class CascadeConfig:
    clip: ClipConfig = field(default_factory=ClipConfig)
    score_threshold: float = 0.5
    nms_threshold: float = 0.4
    # small global detections at or above this score seed clips
    seed_threshold: float = 0.5
    merge_threshold: float = 0.4
    # keep only remapped local detections that are small in original pixels
    local_small_only: bool = True
    # drop local detections with at least this fraction of their area inside
    # a large global detection (0 disables)
    large_overlap: float = 0.5
    # drop local detections within this many source pixels of a clip edge
    # that is not also an image edge (negative disables)
    edge_margin: float = 1.0
    batch_size: int = 4

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("score_threshold", "nms_threshold", "seed_threshold",
                                          "merge_threshold", "local_small_only", "large_overlap",
                                          "edge_margin", "batch_size")}
        d["w"], d["f"] = self.clip.w, self.clip.f
        return d


def detect_global(detector: ToyDetector, image, score_threshold: float = 0.5,
                  nms_threshold: float = 0.4) -> list[Detection]:
    out, _ = detector.forward(pad_to_multiple(image))
    return decode_detections(out, score_threshold, nms_threshold)


def pad_to_multiple(image, m: int = 8):
    """Zero-pad bottom/right so both sides are multiples of ``m``; box
    coordinates are unaffected."""
    image = np.asarray(image)
    h, w = image.shape[2:]
    ph, pw = -h % m, -w % m
    if not ph and not pw:
        return image
    return np.pad(image, ((0, 0), (0, 0), (0, ph), (0, pw)))


def _truncated(box, clip, width, height, margin):
    """True when ``box`` reaches an interior edge of ``clip``."""
    x1, y1 = clip.x + clip.side, clip.y + clip.side
    return ((clip.x > 0 and box.xmin < clip.x + margin) or (clip.y > 0 and box.ymin < clip.y + margin)
            or (x1 < width and box.xmax > x1 - margin) or (y1 < height and box.ymax > y1 - margin))


def _inside_large(box, large, fraction):
    return any(intersection_area(box, g.box) >= fraction * box.area for g in large)


def _local_pass(local: ToyDetector, image, clips, cfg: CascadeConfig, large=()):
    dets = []
    f = cfg.clip.f
    h, w = image.shape[2:]
    for start in range(0, len(clips), cfg.batch_size):
        chunk = clips[start:start + cfg.batch_size]
        x = np.concatenate([crop_clip(image, c, f) for c in chunk])
        out, _ = local.forward(x)
        for k, c in enumerate(chunk):
            found = decode_detections(out[k], cfg.score_threshold, cfg.nms_threshold)
            found = remap_local_detections(found, c, f)
            if cfg.local_small_only:
                found = [d for d in found if is_small(d.box, cfg.clip.small_threshold)]
            if cfg.edge_margin >= 0:
                found = [d for d in found if not _truncated(d.box, c, w, h, cfg.edge_margin)]
            if cfg.large_overlap > 0:
                found = [d for d in found if not _inside_large(d.box, large, cfg.large_overlap)]
            dets.extend(found)
    return dets


def detect_cascade(global_det: ToyDetector, local_det: ToyDetector, image,
                   cfg: CascadeConfig = CascadeConfig()):
    """Run the global detector, zoom into clips around its small detections,
    run the local detector there and merge both sets by NMS.

    Returns ``(detections, clips)``.
    """
    image = np.asarray(image)
    h, w = image.shape[2:]
    if cfg.clip.w > min(h, w):
        raise ValueError(f"clip size {cfg.clip.w} exceeds image {w}x{h}")
    # seeds may sit below the reporting threshold
    low = min(cfg.seed_threshold, cfg.score_threshold)
    raw = detect_global(global_det, image, low, cfg.nms_threshold)
    g = [d for d in raw if d.score >= cfg.score_threshold]
    seeds = [d for d in raw if d.score >= cfg.seed_threshold and is_small(d.box, cfg.clip.small_threshold)]
    clips = plan_test_clips(seeds, w, h, cfg.clip)
    large = [d for d in g if not is_small(d.box, cfg.clip.small_threshold)]
    local = _local_pass(local_det, image, clips, cfg, large) if clips else []
    return merge_results(g, local, cfg.merge_threshold), clips


def local_training_set(dataset: Sequence, clip_cfg: ClipConfig, max_clips: int | None = None,
                       seed: int = 0, dtype=np.float32):
    """Zoomed clips around every annotated small head of ``dataset``.

    ``max_clips`` caps the set by a seeded subsample, keeping order stable;
    the subsample is drawn before any pixels are zoomed.
    """
    refs = []
    for k, (_, ann) in enumerate(dataset):
        n = sum(is_small(b, clip_cfg.small_threshold) for b in ann.boxes)
        refs += [(k, j) for j in range(n)]
    if max_clips is not None and len(refs) > max_clips:
        keep = np.sort(np.random.default_rng(seed).choice(len(refs), max_clips, replace=False))
        refs = [refs[i] for i in keep]
    wanted: dict[int, set] = {}
    for k, j in refs:
        wanted.setdefault(k, set()).add(j)
    clips = []
    for k in sorted(wanted):
        img, ann = dataset[k]
        made = make_training_clips(np.asarray(img, dtype=dtype), ann, clip_cfg)
        clips += [made[j] for j in sorted(wanted[k])]
    return clips


def run_detection(dataset: Sequence, global_det: ToyDetector, local_det: ToyDetector | None = None,
                  cfg: CascadeConfig = CascadeConfig()):
    """Detections per image id; cascade when ``local_det`` is given.

    Returns ``(detections, clips)``, both keyed by image id.
    """
    dets, plans = {}, {}
    for img, ann in dataset:
        key = ann.image_id if isinstance(ann, Annotation) else str(ann)
        if local_det is None:
            dets[key] = [d for d in detect_global(global_det, img, cfg.score_threshold, cfg.nms_threshold)]
            plans[key] = []
        else:
            dets[key], plans[key] = detect_cascade(global_det, local_det, img, cfg)
    return dets, plans
