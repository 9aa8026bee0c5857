"""Annotation and image I/O plus a synthetic disk-scene generator.

Supports the Pascal VOC XML subset (``annotation/size`` and
``object/bndbox``), raw PGM (P5) / PPM (P6) images with maxval 255, and the
detection / clip-plan CSV tables used by the command line tools.
"""
from __future__ import annotations

import csv
import io
import re
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import BBox, Detection, SMALL_THRESHOLD, iou


@dataclass
class Annotation:
    image_id: str
    width: int
    height: int
    boxes: list[BBox] = field(default_factory=list)


class AnnotationError(ValueError):
    pass


# --------------------------------------------------------------------------
# VOC XML

def _num(text: str | None, what: str) -> float:
    if text is None:
        raise AnnotationError(f"missing {what}")
    try:
        return float(text.strip())
    except ValueError as exc:
        raise AnnotationError(f"{what} is not a number: {text!r}") from exc


def parse_voc_xml(data: bytes | str, names: Iterable[str] | None = None,
                  strict: bool = False, image_id: str | None = None) -> Annotation:
    """Parse a VOC annotation.

    ``names`` restricts which object classes are kept (default: all).  Boxes
    reaching outside the image are clamped with a warning, or rejected when
    ``strict``.
    """
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise AnnotationError(f"malformed XML: {exc}") from exc
    size = root.find("size")
    if size is None:
        raise AnnotationError("missing <size>")
    width = int(_num(size.findtext("width"), "size/width"))
    height = int(_num(size.findtext("height"), "size/height"))
    if image_id is None:
        image_id = (root.findtext("filename") or "").strip()
        image_id = Path(image_id).stem if image_id else "image"
    keep = set(names) if names is not None else None

    boxes = []
    for obj in root.iter("object"):
        name = (obj.findtext("name") or "").strip()
        if keep is not None and name not in keep:
            continue
        bnd = obj.find("bndbox")
        if bnd is None:
            raise AnnotationError("object without <bndbox>")
        coords = [_num(bnd.findtext(k), f"bndbox/{k}") for k in ("xmin", "ymin", "xmax", "ymax")]
        clamped = [
            min(max(coords[0], 0.0), width), min(max(coords[1], 0.0), height),
            min(max(coords[2], 0.0), width), min(max(coords[3], 0.0), height),
        ]
        if clamped != coords:
            if strict:
                raise AnnotationError(f"box {coords} outside image {width}x{height}")
            warnings.warn(f"{image_id}: box {coords} clamped to image {width}x{height}")
        try:
            boxes.append(BBox(*clamped))
        except ValueError:
            warnings.warn(f"{image_id}: dropping empty box {coords}")
    return Annotation(image_id, width, height, boxes)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_voc_xml(ann: Annotation, name: str = "head") -> bytes:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = ann.image_id
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(ann.width)
    ET.SubElement(size, "height").text = str(ann.height)
    ET.SubElement(size, "depth").text = "1"
    for b in ann.boxes:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = name
        bnd = ET.SubElement(obj, "bndbox")
        for key, v in zip(("xmin", "ymin", "xmax", "ymax"), b.as_tuple()):
            ET.SubElement(bnd, key).text = _fmt(v)
    ET.indent(root)
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


def load_annotations(directory) -> dict[str, Annotation]:
    out = {}
    for path in sorted(Path(directory).glob("*.xml")):
        ann = parse_voc_xml(path.read_bytes(), image_id=path.stem)
        out[ann.image_id] = ann
    return out


# --------------------------------------------------------------------------
# PGM / PPM

_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def decode_image(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes to a 1xCxHxW float64 tensor in [0, 1]."""
    m = _HEADER.match(data)
    if not m:
        raise ValueError(f"unsupported image format (magic {data[:2]!r}); only P5/P6 are read")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}; only 255 is read")
    channels = 1 if magic == b"P5" else 3
    body = data[m.end():m.end() + w * h * channels]
    if len(body) != w * h * channels:
        raise ValueError("truncated pixel data")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)
    return (pix.transpose(2, 0, 1)[None].astype(np.float64)) / 255.0


def encode_image(x) -> bytes:
    """Encode a 1x1xHxW (P5) or 1x3xHxW (P6) tensor of values in [0, 1]."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None, None]
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] not in (1, 3):
        raise ValueError(f"cannot encode tensor of shape {x.shape}")
    _, c, h, w = x.shape
    pix = np.clip(np.rint(x[0] * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + pix.tobytes()


def load_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def save_image(path, x):
    Path(path).write_bytes(encode_image(x))


# --------------------------------------------------------------------------
# CSV tables

DETECTION_FIELDS = ["image_id", "xmin", "ymin", "xmax", "ymax", "score"]
CLIP_FIELDS = ["image_id", "x", "y", "w", "f", "seed_score"]


def write_detections_csv(per_image: dict[str, list[Detection]]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(DETECTION_FIELDS)
    for image_id in sorted(per_image):
        for d in per_image[image_id]:
            wr.writerow([image_id, *(repr(float(v)) for v in d.box.as_tuple()), repr(float(d.score))])
    return buf.getvalue()


def read_detections_csv(text: str) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        box = BBox(*(float(row[k]) for k in ("xmin", "ymin", "xmax", "ymax")))
        out.setdefault(row["image_id"], []).append(Detection(box, float(row["score"])))
    return out


# --------------------------------------------------------------------------
# synthetic scenes

BACKGROUND = 0.15


@dataclass
class SceneSpec:
    width: int = 256
    height: int = 256
    n_small: int = 6
    n_large: int = 3
    small_radius: tuple[float, float] = (4.0, 10.0)
    large_radius: tuple[float, float] = (12.0, 35.0)
    noise: float = 0.05
    # width in px of the dark outline drawn around each disk (0 disables)
    rim: float = 1.0
    max_iou: float = 0.3
    seed: int = 0
    max_tries: int = 2000

    def __post_init__(self):
        for lo, hi in (self.small_radius, self.large_radius):
            if not 0 < lo <= hi:
                raise ValueError("radius ranges must be positive and ordered")
        if self.n_small < 0 or self.n_large < 0:
            raise ValueError("population counts must be >= 0")


class PlacementError(RuntimeError):
    pass


def _paint(img, cx, cy, r, intensity):
    h, w = img.shape
    x0, x1 = max(int(cx - r - 2), 0), min(int(cx + r + 2) + 1, w)
    y0, y1 = max(int(cy - r - 2), 0), min(int(cy + r + 2) + 1, h)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d = np.hypot(xx + 0.5 - cx, yy + 0.5 - cy)
    cover = np.clip(r - d + 0.5, 0.0, 1.0)
    patch = img[y0:y1, x0:x1]
    img[y0:y1, x0:x1] = patch * (1 - cover) + intensity * cover


def _render_disk(img, cx, cy, r, intensity, rim=0.0):
    # a dark rim keeps a disk visible over another disk of similar intensity
    if rim > 0:
        _paint(img, cx, cy, r, BACKGROUND)
        _paint(img, cx, cy, max(r - rim, 0.5), intensity)
    else:
        _paint(img, cx, cy, r, intensity)


def generate_scene(spec: SceneSpec, image_id: str = "scene"):
    """Render bright disks on a noisy background.

    Returns ``(image 1x1xHxW, Annotation)``.  Small disks have average scale
    below 20 px, large ones at least 24 px.  Ground-truth boxes never overlap
    above ``spec.max_iou``.
    """
    rng = np.random.default_rng(spec.seed)
    lo_s, hi_s = spec.small_radius
    if 2 * hi_s >= SMALL_THRESHOLD:
        hi_s = min(hi_s, SMALL_THRESHOLD / 2 - 1e-6)
    radii = [("s", r) for r in rng.uniform(lo_s, hi_s, spec.n_small)]
    radii += [("l", r) for r in rng.uniform(*spec.large_radius, spec.n_large)]
    # large first so the dense small population fills around them
    radii.sort(key=lambda t: -t[1])

    boxes: list[BBox] = []
    disks = []
    for _, r in radii:
        if 2 * r > min(spec.width, spec.height):
            raise PlacementError(f"radius {r} does not fit in {spec.width}x{spec.height}")
        for _ in range(spec.max_tries):
            cx = rng.uniform(r, spec.width - r)
            cy = rng.uniform(r, spec.height - r)
            cand = BBox(cx - r, cy - r, cx + r, cy + r)
            if all(iou(cand, b) <= spec.max_iou for b in boxes):
                break
        else:
            raise PlacementError(f"could not place disk of radius {r:.1f} after {spec.max_tries} tries")
        boxes.append(cand)
        disks.append((cx, cy, r))

    img = BACKGROUND + spec.noise * rng.standard_normal((spec.height, spec.width))
    for cx, cy, r in disks:
        _render_disk(img, cx, cy, r, rng.uniform(0.6, 1.0), spec.rim)
    img = np.clip(img, 0.0, 1.0)
    order = sorted(range(len(boxes)), key=lambda k: boxes[k].as_tuple())
    ann = Annotation(image_id, spec.width, spec.height, [boxes[k] for k in order])
    return img[None, None], ann


def generate_dataset(n: int, spec: SceneSpec, prefix: str = "scene"):
    """``n`` scenes with seeds ``spec.seed, spec.seed + 1, ...``."""
    out = []
    for k in range(n):
        s = SceneSpec(**{**spec.__dict__, "seed": spec.seed + k})
        out.append(generate_scene(s, f"{prefix}{k:04d}"))
    return out
