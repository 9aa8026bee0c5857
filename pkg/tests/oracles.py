"""Independent reference implementations used only by the tests."""
import itertools

import numpy as np


def iou_matrix(boxes):
    b = np.asarray(boxes, dtype=float).reshape(-1, 4)
    x1 = np.maximum(b[:, None, 0], b[None, :, 0])
    y1 = np.maximum(b[:, None, 1], b[None, :, 1])
    x2 = np.minimum(b[:, None, 2], b[None, :, 2])
    y2 = np.minimum(b[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area[:, None] + area[None, :] - inter)


def brute_nms(boxes, scores, thr):
    """Indices kept by greedy NMS, from a full pairwise IoU matrix."""
    n = len(boxes)
    if n == 0:
        return []
    order = sorted(range(n), key=lambda i: (-scores[i], tuple(boxes[i])))
    m = iou_matrix(boxes)
    alive = np.ones(n, bool)
    keep = []
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if m[i, j] > thr:
                alive[j] = False
    return keep


def box_inside_fraction(box, clip):
    """``box`` and ``clip`` as (x0, y0, x1, y1) tuples."""
    w = max(0.0, min(box[2], clip[2]) - max(box[0], clip[0]))
    h = max(0.0, min(box[3], clip[3]) - max(box[1], clip[1]))
    return w * h / ((box[2] - box[0]) * (box[3] - box[1]))


def clip_window(box, side, width, height):
    cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    x = min(max(int(round(cx - side / 2)), 0), width - side)
    y = min(max(int(round(cy - side / 2)), 0), height - side)
    return (x, y, x + side, y + side)


def snr_terms(clip, boxes, reserve=0.9, w_s=0.8, w_l=0.2, small=20.0):
    s = ns = nl = 0.0
    for b in boxes:
        area = (b[2] - b[0]) * (b[3] - b[1])
        inter = box_inside_fraction(b, clip) * area
        scale = ((b[2] - b[0]) + (b[3] - b[1])) / 2
        if scale < small:
            if inter > reserve * area:
                s += area
            else:
                ns += inter
        else:
            nl += inter
    denom = w_s * ns + w_l * nl
    if s == 0:
        return s, ns, nl, 0.0
    return s, ns, nl, (np.inf if denom == 0 else s / denom)


def snr_table(images, sizes, **kw):
    """``images`` is a list of ``(width, height, [box tuples])``."""
    raw = {}
    for side in sizes:
        vals = []
        for width, height, boxes in images:
            for b in boxes:
                if ((b[2] - b[0]) + (b[3] - b[1])) / 2 < kw.get("small", 20.0):
                    vals.append(snr_terms(clip_window(b, side, width, height), boxes, **kw)[3])
        raw[side] = vals
    finite = [v for vals in raw.values() for v in vals if np.isfinite(v)]
    cap = 10 * max(finite) if finite and max(finite) > 0 else 1.0
    return {s: float(np.mean([cap if not np.isfinite(v) else v for v in vals])) for s, vals in raw.items()}


def max_matching(dets, gts, thr):
    """Size of a maximum one-to-one matching with IoU >= thr (exhaustive)."""
    if not dets or not gts:
        return 0
    m = iou_matrix(list(dets) + list(gts))[:len(dets), len(dets):] >= thr
    best = 0
    if len(dets) < len(gts):
        m = m.T
    for perm in itertools.permutations(range(m.shape[0]), m.shape[1]):
        best = max(best, sum(m[i, j] for j, i in enumerate(perm)))
    return best


def random_lloyd(shapes, k, seed, iters=300):
    """Plain Lloyd with uniformly random initial centroids."""
    rng = np.random.default_rng(seed)
    x = np.asarray(shapes, float)
    c = x[rng.choice(len(x), k, replace=False)].copy()

    def dist(c):
        inter = np.minimum(x[:, None, 0], c[None, :, 0]) * np.minimum(x[:, None, 1], c[None, :, 1])
        union = (x[:, 0] * x[:, 1])[:, None] + (c[:, 0] * c[:, 1])[None, :] - inter
        return 1 - inter / union

    assign = None
    for _ in range(iters):
        d = dist(c)
        a = d.argmin(1)
        if assign is not None and np.array_equal(a, assign):
            break
        assign = a
        for j in range(k):
            if np.any(a == j):
                c[j] = x[a == j].mean(0)
    d = dist(c)
    return float(d.min(1).mean())
