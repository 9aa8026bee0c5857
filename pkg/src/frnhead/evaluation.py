"""Precision / recall / Hmean at a fixed score threshold, overall and binned by
average box scale."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .geometry import BBox, Detection, average_scale, detection_order, iou


@dataclass
class EvalReport:
    precision: float
    recall: float
    hmean: float
    matched: int = 0
    n_dets: int = 0
    n_gts: int = 0
    bins: list["BinRow"] = field(default_factory=list)


@dataclass
class BinRow:
    lo: float
    hi: float
    precision: float
    recall: float
    hmean: float
    gt_count: int
    det_count: int
    matched: int

    @property
    def label(self) -> str:
        return f"{self.lo:g}-{self.hi:g}" if self.hi != float("inf") else f"{self.lo:g}+"


def hmean(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _prh(matched, n_dets, n_gts):
    p = matched / n_dets if n_dets else 0.0
    r = matched / n_gts if n_gts else 0.0
    return p, r, hmean(p, r)


def match_detections(dets: Sequence[Detection], gts: Sequence[BBox], iou_threshold: float = 0.5):
    """Greedy one-to-one matching, best-scoring detection first.

    Returns ``(matches, unmatched_dets, unmatched_gts)`` with ``matches`` a
    list of ``(det, gt)``.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must be in (0, 1]")
    free = list(range(len(gts)))
    matches, unmatched = [], []
    for d in detection_order(dets):
        best, best_iou = None, iou_threshold
        for g in free:
            v = iou(d.box, gts[g])
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = g, v
        if best is None:
            unmatched.append(d)
        else:
            free.remove(best)
            matches.append((d, gts[best]))
    return matches, unmatched, [gts[g] for g in free]


def _per_image(dets, gts):
    if isinstance(dets, Mapping) or isinstance(gts, Mapping):
        dets = dets if isinstance(dets, Mapping) else {"": dets}
        gts = gts if isinstance(gts, Mapping) else {"": gts}
        keys = sorted(set(dets) | set(gts))
        return [(list(dets.get(k, [])), list(gts.get(k, []))) for k in keys]
    return [(list(dets), list(gts))]


def _gather(dets, gts, iou_threshold, score_threshold):
    rows = []
    for d_img, g_img in _per_image(dets, gts):
        kept = [d for d in d_img if d.score >= score_threshold]
        rows.append((kept, g_img, *match_detections(kept, g_img, iou_threshold)))
    return rows


def score(dets, gts, iou_threshold: float = 0.5, score_threshold: float = 0.5) -> EvalReport:
    """``dets``/``gts`` are either lists for one image or mappings
    ``image_id -> list``."""
    matched = n_dets = n_gts = 0
    for kept, g_img, matches, _, _ in _gather(dets, gts, iou_threshold, score_threshold):
        matched += len(matches)
        n_dets += len(kept)
        n_gts += len(g_img)
    return EvalReport(*_prh(matched, n_dets, n_gts), matched, n_dets, n_gts)


def scale_edges(bin_width: float = 10, max_scale: float = 70) -> list[float]:
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    edges, e = [], 0.0
    while e < max_scale:
        edges.append(e)
        e += bin_width
    return edges + [max_scale, float("inf")]


def _bin_of(scale, edges):
    for k in range(len(edges) - 1):
        if edges[k] <= scale < edges[k + 1]:
            return k
    return len(edges) - 2


def score_by_scale(dets, gts, bin_width: float = 10, max_scale: float = 70,
                   iou_threshold: float = 0.5, score_threshold: float = 0.5,
                   edges: Sequence[float] | None = None) -> EvalReport:
    """Overall report plus one row per average-scale bin.

    Ground truths go to the bin of their own scale; a matched detection
    follows its ground truth and an unmatched one is binned by its own
    predicted scale.  Scales at or above ``max_scale`` share a final open bin.
    """
    edges = list(edges) if edges is not None else scale_edges(bin_width, max_scale)
    nb = len(edges) - 1
    gt_n, det_n, hit = [0] * nb, [0] * nb, [0] * nb
    rows = _gather(dets, gts, iou_threshold, score_threshold)
    for kept, g_img, matches, unmatched, _ in rows:
        for g in g_img:
            gt_n[_bin_of(average_scale(g), edges)] += 1
        for _, g in matches:
            k = _bin_of(average_scale(g), edges)
            hit[k] += 1
            det_n[k] += 1
        for d in unmatched:
            det_n[_bin_of(average_scale(d.box), edges)] += 1
    bins = [BinRow(edges[k], edges[k + 1], *_prh(hit[k], det_n[k], gt_n[k]), gt_n[k], det_n[k], hit[k])
            for k in range(nb)]
    report = score(dets, gts, iou_threshold, score_threshold)
    report.bins = bins
    return report


def pooled(bins: Sequence[BinRow], lo: float, hi: float) -> tuple[float, float, float]:
    """P/R/H over all bins lying inside ``[lo, hi)``."""
    sel = [b for b in bins if b.lo >= lo and b.hi <= hi]
    return _prh(sum(b.matched for b in sel), sum(b.det_count for b in sel), sum(b.gt_count for b in sel))


def report_csv(report: EvalReport) -> str:
    lines = ["bin,precision,recall,hmean,gt_count,det_count,matched"]
    lines.append(f"all,{report.precision:.6f},{report.recall:.6f},{report.hmean:.6f},"
                 f"{report.n_gts},{report.n_dets},{report.matched}")
    for b in report.bins:
        lines.append(f"{b.label},{b.precision:.6f},{b.recall:.6f},{b.hmean:.6f},"
                     f"{b.gt_count},{b.det_count},{b.matched}")
    return "\n".join(lines) + "\n"


def line_svg(series: Mapping[str, Sequence[tuple[float, float]]], xlabel: str, ylabel: str,
             width: int = 480, height: int = 320) -> str:
    """Tiny dependency-free line chart; y axis fixed to [0, 1]."""
    pad = 40
    xs = [x for pts in series.values() for x, _ in pts]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - y * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" font-size="12">{xlabel}</text>',
           f'<text x="12" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 12 {height / 2:.0f})"'
           f' text-anchor="middle">{ylabel}</text>']
    for k, (name, pts) in enumerate(series.items()):
        c = colors[k % len(colors)]
        path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{path}"/>')
        out.append(f'<text x="{width - pad}" y="{pad + 14 * k}" fill="{c}" font-size="11"'
                   f' text-anchor="end">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
