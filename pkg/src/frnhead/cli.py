"""Command-line entry point: ``frnhead <command> [options]``.

Exit codes: 0 success, 1 user error (bad flags, config or inputs), 2 a failed
internal invariant (gradient check, divergence).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import frn as F
from .anchors import kmeans_anchors
from .cascade import ClipConfig, clip_plan_rows, optimize_clip_size, plan_test_clips
from .certify import run_suite
from .dataio import (
    CLIP_FIELDS,
    Annotation,
    SceneSpec,
    encode_image,
    generate_dataset,
    load_annotations,
    load_image,
    parse_voc_xml,
    read_detections_csv,
    write_detections_csv,
    write_voc_xml,
)
from .evaluation import line_svg, report_csv, score_by_scale
from .geometry import is_small
from .pipeline import CascadeConfig, local_training_set, pad_to_multiple, run_detection
from .tensor import load_params
from .training import DetectorConfig, DivergenceError, ToyDetector, TrainConfig, train

log = logging.getLogger("frnhead")

IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")


class UserError(Exception):
    """Bad input from the caller; maps to exit code 1."""


class InvariantError(Exception):
    """A check the code itself guarantees failed; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(message)


# --------------------------------------------------------------------------
# flat key=value config

def parse_config_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"config line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists() or p.is_dir():
        raise UserError(f"config file {p} not found")
    return parse_config_text(p.read_text())


def _coerce(value: str, default):
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple) and default and isinstance(default[0], tuple):
            # lr_stages=0.5:0.01,0.8:0.001,1:0.0001
            return tuple(tuple(float(v) for v in part.split(":")) for part in value.split(","))
        if isinstance(default, tuple) or default is None:
            parts = [v for v in value.replace(" ", "").split(",") if v]
            return tuple(int(v) if v.lstrip("-").isdigit() else float(v) for v in parts)
    except ValueError:
        raise UserError(f"cannot read {value!r} as {type(default).__name__}") from None
    return value


def apply_config(obj, cfg: dict, used: set, prefix: str = ""):
    """Override dataclass fields of ``obj`` from ``cfg``."""
    changes = {}
    for f in fields(obj):
        for key in (prefix + f.name, f.name) if prefix else (f.name,):
            if key in cfg:
                changes[f.name] = _coerce(cfg[key], getattr(obj, f.name))
                used.add(key)
                break
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as e:
        raise UserError(str(e)) from None


def _check_unused(cfg: dict, used: set):
    extra = sorted(set(cfg) - used)
    if extra:
        raise UserError(f"unknown config keys: {', '.join(extra)}")


# --------------------------------------------------------------------------
# manifest and outputs

def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the stamp so reruns are byte-identical
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


class Run:
    """Collects outputs of one command and writes ``manifest.json``."""

    def __init__(self, args, argv):
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.args, self.argv = args, list(argv)
        self.outputs: list[str] = []
        self.inputs: list[str] = []
        self.config: dict = {}

    def write(self, name: str, data: bytes | str):
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data.encode() if isinstance(data, str) else data)
        self.outputs.append(name)
        return path

    def add_output(self, name: str):
        self.outputs.append(name)

    def finish(self):
        digests = {}
        for name in sorted(set(self.outputs)):
            p = self.out_dir / name
            files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
            h = hashlib.sha256()
            for q in files:
                h.update(q.relative_to(self.out_dir).as_posix().encode())
                h.update(q.read_bytes())
            digests[name] = h.hexdigest()
        manifest = {
            "command": self.args.command,
            "argv": self.argv,
            "config": self.config,
            "seed": getattr(self.args, "seed", None),
            "inputs": sorted(set(self.inputs)),
            "outputs": digests,
            "timestamp": _timestamp(),
            "version": __version__,
        }
        (self.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# dataset directories: <id>.pgm|.ppm plus optional <id>.xml

def _to_gray(img, channels):
    if img.shape[1] == channels:
        return img
    if channels == 1:
        return img.mean(axis=1, keepdims=True)
    raise UserError(f"image has {img.shape[1]} channels, detector wants {channels}")


def load_dataset_dir(directory, need_annotations=True, channels: int = 1):
    d = Path(directory)
    if not d.is_dir():
        raise UserError(f"dataset directory {d} not found")
    images = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise UserError(f"no PGM/PPM images in {d}")
    out = []
    for p in images:
        try:
            img = _to_gray(load_image(p), channels)
        except ValueError as e:
            raise UserError(f"{p}: {e}") from None
        xml = p.with_suffix(".xml")
        if xml.exists():
            try:
                ann = parse_voc_xml(xml.read_bytes(), image_id=p.stem)
            except ValueError as e:
                raise UserError(str(e)) from None
            ann = Annotation(p.stem, ann.width, ann.height, ann.boxes)
        elif need_annotations:
            raise UserError(f"missing annotation {xml}")
        else:
            ann = Annotation(p.stem, img.shape[3], img.shape[2], [])
        out.append((img, ann))
    return out


def _load_checkpoint(path):
    if path is None:
        raise UserError("checkpoint path required")
    p = Path(path)
    if not (p / "manifest.txt").is_file():
        raise UserError(f"checkpoint {p} not found")
    det = ToyDetector.load(p)
    _, meta = load_params(p)
    return det, meta


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# --------------------------------------------------------------------------
# commands

def cmd_make_dataset(args, run):
    cfg = read_config(args.config)
    used: set = set()
    spec = apply_config(SceneSpec(seed=args.seed), cfg, used)
    _check_unused(cfg, used)
    run.config = {k: getattr(spec, k) for k in spec.__dict__}
    for img, ann in generate_dataset(args.n, spec, prefix=args.prefix):
        run.write(f"{ann.image_id}.pgm", encode_image(img))
        run.write(f"{ann.image_id}.xml", write_voc_xml(ann))
    return 0


def cmd_gradcheck(args, run):
    corrupt = frozenset(args.corrupt or ())
    try:
        results = run_suite(seed=args.seed, corrupt=corrupt)
    except KeyError as e:
        raise UserError(str(e)) from None
    rows = [[r.name, f"{r.max_rel_error:.3e}", f"{r.tolerance:.0e}", "pass" if r.passed else "FAIL"]
            for r in results]
    run.write("gradcheck.csv", _csv(["op", "max_rel_error", "tolerance", "result"], rows))
    for row in rows:
        print(f"{row[0]:<22} {row[1]} (< {row[2]}) {row[3]}")
    run.config = {"corrupt": sorted(corrupt)}
    if not all(r.passed for r in results):
        raise InvariantError("gradient check failed for " + ", ".join(r.name for r in results if not r.passed))
    return 0


def _resolve_clip(cfg, used, dataset, meta=None):
    clip = ClipConfig()
    if meta and "clip" in meta:
        clip = ClipConfig(w=int(meta["clip"]["w"]), f=float(meta["clip"]["f"]))
    w = cfg.get("w", "auto" if meta is None or "clip" not in meta else str(clip.w))
    used.add("w")
    rest = {k: v for k, v in cfg.items() if k != "w"}
    clip = apply_config(clip, rest, used)
    if w == "auto":
        if dataset is None:
            raise UserError("w=auto needs annotated data")
        best, _ = optimize_clip_size([a for _, a in dataset], clip)
        clip = replace(clip, w=int(best))
    else:
        clip = replace(clip, w=int(_coerce(w, 0)))
    return clip


def cmd_train(args, run):
    if args.config is None:
        raise UserError("train needs --config")
    cfg = read_config(args.config)
    used: set = set()
    dcfg = apply_config(DetectorConfig(), cfg, used)
    tcfg = apply_config(TrainConfig(seed=args.seed), cfg, used)
    data = load_dataset_dir(args.dataset_dir, channels=dcfg.in_channels)
    extra = {}
    if args.role == "local":
        clip = _resolve_clip(cfg, used, data)
        max_clips = int(cfg["max_clips"]) if "max_clips" in cfg else None
        used.add("max_clips")
        data = local_training_set(data, clip, max_clips, seed=args.seed)
        if not data:
            raise UserError("no small heads in the dataset, nothing to train the local detector on")
        extra["clip"] = {"w": clip.w, "f": clip.f}
    _check_unused(cfg, used)
    det = ToyDetector.create(dcfg, seed=args.seed)
    try:
        det, curve = train(det, data, tcfg, log_every=args.log_every)
    except DivergenceError as e:
        raise InvariantError(str(e)) from None
    det.save(run.out_dir / "checkpoint", extra={"role": args.role, **extra})
    run.add_output("checkpoint")
    run.write("loss_curve.csv", _csv(["iteration", "loss"], [[i + 1, _fmt(l)] for i, l in enumerate(curve)]))
    run.inputs.append(str(args.dataset_dir))
    run.config = {"role": args.role, "detector": dcfg.to_dict(), "train": _dc_dict(tcfg), **extra,
                  "n_train": len(data)}
    return 0


def _dc_dict(obj):
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _cascade_config(cfg, used, meta, data):
    clip = _resolve_clip(cfg, used, data, meta)
    return apply_config(CascadeConfig(clip=clip), cfg, used)


def cmd_detect(args, run):
    cfg = read_config(args.config)
    used: set = set()
    g, _ = _load_checkpoint(args.global_ckpt)
    data = load_dataset_dir(args.dataset_dir, need_annotations=False, channels=g.config.in_channels)
    local, meta = (None, None)
    if args.mode == "cascade":
        if args.local_ckpt is None:
            raise UserError("cascade mode needs --local-ckpt")
        local, meta = _load_checkpoint(args.local_ckpt)
    ccfg = _cascade_config(cfg, used, meta or {"clip": {"w": ClipConfig().w, "f": ClipConfig().f}}, None)
    _check_unused(cfg, used)
    dets, plans = run_detection(data, g, local, ccfg)
    run.write("detections.csv", write_detections_csv(dets))
    if args.mode == "cascade":
        rows = [r for k in sorted(plans) for r in clip_plan_rows(k, plans[k], ccfg.clip.f)]
        run.write("clips.csv", _csv(CLIP_FIELDS, [[_fmt(v) for v in r] for r in rows]))
    run.inputs += [str(args.dataset_dir), str(args.global_ckpt)] + ([str(args.local_ckpt)] if local else [])
    run.config = {"mode": args.mode, **ccfg.to_dict()}
    return 0


def _read_dets(path):
    p = Path(path)
    if not p.is_file():
        raise UserError(f"detections file {p} not found")
    try:
        return read_detections_csv(p.read_text())
    except (KeyError, ValueError) as e:
        raise UserError(f"bad detections CSV {p}: {e}") from None


def cmd_evaluate(args, run):
    cfg = read_config(args.config)
    keys = {"iou_threshold": 0.5, "score_threshold": 0.5, "bin_width": 10.0, "max_scale": 70.0}
    vals = {k: _coerce(cfg.pop(k), d) if k in cfg else d for k, d in keys.items()}
    _check_unused(cfg, set())
    dets = _read_dets(args.detections)
    gts = {a.image_id: a.boxes for _, a in load_dataset_dir(args.dataset_dir)}
    r = score_by_scale(dets, gts, **vals)
    run.write("eval.csv", report_csv(r))
    pts = [((b.lo + min(b.hi, b.lo + vals["bin_width"])) / 2, b.hmean) for b in r.bins if b.gt_count]
    run.write("hmean_by_scale.svg", line_svg({"Hmean": pts}, "average scale (px)", "Hmean"))
    print(f"P={r.precision:.4f} R={r.recall:.4f} H={r.hmean:.4f}")
    run.inputs += [str(args.detections), str(args.dataset_dir)]
    run.config = vals
    return 0


def ablation_thresholds(block: F.FrnBlock, percentiles):
    w = np.abs(np.concatenate([block.params["cw_" + g] for g in F.GROUPS]))
    return [float(np.percentile(w, p)) if p > 0 else 0.0 for p in percentiles]


def cmd_ablate(args, run):
    cfg = read_config(args.config)
    score_thr = _coerce(cfg.pop("score_threshold"), 0.5) if "score_threshold" in cfg else 0.5
    nms_thr = _coerce(cfg.pop("nms_threshold"), 0.3) if "nms_threshold" in cfg else 0.3
    percentiles = _coerce(cfg.pop("percentiles"), ()) if "percentiles" in cfg else tuple(range(0, 100, 10))
    _check_unused(cfg, set())
    det, _ = _load_checkpoint(args.checkpoint)
    if det.config.fusion != "frn":
        raise UserError("ablation needs a detector with a refine block")
    data = load_dataset_dir(args.dataset_dir, channels=det.config.in_channels)
    gts = {a.image_id: a.boxes for _, a in data}
    ccfg = CascadeConfig(score_threshold=score_thr, nms_threshold=nms_thr)
    rows, pts = [], []
    for p, thr in zip(percentiles, ablation_thresholds(det.block, percentiles)):
        block, counts = F.ablate_channels(det.block, thr)
        dets, _ = run_detection(data, det.with_block(block), None, ccfg)
        h = score_by_scale(dets, gts, score_threshold=score_thr).hmean
        rows.append([_fmt(float(p)), _fmt(thr), sum(counts.values()), *(counts[g] for g in F.GROUPS), _fmt(h)])
        pts.append((float(p), h))
    run.write("ablation.csv", _csv(["percentile", "threshold", "zeroed", *(f"zeroed_{g}" for g in F.GROUPS),
                                    "hmean"], rows))
    run.write("ablation.svg", line_svg({"Hmean": pts}, "weight threshold (percentile)", "Hmean"))
    run.inputs += [str(args.checkpoint), str(args.dataset_dir)]
    run.config = {"percentiles": list(percentiles), "score_threshold": score_thr, "nms_threshold": nms_thr}
    return 0


def heat_ppm(a) -> bytes:
    """Map a 2-D array to a black-red-yellow-white P6 image."""
    a = np.asarray(a, dtype=np.float64)
    span = a.max() - a.min()
    t = (a - a.min()) / span if span > 0 else np.zeros_like(a)
    rgb = np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)])
    return encode_image(rgb[None])


def cmd_heatmap(args, run):
    det, _ = _load_checkpoint(args.checkpoint)
    if det.config.fusion != "frn":
        raise UserError("heatmaps need a detector with a refine block")
    p = Path(args.image)
    if not p.is_file():
        raise UserError(f"image {p} not found")
    img = _to_gray(load_image(p), det.config.in_channels)
    feats, _ = det.features(pad_to_multiple(img).astype(det.params["head_w"].dtype))
    ranking = F.weight_ranking(det.block)
    if args.top_k < 1:
        raise UserError("--top-k must be >= 1")
    by_group = dict(zip(F.GROUPS, feats))
    scale = {g: 2 ** (k + 1) for k, g in enumerate(F.GROUPS)}
    for rank, (g, idx, w) in enumerate(ranking[:args.top_k]):
        fmap = by_group[g][0, idx] * w
        fmap = fmap.repeat(scale[g], 0).repeat(scale[g], 1)[:img.shape[2], :img.shape[3]]
        run.write(f"heatmap_{rank + 1:02d}_{g}{idx}.ppm", heat_ppm(fmap))
    run.write("weight_ranking.csv", _csv(["rank", "group", "channel", "weight"],
                                         [[k + 1, g, i, _fmt(w)] for k, (g, i, w) in enumerate(ranking)]))
    run.inputs += [str(args.checkpoint), str(args.image)]
    run.config = {"top_k": args.top_k}
    return 0


def cmd_plan_clips(args, run):
    cfg = read_config(args.config)
    used: set = set()
    seed_thr = _coerce(cfg["seed_threshold"], 0.5) if "seed_threshold" in cfg else 0.5
    used.add("seed_threshold")
    clip = _resolve_clip({k: v for k, v in cfg.items() if k != "seed_threshold"}, used, None,
                         {"clip": {"w": ClipConfig().w, "f": ClipConfig().f}})
    _check_unused(cfg, used)
    dets = _read_dets(args.detections)
    sizes = {a.image_id: (a.width, a.height)
             for _, a in load_dataset_dir(args.dataset_dir, need_annotations=False)}
    rows = []
    for k in sorted(dets):
        if k not in sizes:
            raise UserError(f"no image for detections of {k!r}")
        seeds = [d for d in dets[k] if d.score >= seed_thr and is_small(d.box, clip.small_threshold)]
        rows += clip_plan_rows(k, plan_test_clips(seeds, *sizes[k], clip), clip.f)
    run.write("clips.csv", _csv(CLIP_FIELDS, [[_fmt(v) for v in r] for r in rows]))
    run.inputs += [str(args.detections), str(args.dataset_dir)]
    run.config = {"w": clip.w, "f": clip.f, "seed_threshold": seed_thr}
    return 0


def cmd_clip_size(args, run):
    cfg = read_config(args.config)
    used: set = set()
    clip = apply_config(ClipConfig(), cfg, used)
    _check_unused(cfg, used)
    anns = _annotations_only(args.dataset_dir)
    try:
        best, table = optimize_clip_size(anns, clip)
    except ValueError as e:
        raise UserError(str(e)) from None
    run.write("snr_table.csv", _csv(["w", "mean_snr"], [[s, _fmt(v)] for s, v in sorted(table.items())]))
    run.write("snr.svg", _snr_svg(table))
    print(f"best w = {best}")
    run.inputs.append(str(args.dataset_dir))
    run.config = {"sizes": list(clip.sizes), "best": best}
    return 0


def _annotations_only(directory):
    d = Path(directory)
    if not d.is_dir():
        raise UserError(f"dataset directory {d} not found")
    anns = list(load_annotations(d).values())
    if not anns:
        raise UserError(f"no annotations in {d}")
    return anns


def _snr_svg(table):
    top = max(table.values()) or 1.0
    return line_svg({"mean SNR (scaled)": [(s, v / top) for s, v in sorted(table.items())]},
                    "clip size w (px)", "mean SNR / max")


def cmd_anchors(args, run):
    anns = _annotations_only(args.dataset_dir)
    shapes = np.array([[b.width, b.height] for a in anns for b in a.boxes])
    if len(shapes) < args.k:
        raise UserError(f"need at least k={args.k} boxes, found {len(shapes)}")
    cents, dist = kmeans_anchors(shapes, args.k, seed=args.seed)
    run.write("anchors.csv", _csv(["width", "height"], [[_fmt(w), _fmt(h)] for w, h in cents]))
    print(f"mean 1-IoU distance {dist:.4f}")
    run.inputs.append(str(args.dataset_dir))
    run.config = {"k": args.k, "mean_distance": dist}
    return 0


# --------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="frnhead", description="Feature-refine head detection toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, dataset=False):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--out-dir", required=True)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--config")
        if dataset:
            s.add_argument("--dataset-dir", required=True)
        s.set_defaults(fn=fn)
        return s

    s = add("make-dataset", cmd_make_dataset, "write a synthetic scene dataset")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--prefix", default="scene")
    s = add("gradcheck", cmd_gradcheck, "finite-difference check of every differentiable op")
    s.add_argument("--corrupt", action="append", help="test hook: perturb this op's backward")
    s = add("train", cmd_train, "train a global or local detector", dataset=True)
    s.add_argument("--role", choices=["global", "local"], default="global")
    s.add_argument("--log-every", type=int, default=0)
    s = add("detect", cmd_detect, "detect heads in a directory of images", dataset=True)
    s.add_argument("--mode", choices=["global-only", "cascade"], default="global-only")
    s.add_argument("--global-ckpt", required=True)
    s.add_argument("--local-ckpt")
    s = add("evaluate", cmd_evaluate, "precision/recall/Hmean by scale", dataset=True)
    s.add_argument("--detections", required=True)
    s = add("ablate", cmd_ablate, "Hmean against channel-weight threshold", dataset=True)
    s.add_argument("--checkpoint", required=True)
    s = add("heatmap", cmd_heatmap, "heatmaps of the largest-weight channels")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--top-k", type=int, default=2)
    s = add("plan-clips", cmd_plan_clips, "test-time clip cover from detections", dataset=True)
    s.add_argument("--detections", required=True)
    add("clip-size", cmd_clip_size, "mean clip SNR per candidate size", dataset=True)
    s = add("anchors", cmd_anchors, "k-means anchor shapes", dataset=True)
    s.add_argument("--k", type=int, default=5)
    r = sub.add_parser("rerun", help="repeat the run recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("--out-dir", required=True)
    return p


def _rerun_argv(manifest_path, out_dir):
    p = Path(manifest_path)
    if not p.is_file():
        raise UserError(f"manifest {p} not found")
    try:
        argv = json.loads(p.read_text())["argv"]
    except (ValueError, KeyError):
        raise UserError(f"{p} is not a run manifest") from None
    if "--out-dir" in argv:
        i = argv.index("--out-dir")
        argv = argv[:i] + ["--out-dir", out_dir] + argv[i + 2:]
    return argv


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command == "rerun":
            return main(_rerun_argv(args.manifest, args.out_dir))
        run = Run(args, argv)
        code = args.fn(args, run)
        run.finish()
        return code
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except InvariantError as e:
        print(f"invariant failure: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FloatingPointError, AssertionError) as e:
        print(f"invariant failure: {e}", file=sys.stderr)
        return 2
