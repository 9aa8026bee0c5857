"""The desk-scale experiment: seeded synthetic train/test scenes, global and
local detector training, and scoring helpers shared by demos and tests."""
from __future__ import annotations

import time
from dataclasses import dataclass

from .cascade import ClipConfig, optimize_clip_size
from .dataio import SceneSpec, generate_dataset
from .evaluation import EvalReport, pooled, score_by_scale
from .pipeline import CascadeConfig, local_training_set, run_detection
from .training import DetectorConfig, ToyDetector, TrainConfig, train

TRAIN_SPEC = SceneSpec(seed=1000)
TEST_SPEC = SceneSpec(seed=5000)
N_TRAIN, N_TEST = 200, 50
GLOBAL_TRAIN = TrainConfig()
LOCAL_TRAIN = TrainConfig(iterations=3000)
MAX_LOCAL_CLIPS = 1500
NMS_THRESHOLD = 0.3
SMALL_BAND = (0.0, 20.0)


def datasets(n_train: int = N_TRAIN, n_test: int = N_TEST):
    return (generate_dataset(n_train, TRAIN_SPEC, prefix="train"),
            generate_dataset(n_test, TEST_SPEC, prefix="test"))


@dataclass
class Trained:
    detector: ToyDetector
    curve: list
    seconds: float


def train_detector(dataset, config: DetectorConfig = DetectorConfig(), cfg: TrainConfig = GLOBAL_TRAIN,
                   seed: int = 0, log_every: int = 0) -> Trained:
    det = ToyDetector.create(config, seed=seed)
    t = time.process_time()
    _, curve = train(det, dataset, cfg, log_every=log_every)
    return Trained(det, curve, time.process_time() - t)


def clip_config(train_set, f: float = 3) -> ClipConfig:
    """Clip size chosen by the SNR optimizer on the training annotations."""
    w, _ = optimize_clip_size([a for _, a in train_set], ClipConfig(f=f))
    return ClipConfig(w=w, f=f)


def train_local(train_set, clip: ClipConfig, cfg: TrainConfig = LOCAL_TRAIN, seed: int = 1,
                max_clips: int | None = MAX_LOCAL_CLIPS, log_every: int = 0) -> Trained:
    clips = local_training_set(train_set, clip, max_clips, seed=seed)
    return train_detector(clips, DetectorConfig(), cfg, seed=seed, log_every=log_every)


def evaluate(test_set, global_det, local_det=None, cfg: CascadeConfig | None = None) -> EvalReport:
    cfg = cfg or CascadeConfig(nms_threshold=NMS_THRESHOLD)
    dets, _ = run_detection(test_set, global_det, local_det, cfg)
    return score_by_scale(dets, {a.image_id: a.boxes for _, a in test_set},
                          iou_threshold=0.5, score_threshold=cfg.score_threshold)


def small_hmean(report: EvalReport) -> float:
    return pooled(report.bins, *SMALL_BAND)[2]


def bin_hmean(report: EvalReport, lo: float) -> float:
    return next(b.hmean for b in report.bins if b.lo == lo)
