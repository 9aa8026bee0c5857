"""
Choosing the zoom clip size
===========================

Every small head gets a square clip centred on it.  Small heads that fit
(more than 90% inside) count as signal; cut small heads and large heads
are noise.  The side with the best mean ratio wins.
"""

from frnhead.cascade import ClipConfig, make_training_clips, optimize_clip_size, plan_test_clips
from frnhead.dataio import SceneSpec, generate_dataset
from frnhead.geometry import Detection, is_small

scenes = generate_dataset(40, SceneSpec(n_small=20, n_large=3, seed=1000))
anns = [a for _, a in scenes]
n_small = sum(is_small(b) for a in anns for b in a.boxes)
print(f"{len(anns)} scenes, {n_small} small heads")

best, table = optimize_clip_size(anns)
for w, v in table.items():
    print(f"  w={w:3d}  mean SNR {v:10.3f}" + ("  <- best" if w == best else ""))

# the clips the local detector would train on
cfg = ClipConfig(w=best, f=3)
img, ann = scenes[0]
clips = make_training_clips(img, ann, cfg)
print(f"scene 0: {len(clips)} training clips of {clips[0][0].shape[-1]} px")

# at test time the clips cover the small detections greedily
dets = [Detection(b, 0.9) for b in ann.boxes if is_small(b)]
plan = plan_test_clips(dets, ann.width, ann.height, cfg)
print(f"test-time cover: {len(plan)} clips for {len(dets)} small detections")
