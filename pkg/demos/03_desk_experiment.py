"""
Global detector, concatenation baseline and the cascade
=======================================================

Trains the toy detector on 200 synthetic scenes and scores it on 50
held-out ones, by average head scale.  The full run takes roughly half an
hour on one core; pass a smaller iteration count for a quick look::

    python demos/03_desk_experiment.py 400
"""

import sys
from dataclasses import replace

from frnhead import desk
from frnhead.evaluation import line_svg
from frnhead.pipeline import CascadeConfig
from frnhead.training import DetectorConfig

iters = int(sys.argv[1]) if len(sys.argv) > 1 else desk.GLOBAL_TRAIN.iterations
train_set, test_set = desk.datasets()


def row(name, r):
    print(f"{name:<10} P={r.precision:.3f} R={r.recall:.3f} H={r.hmean:.3f} 0-20px H={desk.small_hmean(r):.3f}")


# global detector with the refine block, and the plain concatenation baseline
frn = desk.train_detector(train_set, DetectorConfig(fusion="frn"), replace(desk.GLOBAL_TRAIN, iterations=iters))
cat = desk.train_detector(train_set, DetectorConfig(fusion="concat"), replace(desk.GLOBAL_TRAIN, iterations=iters))
r_frn, r_cat = desk.evaluate(test_set, frn.detector), desk.evaluate(test_set, cat.detector)
print(f"trained in {frn.seconds:.0f} s / {cat.seconds:.0f} s CPU")
row("refine", r_frn)
row("concat", r_cat)

# the local detector sees 3x zoomed clips around small heads
clip = desk.clip_config(train_set, f=3)
local = desk.train_local(train_set, clip, replace(desk.LOCAL_TRAIN, iterations=iters))
r_cas = desk.evaluate(test_set, frn.detector, local.detector,
                      CascadeConfig(clip=clip, nms_threshold=desk.NMS_THRESHOLD))
row("cascade", r_cas)

series = {name: [(b.lo + 5, b.hmean) for b in r.bins if b.gt_count and b.hi != float("inf")]
          for name, r in (("refine", r_frn), ("concat", r_cat), ("cascade", r_cas))}
with open("desk_hmean_by_scale.svg", "w") as fh:
    fh.write(line_svg(series, "average scale (px)", "Hmean"))
print("wrote desk_hmean_by_scale.svg")
