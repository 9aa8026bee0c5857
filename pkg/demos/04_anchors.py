"""
Anchor shapes from k-means
==========================

Box shapes are clustered with ``1 - IoU`` between co-centred boxes, so a
big box and a small box of the same aspect ratio are still far apart.
"""

import numpy as np

from frnhead.anchors import kmeans_anchors, lloyd_history
from frnhead.dataio import SceneSpec, generate_dataset

anns = [a for _, a in generate_dataset(30, SceneSpec(n_small=20, n_large=3, seed=7))]
shapes = np.array([[b.width, b.height] for a in anns for b in a.boxes])
print(f"{len(shapes)} boxes, widths {shapes[:, 0].min():.1f}..{shapes[:, 0].max():.1f} px")

for k in (2, 3, 5):
    cents, dist = kmeans_anchors(shapes, k)
    print(f"k={k}: mean distance {dist:.4f}  anchors", np.round(cents, 1).tolist())

# a single run never makes the objective worse
hist = lloyd_history(shapes, 5, seed=3)
print("one Lloyd run:", " -> ".join(f"{h:.4f}" for h in hist[:6]))
