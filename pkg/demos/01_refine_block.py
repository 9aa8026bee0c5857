"""
The feature-refine block, step by step
======================================

Three feature maps at strides 2, 4 and 8 are weighted per channel, brought
to the finest resolution with learned block upsampling, stacked and squeezed
by three parallel convolution paths.
"""

import numpy as np

from frnhead import frn as F
from frnhead.tensor import finite_diff_check

rng = np.random.default_rng(0)

# a small block: 4 + 3 + 5 input channels, 8 output channels
cfg = F.FrnConfig(fine_channels=4, mid_channels=3, coarse_channels=5, out_channels=8)
block = F.FrnBlock.create(cfg, seed=0)
print("in channels", cfg.in_channels, "paths", cfg.paths)

fine = rng.uniform(size=(1, 4, 16, 16))
mid = rng.uniform(size=(1, 3, 8, 8))
coarse = rng.uniform(size=(1, 5, 4, 4))
out, cache = F.frn_forward(fine, mid, coarse, block)
print("output", out.shape)  # half the fine resolution

# fresh weights are all ones, so weighting is a no-op and the block
# upsampling is plain pixel replication
w_out = F.channel_weight_forward(mid, block.params["cw_mid"])
print("weighting is identity:", w_out.tobytes() == mid.tobytes())
up = F.decomp_upsample_forward(mid, block.params["dm_mid"], 2)
print("upsampling is replication:", up.tobytes() == F.nearest_upsample(mid, 2).tobytes())

# with a unit upstream gradient the weight gradient is the channel sum
gf, gw = F.channel_weight_backward(np.ones_like(mid), mid, np.ones(3))
print("dL/dw == channel sums:", np.allclose(gw, mid.sum(axis=(0, 2, 3)), atol=1e-12))

# finite differences on the whole block after moving the weights off one
for k in block.params:
    block.params[k] = block.params[k] + rng.uniform(-0.3, 0.3, block.params[k].shape)
names = sorted(block.params)


def fwd(a, b, c, *ps):
    return F.frn_forward(a, b, c, F.FrnBlock(cfg, dict(zip(names, ps))))


def bwd(d, c):
    da, db, dc, g = F.frn_backward(d, c)
    return [da, db, dc] + [g[n] for n in names]


small = [rng.uniform(-1, 1, (1, 4, 8, 8)), rng.uniform(-1, 1, (1, 3, 4, 4)), rng.uniform(-1, 1, (1, 5, 2, 2))]
rep = finite_diff_check(fwd, bwd, small + [block.params[n] for n in names], tolerance=1e-4)
print(f"block gradient check: worst relative error {rep.worst:.2e}, passed={rep.passed}")
