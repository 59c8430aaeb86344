# Two ways of moving reference features onto a target layout.
#
# Attention warping mixes every source position into every target position
# through a column-stochastic correlation matrix. Flow warping copies from
# one bilinear sample per target pixel. The combination map blends the two.

import sys
from pathlib import Path

import torch

from attnflow.visualize import visualize
from attnflow.warp_ops import attention_correlation, attention_warp, blend, flow_warp, identity_correlation

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "kernels"
torch.manual_seed(0)

# a small 2-channel "feature map": a bright square on a dark field
f_r = torch.zeros(1, 2, 16, 16)
f_r[:, 0, 4:8, 4:8] = 1.0
f_r[:, 1] = torch.linspace(0, 1, 16)

# a constant flow of (+3, +2) means target pixel (x, y) reads source (x + 3, y + 2),
# so the square appears shifted up and to the left
flow = torch.zeros(1, 2, 16, 16)
flow[:, 0], flow[:, 1] = 3.0, 2.0
moved = flow_warp(f_r, flow)
print("square now covers rows", moved[0, 0].nonzero()[:, 0].unique().tolist())

# identity correlation reproduces the input exactly
same = attention_warp(f_r, identity_correlation(1, 16, 16))
assert torch.equal(same, f_r)

# a learned-looking correlation: keys and queries from random projections
keys = torch.randn(1, 8, 16, 16) * 0.2
queries = keys + 0.05 * torch.randn(1, 8, 16, 16)
corr = attention_correlation(keys, queries, alpha=100.0)
print("columns sum to one:", torch.allclose(corr.sum(dim=1), torch.ones(1, 256), atol=1e-5))
print("mean max weight per column: %.3f" % corr.max(dim=1).values.mean())

# the blend is exact at its endpoints
a, f = attention_warp(f_r, corr), flow_warp(f_r, flow)
assert torch.equal(blend(a, f, torch.ones(1, 1, 16, 16)), a)
assert torch.equal(blend(a, f, torch.zeros(1, 1, 16, 16)), f)
half = blend(a, f, torch.full((1, 1, 16, 16), 0.5))
print("half-way blend max deviation from the mean: %.2e" % (half - (a + f) / 2).abs().max())

# write pictures: the flow through the colour wheel, the two warps as images
written = visualize(flow, out, "flow", display_size=128)
written += visualize(moved[:, :1], out, "flow_warped", display_size=128)
written += visualize(a[:, :1].clamp(0, 1), out, "attention_warped", display_size=128)
for p in written:
    print("wrote", p)
