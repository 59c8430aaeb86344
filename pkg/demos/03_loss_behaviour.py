# How the deformation losses respond to good and bad flows.

import math

import numpy as np
import torch

from attnflow import losses as L

torch.manual_seed(0)

# sampling correctness: exp(-cos(warped, target) / best achievable cos), averaged.
# A perfect gather sits at the floor e^-1, whatever the features are.
v_r = torch.randn(1, 16, 8, 8)
print("identity, zero flow:      %.6f  (e^-1 = %.6f)" %
      (L.sampling_correctness_from_features(torch.zeros(1, 2, 8, 8), v_r, v_r), math.exp(-1)))

# if the target is a shifted copy, the matching flow is close to the floor
v_t = torch.roll(v_r, shifts=(0, -2), dims=(2, 3))
good = torch.zeros(1, 2, 8, 8)
good[:, 0] = 2.0
# the two right-hand columns wrap around in the target and have no true source,
# so even the matching flow stays a little above the floor
for name, w in (("zero flow", torch.zeros(1, 2, 8, 8)), ("matching flow", good)):
    loss = L.sampling_correctness_from_features(w, v_r, v_t)
    print("shift, %-16s  %.4f" % (name + ":", loss))

# the affine regularizer: zero for any locally affine flow, positive for noise
ys, xs = np.mgrid[0:8, 0:8].astype(float)
A = np.array([[1.1, 0.2], [-0.1, 0.9]])
affine = np.stack([A[0, 0] * xs + A[0, 1] * ys + 1.5 - xs, A[1, 0] * xs + A[1, 1] * ys - 2.0 - ys])
noise = np.random.default_rng(0).normal(0, 2, (2, 8, 8))
for name, w in (("affine", affine), ("noise", noise)):
    print("regularizer on %-6s flow: %.2e" % (name, L.regularization_loss(torch.from_numpy(w)[None])))

# the hinge adversarial pair
real, fake = torch.full((1, 1, 4, 4), 2.0), torch.full((1, 1, 4, 4), -2.0)
g_loss, d_loss = L.adversarial_losses(real, fake)
print("confident discriminator: d_loss %.2f, g_loss %.2f" % (d_loss, g_loss))
