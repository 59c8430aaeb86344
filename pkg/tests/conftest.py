import numpy as np
import pytest
import torch


def central_diff(fn, inputs, index, step=1e-7):
    """Central finite-difference gradient of scalar ``fn(*inputs)`` w.r.t. ``inputs[index]``."""
    x = inputs[index]
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + step
        hi = float(fn(*inputs))
        flat[k] = orig - step
        lo = float(fn(*inputs))
        flat[k] = orig
        g[k] = (hi - lo) / (2 * step)
    return grad


def analytic_grad(fn, inputs, index):
    args = [t.detach().clone().requires_grad_(i == index) for i, t in enumerate(inputs)]
    fn(*args).backward()
    return args[index].grad


def relative_error(a, b):
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), 1e-12)
    return num / den


def grad_rel_err(fn, inputs, index, step=1e-7):
    inputs = [t.detach().clone() for t in inputs]
    ga = analytic_grad(fn, inputs, index)
    with torch.no_grad():
        gn = central_diff(fn, inputs, index, step)
    return relative_error(ga, gn)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
