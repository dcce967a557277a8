"""Central finite-difference gradient checks shared by the test modules."""

import torch


def numeric_grad(fn, tensor, eps=1e-6):
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``tensor`` (in place)."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        plus = float(fn())
        flat[i] = orig - eps
        minus = float(fn())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def max_relative_error(fn, tensors, eps=1e-6):
    """Largest norm-wise relative error ``|g_a - g_n|_inf / |g_n|_inf`` over ``tensors``.

    Tensors whose numeric gradient is identically zero are compared by absolute error.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
        with torch.no_grad():
            numeric = numeric_grad(fn, t, eps)
        scale = numeric.abs().max().item()
        err = (analytic - numeric).abs().max().item()
        worst = max(worst, err / scale if scale > 1e-12 else err)
    return worst
