"""Central finite-difference gradient checks for custom layers and losses.

`fd_gradient` perturbs one leaf tensor of a scalar-valued closure; the
comparison helpers report a symmetric relative error against autograd."""
from __future__ import annotations

import torch


def fd_gradient(fn, tensor, eps=None) -> torch.Tensor:
    """Central differences of scalar fn() w.r.t. `tensor` (perturbed in place,
    restored afterwards). fn must be deterministic across calls."""
    # float32 arithmetic noise dominates small steps; smooth losses tolerate
    # the larger default step
    if eps is None:
        eps = 1e-5 if tensor.dtype == torch.float64 else 5e-2
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        f_plus = float(fn())
        flat[i] = orig - eps
        f_minus = float(fn())
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    diff = (analytic - numeric).norm().item()
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return diff / scale


def check_gradients(fn, tensors, eps=None, threshold=1e-3) -> dict:
    """Compare autograd gradients of scalar fn() against central differences
    for every named leaf in `tensors`. Returns {name: relative_error} and
    raises AssertionError when any error exceeds the threshold."""
    for t in tensors.values():
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    loss = fn()
    loss.backward()
    errors = {}
    with torch.no_grad():
        analytic = {name: t.grad.clone() for name, t in tensors.items()}
    for name, t in tensors.items():
        numeric = fd_gradient(lambda: fn().detach(), t, eps=eps)
        errors[name] = relative_error(analytic[name], numeric)
    bad = {k: v for k, v in errors.items() if v > threshold}
    if bad:
        raise AssertionError(f"gradient mismatch beyond {threshold}: {bad}")
    return errors
