"""Central finite differences for scalar functions of tensors."""

from __future__ import annotations

import torch


def fd_gradient(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` at ``x`` (float64)."""
    x = x.detach().clone().to(torch.float64)
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn(x))
            flat[i] = orig - h
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().to(torch.float64).requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def relative_error(fn, x: torch.Tensor, h: float = 1e-6) -> float:
    """||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)."""
    ga, gn = analytic_gradient(fn, x), fd_gradient(fn, x, h)
    scale = max(float(ga.norm()), float(gn.norm()), 1e-12)
    return float((ga - gn).norm()) / scale
