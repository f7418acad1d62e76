"""Shared test utilities: central-difference gradients and relative
comparison, kept independent of the library's autograd path."""

import torch


def fd_gradient(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of a scalar function, elementwise.

    ``x`` must be float64; ``fn`` is re-evaluated 2*numel times.
    """
    assert x.dtype == torch.float64, "finite differences need float64"
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            fp = float(fn(x))
            flat[i] = orig - eps
            fm = float(fn(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """Norm of the difference relative to the norm of the reference."""
    a = a.detach().reshape(-1).double()
    b = b.detach().reshape(-1).double()
    denom = float(b.norm())
    if denom == 0.0:
        return float(a.norm())
    return float((a - b).norm()) / denom
