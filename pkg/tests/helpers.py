"""Shared test utilities: central finite differences and small fixtures."""

import torch


def fd_gradient(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of a scalar function of one double tensor."""
    grad = torch.zeros_like(x)
    flat = x.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn(flat.view_as(x)))
        flat[i] = orig - h
        down = float(fn(flat.view_as(x)))
        flat[i] = orig
        grad.view(-1)[i] = (up - down) / (2 * h)
    return grad


def grad_rel_error(fn, x: torch.Tensor, h: float = 1e-6) -> float:
    """Relative error ||g_autograd - g_fd|| / ||g_fd|| for scalar ``fn`` at ``x``."""
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    with torch.no_grad():
        g_fd = fd_gradient(fn, x.detach(), h)
    denom = max(float(g_fd.norm()), 1e-12)
    return float((g - g_fd).norm()) / denom


# acceptance results, filled by tests/test_acceptance.py and printed by conftest.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}
ACCEPTANCE_IDS = [f"AC-{i}" for i in range(1, 12)]


def record_ac(ac: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[ac] = (bool(ok), detail)
    print(f"{ac} {'PASS' if ok else 'FAIL'}  {detail}")
