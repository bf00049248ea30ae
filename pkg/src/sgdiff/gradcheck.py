"""Central finite-difference verification of autograd gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

from .rng import stream


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self) -> str:
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return f"grad_check: max rel err {self.max_error:.3e} ({worst}) over {len(self.errors)} blocks, tol {self.tol:g}"


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
    max_entries: int | None = 24,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients of the scalar ``fn()`` with central differences.

    ``params`` are leaf tensors that ``fn`` closes over; they are perturbed in
    place and restored. For large blocks a fixed random subset of at most
    ``max_entries`` entries is checked. The per-block error is
    ``max|g_auto - g_fd| / max(max|g_auto|, max|g_fd|, floor * max(1, G))`` over the
    checked entries, where G is the largest analytic gradient entry over all blocks.
    """
    names = list(params)
    leaves = [params[k] for k in names]
    for p in leaves:
        p.requires_grad_(True)
    out = fn()
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)

    report = GradCheckReport(tol=tol)
    checked = []
    with torch.no_grad():
        for name, p, g in zip(names, leaves, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            n = flat.numel()
            if max_entries is None or n <= max_entries:
                idx = np.arange(n)
            else:
                idx = np.sort(stream(seed, "gradcheck", name).choice(n, size=max_entries, replace=False))
            num = np.empty(len(idx))
            for a, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = fn().item()
                flat[i] = orig - step
                f_minus = fn().item()
                flat[i] = orig
                num[a] = (f_plus - f_minus) / (2 * step)
            ana = g.reshape(-1)[torch.as_tensor(idx)].numpy()
            checked.append((name, ana, num))
    # the floor scales with the largest gradient anywhere, so blocks whose true
    # gradient is zero by symmetry are judged against finite-difference roundoff
    # at the loss's own scale rather than dividing noise by noise
    global_max = max((np.abs(a).max(initial=0.0) for _, a, _ in checked), default=0.0)
    for name, ana, num in checked:
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), floor * max(1.0, global_max))
        report.errors[name] = float(np.abs(ana - num).max(initial=0.0) / scale)
    return report
