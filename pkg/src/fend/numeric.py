"""Dense float64 tensor ops with reverse-mode gradients and a finite-difference checker.

Tensors are ``torch.Tensor`` in float64; torch autograd records the tape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch

DTYPE = torch.float64
LN_EPS = 1e-5

Tensor = torch.Tensor


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def tensor(data, requires_grad: bool = False) -> Tensor:
    return torch.as_tensor(data, dtype=DTYPE).clone().requires_grad_(requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def layer_norm(x: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit population variance.

    No learned gain or bias. ``eps`` sits inside the square root, so the zero
    vector maps to the zero vector.
    """
    if x.shape[-1] < 2:
        raise DimensionError("layer_norm needs at least 2 features")
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    return xc / torch.sqrt(var + eps)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-4,
    max_entries: int | None = None,
    generator: torch.Generator | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` takes no arguments and reads ``params`` by reference; entries are
    perturbed in place. Error per entry is |analytic - fd| / max(1, |fd|).
    ``max_entries`` subsamples entries per parameter for large models.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss")
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            if max_entries is not None and n > max_entries:
                idx = torch.randperm(n, generator=generator)[:max_entries].tolist()
            else:
                idx = range(n)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                if not (torch.isfinite(torch.tensor(up)) and torch.isfinite(torch.tensor(down))):
                    raise NumericError("non-finite loss under perturbation")
                fd = (up - down) / (2 * step)
                err = abs(gflat[i].item() - fd) / max(1.0, abs(fd))
                worst = max(worst, err)
    return worst
