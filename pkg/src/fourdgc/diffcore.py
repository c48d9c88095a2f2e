"""Gradient verification and the adaptive-moment optimizer shared by all
training stages.

Trainable parameters are plain float64 ``torch.Tensor`` objects with
``requires_grad=True``; reverse-mode gradients come from torch autograd.
The finite-difference harness below is the independent check on every
analytic backward path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

LossFn = Callable[[], torch.Tensor]


def _coordinates(grad: torch.Tensor, max_coords: int, rng: np.random.Generator) -> np.ndarray:
    n = grad.numel()
    if n <= max_coords:
        return np.arange(n)
    # half the budget on the largest analytic entries, half uniformly at random
    flat = grad.detach().abs().reshape(-1).numpy()
    top = np.argsort(-flat, kind="stable")[: max_coords // 2]
    rest = np.setdiff1d(np.arange(n), top)
    extra = rng.choice(rest, size=max_coords - len(top), replace=False)
    return np.sort(np.concatenate([top, extra]))


def finite_diff_errors(
    loss_fn: LossFn,
    params: Mapping[str, torch.Tensor],
    epsilon: float = 1e-4,
    max_coords: int = 48,
    seed: int = 0,
) -> dict[str, float]:
    """Per-parameter max relative error between autograd and central differences.

    ``loss_fn`` must be deterministic: it is re-evaluated for every perturbed
    coordinate, so any noise it draws has to come from a fixed seed.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    names = list(params)
    tensors = [params[k] for k in names]
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss at the unperturbed point")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p, g in zip(names, tensors, grads):
        g = torch.zeros_like(p) if g is None else g
        flat_p = p.data.view(-1)
        flat_g = g.reshape(-1)
        worst = 0.0
        for i in _coordinates(g, max_coords, rng):
            orig = flat_p[i].item()
            with torch.no_grad():
                flat_p[i] = orig + epsilon
                up = loss_fn().item()
                flat_p[i] = orig - epsilon
                down = loss_fn().item()
                flat_p[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"non-finite loss perturbing {name}[{i}]")
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(flat_g[i].item() - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
        errors[name] = worst
    return errors


def finite_diff_check(
    loss_fn: LossFn,
    params: Mapping[str, torch.Tensor],
    epsilon: float = 1e-4,
    max_coords: int = 48,
    seed: int = 0,
) -> float:
    """Max relative error |analytic - central| / max(1e-8, |central|) over sampled coordinates."""
    errors = finite_diff_errors(loss_fn, params, epsilon, max_coords, seed)
    return max(errors.values(), default=0.0)


@dataclass
class ParamGroup:
    name: str
    tensor: torch.Tensor
    lr: float
    quaternion: bool = False
    exp_avg: torch.Tensor = field(init=False)
    exp_avg_sq: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.exp_avg = torch.zeros_like(self.tensor, requires_grad=False)
        self.exp_avg_sq = torch.zeros_like(self.tensor, requires_grad=False)


class Adam:
    """Adaptive-moment descent with bias correction.

    Quaternion groups are re-normalised row-wise after each step. A NaN
    gradient raises before any parameter is touched.
    """

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.groups: list[ParamGroup] = []
        self.step_count = 0

    def add(self, name: str, tensor: torch.Tensor, lr: float, quaternion: bool = False) -> None:
        if not tensor.requires_grad:
            raise ValueError(f"{name} does not require grad")
        self.groups.append(ParamGroup(name, tensor, lr, quaternion))

    def zero_grad(self) -> None:
        for g in self.groups:
            g.tensor.grad = None

    @torch.no_grad()
    def step(self) -> None:
        for g in self.groups:
            if g.tensor.grad is not None and not torch.isfinite(g.tensor.grad).all():
                raise FloatingPointError(f"non-finite gradient for {g.name}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for g in self.groups:
            grad = g.tensor.grad
            if grad is None:
                grad = torch.zeros_like(g.tensor)
            g.exp_avg.mul_(self.beta1).add_(grad, alpha=1.0 - self.beta1)
            g.exp_avg_sq.mul_(self.beta2).addcmul_(grad, grad, value=1.0 - self.beta2)
            denom = (g.exp_avg_sq / bc2).sqrt_().add_(self.eps)
            g.tensor.addcdiv_(g.exp_avg, denom, value=-g.lr / bc1)
            if g.quaternion:
                g.tensor.div_(torch.linalg.vector_norm(g.tensor, dim=-1, keepdim=True))
