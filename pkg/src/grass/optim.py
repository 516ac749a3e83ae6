"""Sign-momentum optimizer and the two-phase cosine learning rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import NumericError, ValidationError


class Lion(torch.optim.Optimizer):
    """Interpolated sign update with decoupled weight decay.

    p <- p - lr * (sign(beta1 * m + (1 - beta1) * g) + wd * p)
    m <- beta2 * m + (1 - beta2) * g
    """

    def __init__(self, params, lr=1e-4, betas=(0.95, 0.98), weight_decay=0.0):
        if lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {lr}")
        if not all(0.0 <= b < 1.0 for b in betas):
            raise ValidationError(f"betas must lie in [0, 1), got {betas}")
        defaults = dict(lr=lr, betas=betas, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        # validate every gradient before touching any parameter, so a bad
        # batch aborts the whole step instead of half-applying it
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise NumericError(
                        f"non-finite gradient in parameter of shape "
                        f"{tuple(p.shape)}; step aborted"
                    )
        for group in self.param_groups:
            lr = group["lr"]
            beta1, beta2 = group["betas"]
            wd = group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if "momentum" not in state:
                    state["momentum"] = torch.zeros_like(p)
                m = state["momentum"]
                update = (beta1 * m + (1.0 - beta1) * p.grad).sign_()
                if wd:
                    update = update.add_(p, alpha=wd)
                p.add_(update, alpha=-lr)
                m.mul_(beta2).add_(p.grad, alpha=1.0 - beta2)
        return loss


def build_param_groups(model: nn.Module, weight_decay: float) -> list[dict]:
    """Apply weight decay to linear weights only; biases, embeddings, and
    normalization gains train without decay."""
    decayed_ids = {
        id(module.weight)
        for module in model.modules()
        if isinstance(module, nn.Linear)
    }
    decayed, plain = [], []
    for p in model.parameters():
        (decayed if id(p) in decayed_ids else plain).append(p)
    return [
        {"params": decayed, "weight_decay": weight_decay},
        {"params": plain, "weight_decay": 0.0},
    ]


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    warmup_ratio: float
    lr_init: float
    lr_peak: float
    lr_final: float

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ValidationError(
                f"warmup_ratio must be in (0, 1), got {self.warmup_ratio}"
            )
        if min(self.lr_init, self.lr_peak, self.lr_final) <= 0:
            raise ValidationError("learning rates must be positive")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Cosine ramp lr_init -> lr_peak over the warmup span, then cosine
    anneal lr_peak -> lr_final over the rest."""
    warmup_steps = cfg.warmup_ratio * cfg.total_steps
    if step <= warmup_steps:
        t = step / warmup_steps
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * 0.5 * (
            1.0 - math.cos(math.pi * t)
        )
    t = min((step - warmup_steps) / (cfg.total_steps - warmup_steps), 1.0)
    return cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (
        1.0 + math.cos(math.pi * t)
    )
