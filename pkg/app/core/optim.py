# app/core/optim.py
"""
AdamW with decoupled weight decay, global-norm gradient clipping and the
cosine-with-warm-up learning-rate schedule used by both training loops.
"""
import math
from typing import Dict, Mapping, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.autodiff import Tensor
from app.core.exceptions import ShapeMismatchError


class AdamWState(BaseModel):
    """First/second moment estimates keyed by parameter name, plus the step counter."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: int = Field(0, description="Number of updates applied so far")
    m: Dict[str, np.ndarray] = Field(default_factory=dict)
    v: Dict[str, np.ndarray] = Field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamWState":
        return cls(
            step=0,
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients together so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or max_norm <= 0.0 or total <= max_norm:
        return dict(grads), total
    scale = max_norm / (total + 1e-12)
    return {name: g * scale for name, g in grads.items()}, total


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
    max_grad_norm: float = 0.0,
) -> Tuple[Dict[str, Tensor], AdamWState]:
    """
    One AdamW update. Returns new leaf tensors and the new state; inputs are not mutated.

    Gradients missing from `grads` count as zero.
    """
    full = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ShapeMismatchError("adamw_step", p.data.shape, g.shape, detail=name)
        full[name] = g
    clipped, _ = clip_grad_norm(full, max_grad_norm)

    beta1, beta2 = betas
    step = state.step + 1
    bias1 = 1.0 - beta1 ** step
    bias2 = 1.0 - beta2 ** step
    new_params: Dict[str, Tensor] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = clipped[name]
        m = beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - beta2) * g * g
        data = p.data * (1.0 - lr * weight_decay)
        data = data - lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
        new_params[name] = Tensor(data, requires_grad=p.requires_grad)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamWState(step=step, m=new_m, v=new_v)


def cosine_with_warmup(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.05) -> float:
    """Linear warm-up over the first warmup_fraction of steps, then cosine decay to zero."""
    if total_steps <= 0:
        return base_lr
    warmup = max(1, int(round(warmup_fraction * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class AdamW:
    """Stateful wrapper around adamw_step for the training loops."""

    def __init__(self, lr: float = 1e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 weight_decay: float = 0.01, eps: float = 1e-8, max_grad_norm: float = 0.5):
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.state = AdamWState()

    def step(self, params: Dict[str, Tensor], lr: float = None) -> Tuple[Dict[str, Tensor], float]:
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        _, norm = clip_grad_norm(grads, 0.0)
        new_params, self.state = adamw_step(
            params, grads, self.state,
            lr=self.lr if lr is None else lr,
            betas=self.betas, weight_decay=self.weight_decay, eps=self.eps,
            max_grad_norm=self.max_grad_norm,
        )
        return new_params, norm
