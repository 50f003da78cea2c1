# app/core/layers.py
"""
Named-parameter building blocks shared by the autoencoder and the denoiser.

Parameters live in a flat ParameterSet keyed by dotted path names
("joint_enc.cross.attn.q.w"). Forward functions take any mapping of
name -> Tensor, so the same code runs on freshly initialized weights,
optimizer outputs and checkpoint loads.
"""
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from app.core import autodiff as ad
from app.core.autodiff import Tensor
from app.core.exceptions import CheckpointError

Params = Mapping[str, Tensor]


class ParameterSet(Mapping[str, Tensor]):
    """Learnable tensors registered in a fixed order from one seeded generator."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.tensors: Dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"parameter '{name}' registered twice")
        tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.tensors[name] = tensor
        return tensor

    def normal(self, name: str, shape: Tuple[int, ...], std: float) -> Tensor:
        return self.add(name, self.rng.standard_normal(shape) * std)

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def full(self, name: str, shape: Tuple[int, ...], value) -> Tensor:
        return self.add(name, np.broadcast_to(np.asarray(value, dtype=np.float64), shape))

    def update(self, new: Mapping[str, Tensor]) -> None:
        """Swap in optimizer outputs; names must match."""
        if set(new) != set(self.tensors):
            raise KeyError("parameter names differ from the registered set")
        for name in self.tensors:
            self.tensors[name] = Tensor(new[name].data, requires_grad=True)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ParameterSet":
        """Replace values from a checkpoint table; names and shapes must match exactly."""
        missing = set(self.tensors) - set(arrays)
        extra = set(arrays) - set(self.tensors)
        if missing or extra:
            raise CheckpointError(f"tensor table mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, t in self.tensors.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != t.shape:
                raise CheckpointError(f"tensor '{name}' has shape {value.shape}, expected {t.shape}")
            self.tensors[name] = Tensor(value.copy(), requires_grad=True)
        return self


def count_parameters(params: Params) -> int:
    return int(sum(t.size for t in params.values()))


# ============================================================================
# Linear / MLP
# ============================================================================

def init_linear(ps: ParameterSet, name: str, d_in: int, d_out: int, bias: bool = True,
                std: Optional[float] = None) -> None:
    ps.normal(f"{name}.w", (d_in, d_out), 1.0 / np.sqrt(d_in) if std is None else std)
    if bias:
        ps.zeros(f"{name}.b", (d_out,))


def linear(p: Params, name: str, x) -> Tensor:
    return ad.linear(x, p[f"{name}.w"], p.get(f"{name}.b"))


def init_mlp(ps: ParameterSet, name: str, d: int, hidden: int, d_out: Optional[int] = None) -> None:
    init_linear(ps, f"{name}.fc1", d, hidden)
    init_linear(ps, f"{name}.fc2", hidden, d if d_out is None else d_out)


def mlp(p: Params, name: str, x) -> Tensor:
    return linear(p, f"{name}.fc2", ad.gelu(linear(p, f"{name}.fc1", x)))


# ============================================================================
# Attention
# ============================================================================

def init_attention(ps: ParameterSet, name: str, d_q: int, d_kv: int, d_model: int) -> None:
    init_linear(ps, f"{name}.q", d_q, d_model, bias=False)
    init_linear(ps, f"{name}.k", d_kv, d_model, bias=False)
    init_linear(ps, f"{name}.v", d_kv, d_model, bias=False)
    init_linear(ps, f"{name}.o", d_model, d_q)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    d = x.shape[-1]
    return ad.swapaxes(ad.reshape(x, x.shape[:-1] + (heads, d // heads)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = ad.swapaxes(x, -3, -2)
    return ad.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def attention(p: Params, name: str, x_q, x_kv, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention of (..., Nq, d_q) queries over (..., Nk, d_kv) tokens."""
    q = _split_heads(linear(p, f"{name}.q", x_q), heads)
    k = _split_heads(linear(p, f"{name}.k", x_kv), heads)
    v = _split_heads(linear(p, f"{name}.v", x_kv), heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    weights = ad.softmax((q @ ad.swapaxes(k, -1, -2)) * scale)
    return linear(p, f"{name}.o", _merge_heads(weights @ v))


def init_block(ps: ParameterSet, name: str, d: int, d_kv: Optional[int], heads: int, mlp_ratio: int) -> None:
    """Pre-norm residual block: attention (self when d_kv is None) then MLP."""
    init_attention(ps, f"{name}.attn", d, d if d_kv is None else d_kv, d)
    init_mlp(ps, f"{name}.mlp", d, d * mlp_ratio)


def block(p: Params, name: str, x, heads: int, context=None) -> Tensor:
    """x + attn(LN(x), LN(context or x)); then x + mlp(LN(x))."""
    h = ad.layer_norm(x)
    ctx = h if context is None else ad.layer_norm(context)
    x = x + attention(p, f"{name}.attn", h, ctx, heads)
    return x + mlp(p, f"{name}.mlp", ad.layer_norm(x))


# ============================================================================
# AdaLN (denoiser)
# ============================================================================

def init_adaln_block(ps: ParameterSet, name: str, d: int, d_cond: int, heads: int, mlp_ratio: int) -> None:
    """Self-attention block whose norms are modulated as gamma(c) * LN(h) + beta(c); starts at gamma=1, beta=0."""
    init_block(ps, name, d, None, heads, mlp_ratio)
    for norm in ("norm1", "norm2"):
        ps.zeros(f"{name}.{norm}.gamma.w", (d_cond, d))
        ps.full(f"{name}.{norm}.gamma.b", (d,), 1.0)
        ps.zeros(f"{name}.{norm}.beta.w", (d_cond, d))
        ps.zeros(f"{name}.{norm}.beta.b", (d,))


def adaln(p: Params, name: str, h, cond) -> Tensor:
    gamma = linear(p, f"{name}.gamma", cond)
    beta = linear(p, f"{name}.beta", cond)
    # (..., d) -> (..., 1, d) to broadcast over tokens
    shape = gamma.shape[:-1] + (1, gamma.shape[-1])
    return ad.reshape(gamma, shape) * ad.layer_norm(h) + ad.reshape(beta, shape)


def adaln_block(p: Params, name: str, h, cond, heads: int) -> Tensor:
    x = adaln(p, f"{name}.norm1", h, cond)
    h = h + attention(p, f"{name}.attn", x, x, heads)
    return h + mlp(p, f"{name}.mlp", adaln(p, f"{name}.norm2", h, cond))


def sinusoidal_embedding(positions, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Transformer-style [sin, cos] features of scalar positions (timesteps or token indices)."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    angles = positions[..., None] * freqs
    out = np.zeros(positions.shape + (dim,))
    out[..., 0:2 * half:2] = np.sin(angles)
    out[..., 1:2 * half:2] = np.cos(angles)
    return out
