"""Numeric kernels shared by every trainable module.

RMSNorm, SwiGLU, axial 2-D rotary embeddings, multi-head attention, the
pre-norm transformer block and a central-difference gradient checker.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError


# --------------------------------------------------------------------------
# normalization / activations
# --------------------------------------------------------------------------

def rmsnorm(x: torch.Tensor, gamma: torch.Tensor | None, eps: float = 1e-6) -> torch.Tensor:
    """x / sqrt(mean(x^2) + eps) over the last axis, scaled by ``gamma``."""
    if eps < 0:
        raise ConfigError(f"rmsnorm eps must be >= 0, got {eps}")
    if gamma is not None and (gamma.dim() != 1 or gamma.shape[0] != x.shape[-1]):
        raise ShapeError(f"gamma shape {tuple(gamma.shape)} does not match feature dim {x.shape[-1]}")
    y = x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    return y if gamma is None else y * gamma


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6, affine: bool = True):
        super().__init__()
        if eps <= 0:
            raise ConfigError(f"rms_eps must be > 0, got {eps}")
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim)) if affine else None

    def forward(self, x):
        return rmsnorm(x, self.weight, self.eps)


def make_norm(dim: int, use_rmsnorm: bool, eps: float = 1e-6, affine: bool = True) -> nn.Module:
    if use_rmsnorm:
        return RMSNorm(dim, eps=eps, affine=affine)
    return nn.LayerNorm(dim, eps=eps, elementwise_affine=affine)


def swiglu_hidden_dim(hidden_dim: int, mlp_ratio: float, multiple_of: int = 64) -> int:
    """Parameter-matched SwiGLU width: 2/3 of the dense MLP width, snapped to ``multiple_of``."""
    if mlp_ratio <= 0:
        raise ConfigError(f"mlp_ratio must be > 0, got {mlp_ratio}")
    width = hidden_dim * mlp_ratio * 2.0 / 3.0
    return max(multiple_of, multiple_of * int(round(width / multiple_of)))


def swiglu(x, gate_weight, up_weight, down_weight):
    """down( silu(gate x) * up x ), all projections bias-free. Weights use (out, in) layout."""
    if gate_weight.shape != up_weight.shape:
        raise ShapeError(f"gate {tuple(gate_weight.shape)} and up {tuple(up_weight.shape)} differ")
    if gate_weight.shape[1] != x.shape[-1]:
        raise ShapeError(f"gate expects input dim {gate_weight.shape[1]}, got {x.shape[-1]}")
    if down_weight.shape[1] != gate_weight.shape[0]:
        raise ShapeError(f"down expects hidden {down_weight.shape[1]}, got {gate_weight.shape[0]}")
    return F.linear(F.silu(F.linear(x, gate_weight)) * F.linear(x, up_weight), down_weight)


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int, out_dim: int | None = None):
        super().__init__()
        self.gate = nn.Linear(dim, hidden, bias=False)
        self.up = nn.Linear(dim, hidden, bias=False)
        self.down = nn.Linear(hidden, out_dim or dim, bias=False)

    def forward(self, x):
        return swiglu(x, self.gate.weight, self.up.weight, self.down.weight)


class GeluMlp(nn.Module):
    """Plain ViT/SiT MLP (with biases)."""

    def __init__(self, dim: int, hidden: int, out_dim: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


def make_mlp(dim: int, mlp_ratio: float, use_swiglu: bool) -> nn.Module:
    if use_swiglu:
        return SwiGLU(dim, swiglu_hidden_dim(dim, mlp_ratio))
    return GeluMlp(dim, int(round(dim * mlp_ratio)))


# --------------------------------------------------------------------------
# rotary embedding
# --------------------------------------------------------------------------

def grid_positions(grid_h: int, grid_w: int, num_prefix: int = 0) -> torch.Tensor:
    """(row, col) per token in row-major order; prefix tokens (registers) sit at (0, 0)."""
    rows = torch.arange(grid_h, dtype=torch.float64).repeat_interleave(grid_w)
    cols = torch.arange(grid_w, dtype=torch.float64).repeat(grid_h)
    pos = torch.stack([rows, cols], dim=-1)
    if num_prefix:
        pos = torch.cat([torch.zeros(num_prefix, 2, dtype=torch.float64), pos])
    return pos


def sincos_2d(grid_h: int, grid_w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sin/cos table of shape (grid_h*grid_w, dim)."""
    pos = grid_positions(grid_h, grid_w)
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / max(1, quarter))
    parts = []
    for axis in range(2):
        ang = pos[:, axis:axis + 1] * omega[None]
        parts += [ang.sin(), ang.cos()]
    table = torch.cat(parts, dim=-1)
    if table.shape[1] < dim:
        table = torch.cat([table, torch.zeros(table.shape[0], dim - table.shape[1], dtype=torch.float64)], -1)
    return table


def _rotate(x, pos, base):
    half = x.shape[-1] // 2
    inv_freq = base ** (-torch.arange(half, dtype=torch.float64) / half)
    angles = pos.to(torch.float64)[:, None] * inv_freq[None, :]
    cos = angles.cos().to(x.dtype)
    sin = angles.sin().to(x.dtype)
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def rope_apply(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Axial 2-D RoPE. x is (..., T, head_dim); positions is (T, 2).

    The first half of each head rotates with the row index, the second half
    with the column index.
    """
    head_dim = x.shape[-1]
    if head_dim % 4:
        raise ConfigError(f"axial RoPE needs head_dim divisible by 4, got {head_dim}")
    if positions.shape != (x.shape[-2], 2):
        raise ShapeError(f"positions {tuple(positions.shape)} do not match {x.shape[-2]} tokens")
    half = head_dim // 2
    return torch.cat(
        [_rotate(x[..., :half], positions[:, 0], base), _rotate(x[..., half:], positions[:, 1], base)],
        dim=-1,
    )


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------

@dataclass
class AttentionConfig:
    input_dim: int
    num_heads: int
    head_dim: int
    output_dim: int | None = None
    merged_qkv: bool = True
    use_rope: bool = False
    qkv_bias: bool = True
    out_bias: bool = True
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.num_heads < 1 or self.head_dim < 1 or self.input_dim < 1:
            raise ConfigError(f"invalid attention geometry {self}")
        if self.output_dim is None:
            self.output_dim = self.input_dim
        if self.use_rope and self.head_dim % 4:
            raise ConfigError(f"RoPE requires head_dim % 4 == 0, got {self.head_dim}")

    @property
    def inner_dim(self) -> int:
        return self.num_heads * self.head_dim


def stable_softmax(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.amax(dim=-1, keepdim=True)
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def _check_logits(logits):
    bad = ~torch.isfinite(logits)
    if bad.any():
        idx = bad.nonzero()[0].tolist()
        raise NumericError(f"non-finite attention logit for query token {idx[-2]} (batch {idx[0]}, head {idx[1]})")


def attention_core(q, k, v, return_weights=False):
    """Scaled dot-product attention on (B, H, T, d) tensors."""
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    _check_logits(logits)
    weights = stable_softmax(logits)
    out = weights @ v
    return (out, weights) if return_weights else out


def attention_forward(x, cfg: AttentionConfig, weights: Mapping[str, torch.Tensor],
                      positions=None, return_weights=False):
    """Multi-head self-attention from an explicit weight mapping.

    ``weights`` uses the key names of :class:`Attention`'s state dict:
    ``qkv.weight``/``qkv.bias`` when merged, else ``q.*``, ``k.*``, ``v.*``;
    plus ``proj.weight``/``proj.bias``.
    """
    if x.shape[-1] != cfg.input_dim:
        raise ShapeError(f"attention expects feature dim {cfg.input_dim}, got {x.shape[-1]}")
    squeeze = x.dim() == 2
    if squeeze:
        x = x[None]
    B, T, _ = x.shape
    H, d = cfg.num_heads, cfg.head_dim
    if cfg.merged_qkv:
        qkv = F.linear(x, weights["qkv.weight"], weights.get("qkv.bias"))
        q, k, v = qkv.view(B, T, 3, H, d).permute(2, 0, 3, 1, 4)
    else:
        q, k, v = (
            F.linear(x, weights[f"{n}.weight"], weights.get(f"{n}.bias")).view(B, T, H, d).transpose(1, 2)
            for n in "qkv"
        )
    if cfg.use_rope:
        if positions is None:
            raise ConfigError("use_rope=True requires token positions")
        q = rope_apply(q, positions, cfg.rope_base)
        k = rope_apply(k, positions, cfg.rope_base)
    out, attn = attention_core(q, k, v, return_weights=True)
    out = out.transpose(1, 2).reshape(B, T, H * d)
    out = F.linear(out, weights["proj.weight"], weights.get("proj.bias"))
    if squeeze:
        out, attn = out[0], attn[0]
    return (out, attn) if return_weights else out


class Attention(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        inner = cfg.inner_dim
        if cfg.merged_qkv:
            self.qkv = nn.Linear(cfg.input_dim, 3 * inner, bias=cfg.qkv_bias)
        else:
            self.q = nn.Linear(cfg.input_dim, inner, bias=cfg.qkv_bias)
            self.k = nn.Linear(cfg.input_dim, inner, bias=cfg.qkv_bias)
            self.v = nn.Linear(cfg.input_dim, inner, bias=cfg.qkv_bias)
        self.proj = nn.Linear(inner, cfg.output_dim, bias=cfg.out_bias)

    def forward(self, x, positions=None, return_weights=False):
        weights = dict(self.named_parameters())
        return attention_forward(x, self.cfg, weights, positions, return_weights)


# --------------------------------------------------------------------------
# transformer block
# --------------------------------------------------------------------------

@dataclass
class BlockConfig:
    hidden_dim: int
    num_heads: int
    mlp_ratio: float = 4.0
    use_swiglu: bool = True
    use_rmsnorm: bool = True
    use_rope: bool = True
    rms_eps: float = 1e-6

    def __post_init__(self):
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be > 0, got {self.mlp_ratio}")
        if self.rms_eps <= 0:
            raise ConfigError(f"rms_eps must be > 0, got {self.rms_eps}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.norm1 = make_norm(cfg.hidden_dim, cfg.use_rmsnorm, cfg.rms_eps)
        self.attn = Attention(AttentionConfig(cfg.hidden_dim, cfg.num_heads, cfg.head_dim,
                                              use_rope=cfg.use_rope))
        self.norm2 = make_norm(cfg.hidden_dim, cfg.use_rmsnorm, cfg.rms_eps)
        self.mlp = make_mlp(cfg.hidden_dim, cfg.mlp_ratio, cfg.use_swiglu)

    def forward(self, x, positions=None):
        x = x + self.attn(self.norm1(x), positions)
        return x + self.mlp(self.norm2(x))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def _coords(numel, max_coords, gen):
    if max_coords is None or numel <= max_coords:
        return range(numel)
    return torch.randperm(numel, generator=gen)[:max_coords].tolist()


def _check_leaves(closure, leaves, eps, max_coords, seed):
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"grad_check eps must lie in [1e-7, 1e-3], got {eps}")
    gen = torch.Generator().manual_seed(seed)
    out = closure()
    functional = None
    if out.numel() != 1:
        functional = torch.randn(out.shape, generator=gen, dtype=torch.float64).to(out.dtype)

    def scalar():
        y = closure()
        return (y * functional).sum() if functional is not None else y.reshape(())

    value = scalar()
    grads = torch.autograd.grad(value, leaves, allow_unused=True)
    # derivatives below this are indistinguishable from finite-difference roundoff
    floor = 1e-6 * max(1.0, abs(value.item()))
    worst = 0.0
    with torch.no_grad():
        for leaf, g in zip(leaves, grads):
            g = torch.zeros_like(leaf) if g is None else g
            if not torch.isfinite(g).all():
                raise NumericError("non-finite analytic gradient")
            flat = leaf.view(-1)
            gflat = g.reshape(-1)
            for i in _coords(flat.numel(), max_coords, gen):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = scalar().item()
                flat[i] = orig - eps
                down = scalar().item()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                a = gflat[i].item()
                err = abs(a - fd) / max(abs(a), abs(fd), floor)
                worst = max(worst, err)
    return worst


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], eps: float = 1e-5,
               *, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central differences w.r.t. ``inputs``.

    Non-scalar outputs are reduced with a fixed random linear functional.
    The relative error's denominator is floored at 1e-6 * max(1, |f|), so
    structurally-zero derivatives are compared on an absolute scale.
    ``max_coords`` caps the number of probed coordinates per input (seeded).
    """
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    return _check_leaves(lambda: fn(*leaves), leaves, eps, max_coords, seed)


def grad_check_params(module: nn.Module, closure: Callable[[], torch.Tensor], eps: float = 1e-5,
                      *, max_coords: int | None = None, seed: int = 0) -> float:
    """Like :func:`grad_check`, but w.r.t. every trainable parameter of ``module``."""
    leaves = [p for p in module.parameters() if p.requires_grad]
    return _check_leaves(closure, leaves, eps, max_coords, seed)
