"""Small differentiable building blocks.

Modules are plain ``torch.nn.Module`` objects; their named parameters are the
parameter store and torch autograd records the backward pass. Initialization is
done by :func:`init_parameters` from a numpy counter-based stream so that it is
reproducible per seed and independent of torch's global RNG.
"""
from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import NumericalError, ValidationError
from .rng import stream

DTYPE = torch.float64


class MLP(nn.Module):
    """Linear -> SiLU repeated, final Linear."""

    def __init__(self, sizes: Sequence[int], zero_last: bool = False):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(sizes[:-1], sizes[1:]))
        self.layers[-1].zero_init = zero_last

    @property
    def in_features(self) -> int:
        return self.sizes[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.sizes[0]:
            raise ValidationError(f"MLP expects last dim {self.sizes[0]}, got {tuple(x.shape)}")
        return self.rest(self.layers[0](x))

    def rest(self, pre: torch.Tensor) -> torch.Tensor:
        """Continue from the first layer's pre-activation."""
        x = pre
        for layer in self.layers[1:]:
            x = layer(torch.nn.functional.silu(x))
        return x


def mlp_sizes(n_in: int, n_out: int, hidden: int, depth: int) -> list[int]:
    return [n_in] + [hidden] * depth + [n_out]


def mlp_forward(mlp: MLP, x: torch.Tensor) -> torch.Tensor:
    return mlp(x)


class TimeResBlock(nn.Module):
    """out = z + MLP(LayerNorm(z) + W z_time), broadcast over nodes."""

    def __init__(self, dim: int, time_dim: int, hidden: int, depth: int = 1):
        super().__init__()
        self.dim, self.time_dim = dim, time_dim
        self.norm = nn.LayerNorm(dim, dtype=DTYPE)
        self.time_proj = nn.Linear(time_dim, dim, dtype=DTYPE)
        self.mlp = MLP(mlp_sizes(dim, dim, hidden, depth), zero_last=True)

    def forward(self, z: torch.Tensor, z_time: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.dim or z_time.shape[-1] != self.time_dim:
            raise ValidationError(f"TimeResBlock shape mismatch: z {tuple(z.shape)}, z_time {tuple(z_time.shape)}")
        t = self.time_proj(z_time)
        if z.dim() == 3:
            t = t[:, None, :]
        return z + self.mlp(self.norm(z) + t)


def resnet_time_block(block: TimeResBlock, z, z_time):
    return block(z, z_time)


class AttentionBlock(nn.Module):
    """Pre-norm multi-head attention with residual, followed by a residual feed-forward.

    Self-attention when ``kv`` is the query source, cross-attention otherwise.
    Value and output projections carry no bias, so a zero value projection makes
    the attention branch vanish exactly.
    """

    def __init__(self, dim: int, kv_dim: int, heads: int, hidden: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.kv_dim, self.heads = dim, kv_dim, heads
        self.norm_q = nn.LayerNorm(dim, dtype=DTYPE)
        self.norm_kv = nn.LayerNorm(kv_dim, dtype=DTYPE)
        self.q = nn.Linear(dim, dim, dtype=DTYPE)
        self.k = nn.Linear(kv_dim, dim, dtype=DTYPE)
        self.v = nn.Linear(kv_dim, dim, bias=False, dtype=DTYPE)
        self.out = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.out.zero_init = True
        self.norm_ff = nn.LayerNorm(dim, dtype=DTYPE)
        self.ff = MLP([dim, hidden, dim], zero_last=True)

    def forward(self, q_src: torch.Tensor, kv_src: torch.Tensor, kv_mask: torch.Tensor | None = None,
                return_weights: bool = False):
        """``q_src`` (B, N, D), ``kv_src`` (B, M, D_kv), ``kv_mask`` (B, M) bool."""
        if q_src.shape[-1] != self.dim or kv_src.shape[-1] != self.kv_dim:
            raise ValidationError(
                f"attention shape mismatch: q {tuple(q_src.shape)}, kv {tuple(kv_src.shape)}")
        if q_src.shape[-2] < 1:
            raise ValidationError("attention needs at least one query")
        B, N, _ = q_src.shape
        M = kv_src.shape[1]
        H, dh = self.heads, self.dim // self.heads
        kv = self.norm_kv(kv_src)
        q = self.q(self.norm_q(q_src)).view(B, N, H, dh).transpose(1, 2)
        k = self.k(kv).view(B, M, H, dh).transpose(1, 2)
        v = self.v(kv).view(B, M, H, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if kv_mask is not None:
            scores = scores.masked_fill(~kv_mask[:, None, None, :], float("-inf"))
        w = torch.softmax(scores, dim=-1)
        att = (w @ v).transpose(1, 2).reshape(B, N, self.dim)
        x = q_src + self.out(att)
        x = x + self.ff(self.norm_ff(x))
        return (x, w) if return_weights else x


def attention_block(block: AttentionBlock, q_src, kv_src, kv_mask=None):
    return block(q_src, kv_src, kv_mask)


def positional_encoding(t, dim: int) -> torch.Tensor:
    """Interleaved sin/cos features at geometric frequencies (base 10000).

    ``t`` may be an int or an integer tensor of shape (B,); output is (dim,) or (B, dim).
    """
    if dim % 2:
        raise ValidationError(f"positional encoding dim must be even, got {dim}")
    tt = torch.as_tensor(t, dtype=DTYPE)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=DTYPE) / dim)
    ang = tt[..., None] * freqs
    out = torch.empty(*ang.shape[:-1], dim, dtype=DTYPE)
    out[..., 0::2] = torch.sin(ang)
    out[..., 1::2] = torch.cos(ang)
    return out


def init_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Uniform fan-in init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), one stream per parameter name.

    Layers flagged ``zero_init`` are zeroed afterwards; LayerNorms get unit
    weight and zero bias.
    """
    with torch.no_grad():
        for mod_name, mod in module.named_modules():
            if isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.fill_(0.0)
            elif isinstance(mod, nn.Linear):
                bound = 1.0 / math.sqrt(mod.in_features)
                for pname, p in mod.named_parameters(recurse=False):
                    rng = stream(seed, "init", f"{mod_name}.{pname}")
                    p.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(p.shape))))
                if getattr(mod, "zero_init", False):
                    mod.weight.zero_()
                    if mod.bias is not None:
                        mod.bias.zero_()
    return module


def randomize_parameters(module: nn.Module, seed: int, scale: float = 0.5) -> nn.Module:
    """Overwrite every parameter with N(0, scale^2 / fan_in) noise (testing aid: no dead branches)."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            fan_in = p.shape[-1] if p.dim() > 1 else 1
            rng = stream(seed, "randomize", name)
            p.copy_(torch.from_numpy(rng.standard_normal(tuple(p.shape)) * scale / math.sqrt(fan_in)))
    return module


def adam_init(params: Mapping[str, torch.Tensor]) -> dict:
    return {
        "step": 0,
        "m": {k: torch.zeros_like(v) for k, v in params.items()},
        "v": {k: torch.zeros_like(v) for k, v in params.items()},
    }


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: dict,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict:
    """Bias-corrected Adam update, applied in place to ``params``; returns ``state``.

    Parameters are visited in sorted-name order so the update is reproducible.
    """
    for k in sorted(grads):
        g = grads[k]
        if g.shape != params[k].shape:
            raise ValidationError(f"gradient shape {tuple(g.shape)} != parameter {k} {tuple(params[k].shape)}")
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {k}")
    state["step"] += 1
    step = state["step"]
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    with torch.no_grad():
        for k in sorted(grads):
            g = grads[k]
            m = state["m"][k].mul_(beta1).add_(g, alpha=1.0 - beta1)
            v = state["v"][k].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            params[k].sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


def params_to_numpy(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_numpy_params(module: nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    state = {}
    for k, v in module.state_dict().items():
        key = prefix + k
        if key not in arrays:
            raise ValidationError(f"missing parameter {key}")
        a = arrays[key]
        if tuple(a.shape) != tuple(v.shape):
            raise ValidationError(f"parameter {key}: shape {a.shape} != {tuple(v.shape)}")
        state[k] = torch.from_numpy(np.array(a, dtype=np.float64))
    module.load_state_dict(state)
