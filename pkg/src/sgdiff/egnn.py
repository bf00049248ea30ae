"""Text-conditioned equivariant graph network over scene graphs.

All tensors are batched and padded: ``x`` (B, N, 3), ``h`` (B, N, n_f),
``t`` (B,) integer timesteps, ``text`` (B, d_text), ``mask`` (B, N) bool.
Padded nodes never send or receive messages.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ValidationError
from .nn import DTYPE, MLP, AttentionBlock, TimeResBlock, mlp_sizes, positional_encoding

CONDITIONING_MODES = ("edge_text_resnet_selfattn", "concat", "cross_attention")
GEOMETRY_MODES = ("vector_delta", "scalar_distance")


@dataclass(frozen=True)
class EgnnConfig:
    num_categories: int
    code_dim: int
    layers: int = 4
    latent: int = 64
    hidden: int = 128
    mlp_depth: int = 2
    text_dim: int = 64
    heads: int = 4
    conditioning: str = "edge_text_resnet_selfattn"
    geometry: str = "vector_delta"

    def __post_init__(self):
        if self.layers < 1:
            raise ValidationError("need at least one EGCL layer")
        if min(self.latent, self.hidden, self.text_dim, self.num_categories, self.code_dim, self.heads) < 1:
            raise ValidationError("all dimensions must be positive")
        if self.latent % 2:
            raise ValidationError("latent dim must be even (positional encoding)")
        if self.conditioning not in CONDITIONING_MODES:
            raise ValidationError(f"unknown conditioning mode {self.conditioning!r}")
        if self.geometry not in GEOMETRY_MODES:
            raise ValidationError(f"unknown geometry mode {self.geometry!r}")

    @property
    def n_f(self) -> int:
        return self.num_categories + self.code_dim + 5

    @property
    def g_dim(self) -> int:
        return 3 if self.geometry == "vector_delta" else 1


class PairMLP(nn.Module):
    """MLP over edge inputs [z_i, z_j, g_ij, text].

    Numerically the same function as ``MLP`` on the concatenated input, but the
    first layer is evaluated per node and broadcast, which avoids materializing
    the (B, N, N, 2D + ...) concatenation.
    """

    def __init__(self, dim: int, g_dim: int, text_dim: int, out: int, hidden: int, depth: int, zero_last=False):
        super().__init__()
        self.dim, self.g_dim, self.text_dim = dim, g_dim, text_dim
        self.mlp = MLP(mlp_sizes(2 * dim + g_dim + text_dim, out, hidden, depth), zero_last=zero_last)

    def forward(self, z, g, text=None):
        first = self.mlp.layers[0]
        W, D, G = first.weight, self.dim, self.g_dim
        a = z @ W[:, :D].T
        b = z @ W[:, D:2 * D].T
        pre = a[:, :, None, :] + b[:, None, :, :] + g @ W[:, 2 * D:2 * D + G].T + first.bias
        if self.text_dim:
            pre = pre + (text @ W[:, 2 * D + G:].T)[:, None, None, :]
        return self.mlp.rest(pre)


def pair_geometry(x: torch.Tensor, geometry: str):
    """Returns (delta, g): delta_ij = (x_j - x_i) / (|x_j - x_i| + 1) and the edge geometry feature."""
    diff = x[:, None, :, :] - x[:, :, None, :]
    d2 = (diff ** 2).sum(-1, keepdim=True)
    # the tiny offset keeps the sqrt differentiable at coincident nodes
    dist = torch.sqrt(d2 + 1e-30)
    delta = diff / (dist + 1.0)
    return delta, (delta if geometry == "vector_delta" else d2)


class EGCL(nn.Module):
    def __init__(self, cfg: EgnnConfig):
        super().__init__()
        D, H, depth = cfg.latent, cfg.hidden, cfg.mlp_depth
        self.cfg = cfg
        if cfg.conditioning != "concat":
            self.res = TimeResBlock(D, D, H, depth=1)
            kv_dim = cfg.text_dim if cfg.conditioning == "cross_attention" else D
            self.attn = AttentionBlock(D, kv_dim, cfg.heads, H)
        edge_text = 0 if cfg.conditioning == "concat" else cfg.text_dim
        self.edge = PairMLP(D, cfg.g_dim, edge_text, D, H, depth)
        self.gate = nn.Linear(D, 1, dtype=DTYPE)
        self.node = MLP(mlp_sizes(2 * D, D, H, depth))
        self.coord = PairMLP(D, cfg.g_dim, edge_text, 1, H, depth, zero_last=True)

    def fuse(self, z, z_time, z_text, mask):
        """Time fusion followed by self- or cross-attention (identity in concat mode)."""
        mode = self.cfg.conditioning
        if mode == "concat":
            return z
        z = self.res(z, z_time)
        if mode == "cross_attention":
            return self.condition_cross_attn(z, z_text)
        return self.attn(z, z, mask)

    def condition_cross_attn(self, z, z_text):
        """Nodes attend to the text embedding, used as a single key/value token."""
        return self.attn(z, z_text[:, None, :])

    def forward(self, x, z, z_time, z_text, mask):
        if not (torch.isfinite(x).all() and torch.isfinite(z).all()):
            raise ValidationError("non-finite EGCL input")
        fmask = mask.to(DTYPE)[..., None]
        z = self.fuse(z, z_time, z_text, mask) * fmask
        n = x.shape[1]
        edge_mask = (mask[:, :, None] & mask[:, None, :] & ~torch.eye(n, dtype=torch.bool))[..., None].to(DTYPE)

        delta, g = pair_geometry(x, self.cfg.geometry)
        text = z_text if self.edge.text_dim else None
        m = self.edge(z, g, text)
        agg = (m * torch.sigmoid(self.gate(m)) * edge_mask).sum(2)
        z_new = (z + self.node(torch.cat([z, agg], dim=-1))) * fmask

        w = self.coord(z, g, text)
        x_new = x + (delta * w * edge_mask).sum(2)
        return x_new, z_new


class SceneEGNN(nn.Module):
    """Encoders -> L conditioned EGCL layers -> per-group decoders."""

    def __init__(self, cfg: EgnnConfig):
        super().__init__()
        self.cfg = cfg
        D, H, depth, K, d = cfg.latent, cfg.hidden, cfg.mlp_depth, cfg.num_categories, cfg.code_dim
        self.enc_c = MLP(mlp_sizes(K, D, H, depth))
        self.enc_f = MLP(mlp_sizes(d, D, H, depth))
        self.enc_b = MLP(mlp_sizes(5, D, H, depth))
        self.enc_h = MLP(mlp_sizes(3 * D, D, H, depth))
        self.enc_t = MLP(mlp_sizes(D, D, H, depth))
        if cfg.conditioning == "concat":
            self.cond = nn.Linear(D + D + cfg.text_dim, D, dtype=DTYPE)
        self.layers = nn.ModuleList(EGCL(cfg) for _ in range(cfg.layers))
        self.dec_c = MLP(mlp_sizes(D, K, H, depth))
        self.dec_f = MLP(mlp_sizes(D, d, H, depth))
        self.dec_b = MLP(mlp_sizes(D, 5, H, depth))

    def encode_nodes(self, h):
        K, d = self.cfg.num_categories, self.cfg.code_dim
        if h.shape[-1] != self.cfg.n_f:
            raise ValidationError(f"node features must have width {self.cfg.n_f}, got {tuple(h.shape)}")
        zc = self.enc_c(h[..., :K])
        zf = self.enc_f(h[..., K:K + d])
        zb = self.enc_b(h[..., K + d:])
        return self.enc_h(torch.cat([zc, zf, zb], dim=-1))

    def embed_time(self, t):
        return self.enc_t(positional_encoding(t, self.cfg.latent))

    def condition_concat(self, z0, z_time, z_text):
        n = z0.shape[1]
        extra = torch.cat([z_time, z_text], dim=-1)[:, None, :].expand(-1, n, -1)
        return self.cond(torch.cat([z0, extra], dim=-1))

    def decode(self, z):
        return torch.cat([self.dec_c(z), self.dec_f(z), self.dec_b(z)], dim=-1)

    def forward(self, x, h, t, text, mask=None):
        """Returns (x^L, h_hat) for batched, padded inputs."""
        B, N, _ = x.shape
        if mask is None:
            mask = torch.ones(B, N, dtype=torch.bool)
        if text.shape != (B, self.cfg.text_dim):
            raise ValidationError(f"text embedding must be ({B}, {self.cfg.text_dim}), got {tuple(text.shape)}")
        fmask = mask.to(DTYPE)[..., None]
        z = self.encode_nodes(h) * fmask
        z_time = self.embed_time(t)
        if self.cfg.conditioning == "concat":
            z = self.condition_concat(z, z_time, text) * fmask
        for layer in self.layers:
            x, z = layer(x, z, z_time, text, mask)
        return x, self.decode(z) * fmask
