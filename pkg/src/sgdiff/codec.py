"""Shape-code autoencoder and class-filtered nearest-neighbour retrieval."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ValidationError
from .nn import DTYPE, MLP, mlp_sizes
from .rng import stream


class ShapeVAE(nn.Module):
    """Gaussian VAE: encoder D_e -> (mu, logvar) of dim d, decoder d -> D_e."""

    def __init__(self, embed_dim: int = 1280, code_dim: int = 64, hidden: int = 128, depth: int = 2):
        super().__init__()
        self.embed_dim, self.code_dim = embed_dim, code_dim
        self.encoder = MLP(mlp_sizes(embed_dim, 2 * code_dim, hidden, depth))
        self.decoder = MLP(mlp_sizes(code_dim, embed_dim, hidden, depth))

    def encode(self, e: torch.Tensor, eps: torch.Tensor | None = None):
        """Returns (mu, logvar, z) with z = mu + exp(logvar / 2) * eps."""
        if e.shape[-1] != self.embed_dim:
            raise ValidationError(f"expected embeddings of dim {self.embed_dim}, got {tuple(e.shape)}")
        mu, logvar = self.encoder(e).chunk(2, dim=-1)
        if eps is None:
            eps = torch.zeros_like(mu)
        return mu, logvar, mu + torch.exp(0.5 * logvar) * eps

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.code_dim:
            raise ValidationError(f"expected codes of dim {self.code_dim}, got {tuple(z.shape)}")
        return self.decoder(z)

    def encode_mean(self, e) -> np.ndarray:
        with torch.no_grad():
            mu, _, _ = self.encode(torch.as_tensor(np.asarray(e), dtype=DTYPE))
        return mu.numpy()


def vae_encode(params: ShapeVAE, e, rng: np.random.Generator | None = None):
    """Encode with a recorded noise draw; returns (mu, logvar, z, eps)."""
    e = torch.as_tensor(e, dtype=DTYPE)
    shape = e.shape[:-1] + (params.code_dim,)
    eps = torch.zeros(shape, dtype=DTYPE) if rng is None else torch.from_numpy(rng.standard_normal(tuple(shape)))
    mu, logvar, z = params.encode(e, eps)
    return mu, logvar, z, eps


def vae_decode(params: ShapeVAE, z) -> torch.Tensor:
    return params.decode(torch.as_tensor(z, dtype=DTYPE))


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over the last axis."""
    return 0.5 * (mu ** 2 + torch.exp(logvar) - logvar - 1.0).sum(-1)


def vae_loss(params: ShapeVAE, batch: torch.Tensor, beta_kl: float = 1e-3, eps: torch.Tensor | None = None) -> torch.Tensor:
    """Batch mean of (per-sample mean squared reconstruction error + beta_kl * KL)."""
    if beta_kl < 0:
        raise ValidationError("beta_kl must be non-negative")
    mu, logvar, z = params.encode(batch, eps)
    recon = params.decode(z)
    mse = ((recon - batch) ** 2).mean(-1)
    return (mse + beta_kl * kl_divergence(mu, logvar)).mean()


def synth_embeddings(rng_seed: int, num_classes: int, per_class: int, embed_dim: int, sigma: float = 0.05):
    """Clustered stand-in for image/shape embeddings.

    Class centers are orthonormal (pairwise cosine 0) when ``num_classes <=
    embed_dim``; each sample adds isotropic noise whose expected norm is
    ``sigma``. Returns (embeddings (K*per_class, D_e), labels).
    """
    if per_class < 1:
        raise ValidationError("per_class must be >= 1")
    rng = stream(rng_seed, "embeddings")
    g = rng.standard_normal((embed_dim, max(num_classes, 1)))
    if num_classes <= embed_dim:
        q, r = np.linalg.qr(g)
        centers = (q * np.sign(np.diag(r))).T[:num_classes]
    else:
        centers = (g / np.linalg.norm(g, axis=0)).T
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.standard_normal((len(labels), embed_dim)) * sigma / np.sqrt(embed_dim)
    return centers[labels] + noise, labels


@dataclass(frozen=True, eq=False)
class RetrievalIndex:
    """Per-category catalog of (object_id, shape_code)."""

    ids: np.ndarray
    categories: np.ndarray
    codes: np.ndarray
    metric: str = "euclidean"

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        cats = np.asarray(self.categories, dtype=np.int64)
        codes = np.asarray(self.codes, dtype=np.float64)
        if codes.ndim != 2 or len(ids) != len(codes) or len(cats) != len(codes):
            raise ValidationError("ids, categories and codes must align")
        if len(np.unique(ids)) != len(ids):
            raise ValidationError("object ids must be unique")
        if self.metric not in ("euclidean", "cosine"):
            raise ValidationError(f"unknown metric {self.metric!r}")
        for name, a in (("ids", ids), ("categories", cats), ("codes", codes)):
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @classmethod
    def build(cls, codes, categories, ids: Sequence[int] | None = None, metric: str = "euclidean"):
        codes = np.asarray(codes)
        if ids is None:
            ids = np.arange(len(codes))
        return cls(ids, categories, codes, metric)

    @property
    def code_dim(self) -> int:
        return self.codes.shape[1]

    def codebook(self) -> dict[int, np.ndarray]:
        return {int(c): self.codes[self.categories == c] for c in np.unique(self.categories)}


def retrieve(index: RetrievalIndex, category: int, code) -> int:
    """Exact 1-NN within ``category``; ties go to the lowest object id."""
    code = np.asarray(code, dtype=np.float64)
    if code.shape != (index.code_dim,):
        raise ValidationError(f"query code must have shape ({index.code_dim},)")
    sel = np.flatnonzero(index.categories == category)
    if len(sel) == 0:
        raise ValidationError(f"retrieval index has no objects of category {category}")
    cand = index.codes[sel]
    if index.metric == "euclidean":
        dist = ((cand - code) ** 2).sum(1)
    else:
        denom = np.linalg.norm(cand, axis=1) * np.linalg.norm(code)
        dist = -(cand @ code) / np.where(denom > 0, denom, 1.0)
    best = sel[dist == dist.min()]
    return int(index.ids[best].min())


def index_to_tensors(index: RetrievalIndex, prefix: str = "index/") -> dict[str, np.ndarray]:
    return {prefix + "ids": index.ids, prefix + "categories": index.categories, prefix + "codes": index.codes}


def index_from_tensors(t: dict, metric: str = "euclidean", prefix: str = "index/") -> RetrievalIndex:
    return RetrievalIndex(t[prefix + "ids"], t[prefix + "categories"], t[prefix + "codes"], metric)
