"""Text embedding providers.

The default provider needs no model weights: every n-gram (n <= 4) of the
lower-cased text is hashed to a fixed Gaussian vector, the vectors are summed
and the result is L2-normalized. Longer n-grams keep word order: "left of the
bed" and "left of the wardrobe" differ, while a prompt and its argument-swapped
twin share nearly all unigrams and bigrams. Users with a
real text encoder can precompute embeddings into a sidecar file instead.
"""
from __future__ import annotations

import functools
import hashlib
import json
import re
from pathlib import Path

import numpy as np

from .errors import ValidationError

_TOKEN = re.compile(r"[a-z0-9]+")


def tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


MAX_NGRAM = 4


def _ngrams(text: str) -> list[str]:
    toks = tokens(text)
    return [" ".join(toks[i:i + n]) for n in range(1, MAX_NGRAM + 1) for i in range(len(toks) - n + 1)]


@functools.lru_cache(maxsize=65536)
def _feature_vector(feature: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=16).digest()
    key = int.from_bytes(digest, "little")
    rng = np.random.Generator(np.random.Philox(key=key))
    v = rng.standard_normal(dim)
    v.flags.writeable = False
    return v


class HashEmbedder:
    name = "hash"

    def __init__(self, dim: int = 64):
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        feats = _ngrams(text)
        if not feats:
            return np.zeros(self.dim)
        v = np.sum([_feature_vector(f, self.dim) for f in feats], axis=0)
        return v / np.linalg.norm(v)


class SidecarEmbedder:
    """Precomputed embeddings keyed by the exact prompt string.

    File format: JSON-Lines, one ``{"text": str, "emb": [float, ...]}`` per line.
    """

    name = "sidecar"

    def __init__(self, path: str | Path):
        self.path = str(path)
        self.table: dict[str, np.ndarray] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    self.table[rec["text"]] = np.asarray(rec["emb"], dtype=np.float64)
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise ValidationError(f"{path}:{lineno}: bad embedding record ({e})") from None
        dims = {len(v) for v in self.table.values()}
        if len(dims) > 1:
            raise ValidationError(f"{path}: mixed embedding dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    def __call__(self, text: str) -> np.ndarray:
        if text == "":
            return np.zeros(self.dim)
        try:
            return self.table[text].copy()
        except KeyError:
            raise KeyError(f"no precomputed embedding for prompt {text!r} in {self.path}") from None


def embed_text(text: str, dim: int = 64) -> np.ndarray:
    return HashEmbedder(dim)(text)


def make_embedder(provider: str = "hash", dim: int = 64, sidecar: str | None = None):
    if provider == "hash":
        return HashEmbedder(dim)
    if provider == "sidecar":
        if sidecar is None:
            raise ValidationError("sidecar provider needs a path")
        emb = SidecarEmbedder(sidecar)
        if emb.dim and emb.dim != dim:
            raise ValidationError(f"sidecar dimension {emb.dim} != configured {dim}")
        return emb
    raise ValidationError(f"unknown text provider {provider!r}")
