"""Equivariant scene-graph diffusion: schedules, training objective and samplers.

Coordinates live in the zero center-of-gravity subspace: every coordinate noise
draw and every network coordinate prediction is mean-centered over the real
(unpadded) nodes of its scene.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import NumericalError, ValidationError
from .nn import DTYPE
from .scene import GROUPS, GraphLayout

Trace = Callable[[str, int, torch.Tensor, torch.Tensor], None]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step tables; index ``t - 1`` holds step t. ``alpha_bar(0) == 1`` by convention."""

    betas: np.ndarray
    sigma_kind: str = "beta"

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ValidationError("need at least one diffusion step")
        if not np.all((b > 0) & (b < 1)):
            raise ValidationError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", b)
        alphas = 1.0 - b
        alpha_bars = np.cumprod(alphas)
        if self.sigma_kind == "beta":
            sig2 = b.copy()
        elif self.sigma_kind == "posterior":
            prev = np.concatenate([[1.0], alpha_bars[:-1]])
            sig2 = b * (1.0 - prev) / (1.0 - alpha_bars)
        else:
            raise ValidationError(f"unknown sigma kind {self.sigma_kind!r}")
        sig2[0] = 0.0
        for name, a in (("alphas", alphas), ("alpha_bars", alpha_bars), ("sigmas", np.sqrt(sig2))):
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def make_schedule(T: int, kind: str = "linear", sigma_kind: str = "beta") -> NoiseSchedule:
    """Linear or cosine beta schedule.

    Linear: beta_1 = 1e-4 rising to 0.02 * 1000 / T (capped at 0.999), i.e. the
    usual 1e-4..0.02 at T = 1000, rescaled so shorter chains still end near pure
    noise. Cosine: the squared-cosine alpha-bar with offset s = 0.008, betas
    clipped to 0.999.
    """
    if T < 1:
        raise ValidationError("T must be >= 1")
    if kind == "linear":
        betas = np.linspace(1e-4, min(0.02 * 1000.0 / T, 0.999), T)
    elif kind == "cosine":
        s = 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise ValidationError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas, sigma_kind)


def cog_project(eps_x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Subtract the center of gravity of the unmasked rows; padded rows become zero.

    ``eps_x`` is (N, 3) or (B, N, 3); ``mask`` is (N,) / (B, N) bool.
    """
    if mask is None:
        mask = torch.ones(eps_x.shape[:-1], dtype=torch.bool)
    m = mask.to(eps_x.dtype)[..., None]
    count = m.sum(-2, keepdim=True)
    if (count == 0).any():
        raise ValidationError("center of gravity undefined: all nodes masked")
    mean = (eps_x * m).sum(-2, keepdim=True) / count
    return (eps_x - mean) * m


def cog_norm(x: torch.Tensor, mask: torch.Tensor) -> float:
    """Largest |mean| over scenes and axes of the unmasked coordinate rows."""
    m = mask.to(x.dtype)[..., None]
    mean = (x * m).sum(-2) / m.sum(-2)
    return float(mean.abs().max())


def q_sample(schedule: NoiseSchedule, x0, h0, t, eps_x, eps_h):
    """zeta_t = sqrt(abar_t) [x0, h0] + sqrt(1 - abar_t) eps, with t per scene (t = 0 allowed)."""
    t = torch.as_tensor(t)
    if (t < 0).any() or (t > schedule.T).any():
        raise ValidationError(f"timestep out of range [0, {schedule.T}]")
    ab = torch.tensor([schedule.alpha_bar(int(s)) for s in t.reshape(-1)], dtype=DTYPE).reshape(t.shape)
    a = torch.sqrt(ab)[..., None, None]
    s = torch.sqrt(1.0 - ab)[..., None, None]
    return a * x0 + s * eps_x, a * h0 + s * eps_h


class EgnnDenoiser:
    """Noise predictor wrapping an equivariant network.

    The coordinate noise estimate is the residual x^L - x^0 of the coordinate
    track, projected to zero center of gravity; the feature estimate is the
    decoded h.
    """

    def __init__(self, net):
        self.net = net

    def __call__(self, zx, zh, t, text, mask):
        xL, h_hat = self.net(zx, zh, t, text, mask)
        return cog_project(xL - zx, mask), h_hat * mask.to(DTYPE)[..., None]


class GuidedDenoiser:
    """Classifier-free guidance: (1 + w) f(zeta, t, y) - w f(zeta, t, 0).

    The zero text embedding is the unconditional input seen under text dropout.
    A linear combination of CoG-free predictions stays CoG-free.
    """

    def __init__(self, base, weight: float):
        self.base, self.weight = base, float(weight)

    def __call__(self, zx, zh, t, text, mask):
        if self.weight == 0.0:
            return self.base(zx, zh, t, text, mask)
        B = zx.shape[0]
        ex, eh = self.base(torch.cat([zx, zx]), torch.cat([zh, zh]), torch.cat([t, t]),
                           torch.cat([text, torch.zeros_like(text)]), torch.cat([mask, mask]))
        w = self.weight
        return (1 + w) * ex[:B] - w * ex[B:], (1 + w) * eh[:B] - w * eh[B:]


@dataclass
class Batch:
    """Padded scene graphs: x0 (B, N, 3) CoG-centered, h0 (B, N, n_f), mask (B, N), text (B, d_text)."""

    x0: torch.Tensor
    h0: torch.Tensor
    mask: torch.Tensor
    text: torch.Tensor

    def __len__(self) -> int:
        return self.x0.shape[0]


def pad_graphs(xs: Sequence[np.ndarray], hs: Sequence[np.ndarray], texts: Sequence[np.ndarray], n_max: int | None = None) -> Batch:
    n_max = n_max or max(len(x) for x in xs)
    B, n_f = len(xs), hs[0].shape[1]
    x0 = np.zeros((B, n_max, 3))
    h0 = np.zeros((B, n_max, n_f))
    mask = np.zeros((B, n_max), dtype=bool)
    for b, (x, h) in enumerate(zip(xs, hs)):
        n = len(x)
        if n > n_max:
            raise ValidationError(f"graph with {n} nodes exceeds padding size {n_max}")
        x0[b, :n] = x - x.mean(0)
        h0[b, :n] = h
        mask[b, :n] = True
    return Batch(torch.from_numpy(x0), torch.from_numpy(h0), torch.from_numpy(mask),
                 torch.from_numpy(np.stack(texts).astype(np.float64)))


def draw_noise(rng: np.random.Generator, mask: torch.Tensor, n_f: int):
    """Standard normal noise on unmasked entries, coordinate block CoG-projected."""
    B, N = mask.shape
    raw = torch.from_numpy(rng.standard_normal((B, N, 3 + n_f)))
    fm = mask.to(DTYPE)[..., None]
    return cog_project(raw[..., :3], mask), raw[..., 3:] * fm


def _per_scene_noise(rngs: Sequence[np.random.Generator], mask: torch.Tensor, n_f: int):
    """One independent stream per trajectory; each scene draws only its own rows."""
    B, N = mask.shape
    raw = torch.zeros(B, N, 3 + n_f, dtype=DTYPE)
    for b, rng in enumerate(rngs):
        n = int(mask[b].sum())
        raw[b, :n] = torch.from_numpy(rng.standard_normal((n, 3 + n_f)))
    return cog_project(raw[..., :3], mask), raw[..., 3:] * mask.to(DTYPE)[..., None]


def training_loss(model, schedule: NoiseSchedule, batch: Batch, rng: np.random.Generator,
                  trace: Trace | None = None) -> torch.Tensor:
    """Mean squared error between injected and predicted noise over unmasked entries."""
    B = len(batch)
    n_f = batch.h0.shape[-1]
    t = torch.from_numpy(rng.integers(1, schedule.T + 1, size=B))
    eps_x, eps_h = draw_noise(rng, batch.mask, n_f)
    zx, zh = q_sample(schedule, batch.x0, batch.h0, t, eps_x, eps_h)
    if trace is not None:
        trace("train_eps", -1, eps_x, batch.mask)
        trace("train_zeta", -1, zx, batch.mask)
    px, ph = model(zx, zh, t, batch.text, batch.mask)
    fm = batch.mask.to(DTYPE)[..., None]
    sq = ((eps_x - px) ** 2 * fm).sum() + ((eps_h - ph) ** 2 * fm).sum()
    loss = sq / (fm.sum() * (3 + n_f))
    if not torch.isfinite(loss):
        raise NumericalError("non-finite training loss")
    return loss


def _reverse_step(schedule, zx, zh, ex_hat, eh_hat, t, eps_x, eps_h):
    a = schedule.alphas[t - 1]
    ab = schedule.alpha_bars[t - 1]
    c = (1.0 - a) / math.sqrt(1.0 - ab)
    s = schedule.sigmas[t - 1]
    r = 1.0 / math.sqrt(a)
    return r * (zx - c * ex_hat) + s * eps_x, r * (zh - c * eh_hat) + s * eps_h


def sample_batch(model, schedule: NoiseSchedule, mask: torch.Tensor, text: torch.Tensor,
                 rngs: Sequence[np.random.Generator], n_f: int, trace: Trace | None = None):
    """Ancestral sampling of B independent trajectories; returns (x0, h0) tensors."""
    return _sample(model, schedule, mask, text, rngs, n_f, trace)


def _sample(model, schedule, mask, text, rngs, n_f, trace=None, inject=None):
    B = mask.shape[0]
    if len(rngs) != B:
        raise ValidationError("need one random stream per trajectory")
    zx, zh = _per_scene_noise(rngs, mask, n_f)
    if inject is not None:
        zx, zh = inject(schedule.T, zx, zh)
    for t in range(schedule.T, 0, -1):
        if trace is not None:
            trace("sample_zeta", t, zx, mask)
        tt = torch.full((B,), t, dtype=torch.int64)
        with torch.no_grad():
            ex_hat, eh_hat = model(zx, zh, tt, text, mask)
        eps_x, eps_h = _per_scene_noise(rngs, mask, n_f)
        if trace is not None:
            trace("sample_eps", t, eps_x, mask)
        zx, zh = _reverse_step(schedule, zx, zh, ex_hat, eh_hat, t, eps_x, eps_h)
        if inject is not None:
            zx, zh = inject(t - 1, zx, zh)
        if not (torch.isfinite(zx).all() and torch.isfinite(zh).all()):
            raise NumericalError(f"non-finite sampler state at step t={t}")
    if trace is not None:
        trace("sample_zeta", 0, zx, mask)
    return zx, zh


def sample(model, schedule: NoiseSchedule, n_objects: int, text, rng: np.random.Generator, n_f: int,
           n_max: int = 12, trace: Trace | None = None):
    """Single-trajectory sampler; returns numpy (x (N, 3), h (N, n_f))."""
    if not 1 <= n_objects <= n_max:
        raise ValidationError(f"n_objects must be in [1, {n_max}]")
    mask = torch.ones(1, n_objects, dtype=torch.bool)
    text = torch.as_tensor(np.asarray(text, dtype=np.float64))[None]
    x, h = _sample(model, schedule, mask, text, [rng], n_f, trace)
    return x[0].numpy(), h[0].numpy()


@dataclass(frozen=True, eq=False)
class EditMask:
    """Frozen (known) entries for masked sampling.

    ``nodes[i]`` freezes node i entirely; ``groups[i, g]`` freezes feature group
    ``GROUPS[g]`` of node i.
    """

    nodes: np.ndarray
    groups: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=bool)
        groups = np.asarray(self.groups, dtype=bool)
        if nodes.ndim != 1 or groups.shape != (len(nodes), len(GROUPS)):
            raise ValidationError(f"mask shapes must be (N,) and (N, {len(GROUPS)})")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "groups", groups)

    @classmethod
    def empty(cls, n: int) -> "EditMask":
        return cls(np.zeros(n, bool), np.zeros((n, len(GROUPS)), bool))

    @classmethod
    def from_groups(cls, n: int, frozen: Sequence[str], nodes: Sequence[int] | None = None) -> "EditMask":
        """Freeze ``frozen`` groups on ``nodes`` (default: every node)."""
        unknown = set(frozen) - set(GROUPS)
        if unknown:
            raise ValidationError(f"unknown feature groups {sorted(unknown)}")
        groups = np.zeros((n, len(GROUPS)), bool)
        rows = range(n) if nodes is None else nodes
        for g in frozen:
            groups[list(rows), GROUPS.index(g)] = True
        return cls(np.zeros(n, bool), groups)

    def frozen(self, group: str) -> np.ndarray:
        return self.nodes | self.groups[:, GROUPS.index(group)]

    def expand(self, layout: GraphLayout) -> tuple[np.ndarray, np.ndarray]:
        """Boolean (N, 3) and (N, n_f) masks of frozen coordinate / feature entries."""
        n = len(self.nodes)
        fx = np.repeat(self.frozen("position")[:, None], 3, axis=1)
        fh = np.zeros((n, layout.n_f), bool)
        for g in GROUPS[1:]:
            fh[:, layout.group_columns(g)] = self.frozen(g)[:, None]
        return fx, fh

    def validate(self, layout: GraphLayout):
        fx, fh = self.expand(layout)
        if fx.all() and fh.all():
            raise ValidationError("edit mask freezes every entry; nothing to sample")
        return self


TASK_GROUPS = {
    "rearrange": ("category", "shape_code", "size"),
    "stylize": ("position", "yaw", "size", "category"),
}


def task_mask(task: str, n_existing: int, n_new: int = 0) -> EditMask:
    """Edit mask of a zero-shot task.

    rearrange: re-sample positions and yaws; stylize: re-sample shape codes;
    complete: keep the existing nodes and sample ``n_new`` appended ones.
    """
    if task in TASK_GROUPS:
        if n_new:
            raise ValidationError(f"task {task!r} does not add objects")
        return EditMask.from_groups(n_existing, TASK_GROUPS[task])
    if task == "complete":
        if n_new < 1:
            raise ValidationError("completion needs at least one new object")
        n = n_existing + n_new
        return EditMask(np.arange(n) < n_existing, np.zeros((n, len(GROUPS)), bool))
    raise ValidationError(f"unknown edit task {task!r}")


def masked_sample(model, schedule: NoiseSchedule, known_x: np.ndarray, known_h: np.ndarray, mask: EditMask,
                  layout: GraphLayout, text, rng: np.random.Generator, inject_rng: np.random.Generator,
                  trace: Trace | None = None):
    """Inpainting-style sampling: frozen entries follow the forward-noised known graph.

    After every reverse step to t - 1 the frozen entries are overwritten with a
    fresh q_sample of the known graph at t - 1; at t = 0 that is the known graph
    itself. ``rng`` drives exactly the same draws as :func:`sample`, so an empty
    mask reproduces its trajectory; ``inject_rng`` feeds the re-noising.
    Coordinates are handled relative to the center of the frozen positions.
    """
    mask.validate(layout)
    known_x = np.asarray(known_x, dtype=np.float64)
    known_h = np.asarray(known_h, dtype=np.float64)
    fx, fh = mask.expand(layout)
    pos_frozen = fx[:, 0]
    offset = known_x[pos_frozen].mean(0) if pos_frozen.any() else np.zeros(3)

    kx = torch.from_numpy(known_x - offset)[None]
    kh = torch.from_numpy(known_h)[None]
    fx_t = torch.from_numpy(fx)[None]
    fh_t = torch.from_numpy(fh)[None]
    n = len(known_x)
    node_mask = torch.ones(1, n, dtype=torch.bool)

    def inject(t, zx, zh):
        ex = torch.from_numpy(inject_rng.standard_normal((1, n, 3)))
        eh = torch.from_numpy(inject_rng.standard_normal((1, n, layout.n_f)))
        qx, qh = q_sample(schedule, kx, kh, torch.tensor([t]), ex, eh)
        return torch.where(fx_t, qx, zx), torch.where(fh_t, qh, zh)

    text = torch.as_tensor(np.asarray(text, dtype=np.float64))[None]
    zx, zh = _sample(model, schedule, node_mask, text, [rng], layout.n_f, trace, inject)
    out_x = np.where(fx, known_x, zx[0].numpy() + offset)
    out_h = np.where(fh, known_h, zh[0].numpy())
    return out_x, out_h
