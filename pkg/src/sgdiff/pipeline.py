"""End-to-end routines shared by the CLI and the experiment scripts:
dataset generation, denoiser/codec training with checkpoints, sampling and editing.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .codec import RetrievalIndex, ShapeVAE, index_from_tensors, index_to_tensors, retrieve, synth_embeddings, vae_loss
from .config import RunConfig
from .dataio import Record
from .diffusion import (
    EgnnDenoiser, GuidedDenoiser, NoiseSchedule, Trace, make_schedule, masked_sample, pad_graphs, sample_batch, task_mask,
    training_loss,
)
from .egnn import EgnnConfig, SceneEGNN
from .errors import ConfigError, ValidationError
from .nn import DTYPE, adam_init, adam_step, init_parameters, load_numpy_params, params_to_numpy
from .relations import RelationRules
from .rng import stream
from .scene import GROUPS, GeoSceneGraph, GraphLayout, NormalizationStats, Scene, SceneObject, graph_to_scene, \
    place_on_floor, scene_to_graph
from .synth import synth_prompt, synth_scene, vocabulary
from .text import make_embedder

log = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoint"
TRAIN_LOG = "train_log.jsonl"


def rules_of(cfg: RunConfig) -> RelationRules:
    return RelationRules(cfg.data.vertical_gap, cfg.data.close_dist)


def embedder_of(cfg: RunConfig):
    return make_embedder(cfg.data.text_provider, cfg.data.text_dim, cfg.data.text_sidecar)


def egnn_config(cfg: RunConfig) -> EgnnConfig:
    m = cfg.model
    return EgnnConfig(
        num_categories=len(vocabulary(cfg.data.grammar)), code_dim=cfg.data.code_dim,
        layers=m.layers, latent=m.latent, hidden=m.hidden, mlp_depth=m.mlp_depth,
        text_dim=cfg.data.text_dim, heads=m.heads, conditioning=m.conditioning, geometry=m.geometry,
    )


def schedule_of(cfg: RunConfig) -> NoiseSchedule:
    return make_schedule(cfg.diffusion.steps, cfg.diffusion.schedule, cfg.diffusion.sigma)


# ---------------------------------------------------------------- data


def generate_records(grammar: str, count: int, seed: int, k_triplets: int = 2, code_dim: int = 16,
                     codebook=None, rules: RelationRules = RelationRules()) -> list[Record]:
    out = []
    for i in range(count):
        scene_seed = int(stream(seed, "gen", i).integers(2 ** 62))
        scene = synth_scene(scene_seed, grammar, code_dim=code_dim, codebook=codebook)
        prompt, triplets = synth_prompt(scene, scene_seed, k_triplets, rules)
        out.append(Record(scene, prompt, tuple(triplets)))
    return out


def dataset_summary(records: Sequence[Record]) -> dict:
    counts = [len(r.scene) for r in records]
    cats = Counter(int(c) for r in records for c in r.scene.categories)
    return {
        "scenes": len(records),
        "objects_mean": float(np.mean(counts)) if counts else 0.0,
        "objects_min": min(counts, default=0),
        "objects_max": max(counts, default=0),
        "categories": {str(k): cats[k] for k in sorted(cats)},
        "triplets_mean": float(np.mean([len(r.triplets) for r in records])) if records else 0.0,
    }


@dataclass
class Prepared:
    graphs: list[GeoSceneGraph]
    texts: list[np.ndarray]
    stats: NormalizationStats
    layout: GraphLayout


def prepare(records: Sequence[Record], cfg: RunConfig, stats: NormalizationStats | None = None) -> Prepared:
    K = len(vocabulary(cfg.data.grammar))
    stats = stats or NormalizationStats.fit([r.scene for r in records])
    embed = embedder_of(cfg)
    graphs = []
    for r in records:
        r.scene.validate(cfg.data.n_max, K, cfg.data.code_dim)
        graphs.append(scene_to_graph(r.scene, stats, K))
    return Prepared(graphs, [embed(r.prompt) for r in records], stats, GraphLayout(K, cfg.data.code_dim))


def make_batch(prep: Prepared, idx: Sequence[int], drop_text: np.ndarray | None = None):
    texts = [prep.texts[i] for i in idx]
    if drop_text is not None:
        texts = [np.zeros_like(t) if d else t for t, d in zip(texts, drop_text)]
    return pad_graphs([prep.graphs[i].x for i in idx], [prep.graphs[i].h for i in idx], texts)


# ---------------------------------------------------------------- denoiser training


@dataclass
class Bundle:
    """A loaded denoiser checkpoint."""

    net: SceneEGNN
    cfg: RunConfig
    meta: dict
    stats: NormalizationStats
    layout: GraphLayout
    path: str

    @property
    def denoiser(self):
        base = EgnnDenoiser(self.net)
        w = self.cfg.diffusion.guidance
        return GuidedDenoiser(base, w) if w else base

    @property
    def schedule(self) -> NoiseSchedule:
        return schedule_of(self.cfg)

    @property
    def blob_hash(self) -> str:
        return ckpt.checkpoint_hash(self.path)


def _save_denoiser(path: Path, net, adam, cfg: RunConfig, step: int, extra: dict, ema=None) -> str:
    tensors = params_to_numpy(net, "egnn/")
    for k in sorted(adam["m"]):
        tensors["adam/m/" + k] = adam["m"][k].numpy()
        tensors["adam/v/" + k] = adam["v"][k].numpy()
    for k in sorted(ema or {}):
        tensors["ema/" + k] = ema[k].numpy()
    meta = {"kind": "denoiser", "step": step, "adam_step": adam["step"], "seed": cfg.train.seed,
            "config": cfg.to_dict(), "config_hash": cfg.hash, **extra}
    return ckpt.save_container(path, tensors, meta)


def load_denoiser(path: str | Path, expect_config: RunConfig | None = None, with_adam: bool = False):
    """Load a denoiser checkpoint.

    Without ``with_adam`` the returned network carries the EMA weights when the
    checkpoint has them (the sampling weights). With ``with_adam`` it carries the
    raw training weights and the optimizer state (including the EMA) is returned
    alongside, for resuming.
    """
    tensors, meta = ckpt.load_container(path)
    if meta.get("kind") != "denoiser":
        raise ConfigError(f"{path} is not a denoiser checkpoint")
    cfg = RunConfig.from_dict(meta["config"])
    if ckpt.config_hash(meta["config"]) != meta["config_hash"]:
        raise ConfigError(f"{path}: stored config does not match its hash")
    if expect_config is not None and expect_config.hash != meta["config_hash"]:
        raise ConfigError(f"config hash {expect_config.hash[:12]} does not match checkpoint {meta['config_hash'][:12]}")
    net = SceneEGNN(egnn_config(cfg))
    has_ema = any(k.startswith("ema/") for k in tensors)
    load_numpy_params(net, tensors, "ema/" if has_ema and not with_adam else "egnn/")
    bundle = Bundle(net, cfg, meta, NormalizationStats.from_dict(meta["stats"]),
                    GraphLayout(**meta["layout"]), str(path))
    if not with_adam:
        return bundle
    adam = {"step": meta["adam_step"], "m": {}, "v": {}}
    for k, _ in net.named_parameters():
        adam["m"][k] = torch.from_numpy(tensors["adam/m/" + k])
        adam["v"][k] = torch.from_numpy(tensors["adam/v/" + k])
    ema = {k: torch.from_numpy(tensors["ema/" + k]) for k, _ in net.named_parameters()} if has_ema else None
    return bundle, adam, ema


def eval_loss(denoiser, schedule, prep: Prepared, cfg: RunConfig) -> float:
    n = min(cfg.train.eval_scenes, len(prep.graphs))
    batch = make_batch(prep, range(n))
    with torch.no_grad():
        return float(training_loss(denoiser, schedule, batch, stream(cfg.train.seed, "eval-loss")))


def lr_at(tc, step: int) -> float:
    """Learning rate of 0-based ``step``."""
    if tc.lr_schedule == "constant":
        return tc.lr
    if tc.lr_schedule == "cosine":
        return 0.5 * tc.lr * (1.0 + math.cos(math.pi * step / max(tc.steps, 1)))
    raise ConfigError(f"unknown lr schedule {tc.lr_schedule!r}")


def _read_log(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    return [r for r in rows if r["event"] != "final" and r["step"] <= upto]


def train_denoiser(
    cfg: RunConfig,
    records: Sequence[Record],
    out: str | Path,
    resume: bool = True,
    dry_run: bool = False,
    stop_at: int | None = None,
    trace: Trace | None = None,
) -> dict:
    """Train the denoiser, writing ``out/checkpoint`` and ``out/train_log.jsonl``.

    An existing checkpoint in ``out`` is resumed (its config hash must match).
    ``stop_at`` ends the run early (used to test resumption) without changing
    any step's randomness: every step draws from streams keyed by its index.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    prep = prepare(records, cfg)
    schedule = schedule_of(cfg)
    ck_path = out / CHECKPOINT_DIR

    if resume and (ck_path / ckpt.MANIFEST).exists():
        bundle, adam, ema = load_denoiser(ck_path, expect_config=cfg, with_adam=True)
        net, start = bundle.net, bundle.meta["step"]
        initial = bundle.meta["initial_eval_loss"]
        log.info("resuming from step %d", start)
    else:
        net = init_parameters(SceneEGNN(egnn_config(cfg)), tc.seed)
        adam = adam_init(dict(net.named_parameters()))
        ema = {k: p.detach().clone() for k, p in net.named_parameters()} if tc.ema_decay else None
        start = 0
        initial = eval_loss(EgnnDenoiser(net), schedule, prep, cfg)
    denoiser = EgnnDenoiser(net)
    params = dict(net.named_parameters())
    n_hist = Counter(len(g) for g in prep.graphs)
    extra = {"stats": prep.stats.to_dict(), "layout": {"num_categories": prep.layout.num_categories,
                                                       "code_dim": prep.layout.code_dim},
             "n_hist": {str(k): n_hist[k] for k in sorted(n_hist)}, "initial_eval_loss": initial,
             "room_type": cfg.data.grammar}

    log_path = out / TRAIN_LOG
    rows = _read_log(log_path, start)
    n = len(prep.graphs)
    per_epoch = max(1, -(-n // tc.batch_size))
    end = 1 if dry_run else tc.steps
    if stop_at is not None:
        end = min(end, stop_at)

    with open(log_path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
        epoch_losses = [r["loss"] for r in rows if r["event"] == "step" and (r["step"] - 1) // per_epoch == start // per_epoch]
        for step in range(start, end):
            bs = min(tc.batch_size, n)
            idx = stream(tc.seed, "batch", step).choice(n, size=bs, replace=False)
            drop = stream(tc.seed, "dropout", step).uniform(size=bs) < tc.text_dropout
            batch = make_batch(prep, idx, drop)
            loss = training_loss(denoiser, schedule, batch, stream(tc.seed, "noise", step), trace)
            grads = torch.autograd.grad(loss, list(params.values()))
            grads = dict(zip(params, grads))
            if tc.grad_clip:
                norm = torch.sqrt(sum((g ** 2).sum() for g in grads.values()))
                if norm > tc.grad_clip:
                    grads = {k: g * (tc.grad_clip / norm) for k, g in grads.items()}
            adam_step(params, grads, adam, lr_at(tc, step), tc.beta1, tc.beta2, tc.eps)
            if ema is not None:
                with torch.no_grad():
                    for k, p in params.items():
                        ema[k].mul_(tc.ema_decay).add_(p, alpha=1.0 - tc.ema_decay)
            row = {"event": "step", "step": step + 1, "loss": float(loss.detach())}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            epoch_losses.append(row["loss"])
            if (step + 1) % per_epoch == 0:
                fh.write(json.dumps({"event": "epoch", "epoch": (step + 1) // per_epoch, "step": step + 1,
                                     "loss": float(np.mean(epoch_losses))}, sort_keys=True) + "\n")
                epoch_losses = []
            if (step + 1) % tc.checkpoint_every == 0 or step + 1 == end:
                fh.flush()
                _save_denoiser(ck_path, net, adam, cfg, step + 1, extra, ema)
        if start >= end and not (ck_path / ckpt.MANIFEST).exists():
            _save_denoiser(ck_path, net, adam, cfg, start, extra, ema)

        final = eval_loss(denoiser, schedule, prep, cfg)
        fh.write(json.dumps({"event": "final", "step": end, "initial_eval_loss": initial,
                             "final_eval_loss": final}, sort_keys=True) + "\n")
    return {"initial_eval_loss": initial, "final_eval_loss": final, "steps": end,
            "checkpoint": str(ck_path), "config_hash": cfg.hash}


# ---------------------------------------------------------------- sampling and editing


def decode_graph(bundle: Bundle, x: np.ndarray, h: np.ndarray) -> Scene:
    g = GeoSceneGraph(x, h, bundle.layout, bundle.meta.get("room_type", bundle.cfg.data.grammar))
    return place_on_floor(graph_to_scene(g, bundle.stats))


def draw_object_counts(bundle: Bundle, count: int, seed: int) -> list[int]:
    hist = bundle.meta["n_hist"]
    ns = np.array([int(k) for k in hist])
    p = np.array([hist[k] for k in hist], dtype=np.float64)
    return [int(v) for v in stream(seed, "n-objects").choice(ns, size=count, p=p / p.sum())]


def generate_scenes(bundle: Bundle, prompts: Sequence[str], n_objects: Sequence[int], seed: int,
                    unconditional: bool = False, batch_size: int = 100, trace: Trace | None = None) -> list[Scene]:
    """Sample one scene per prompt; trajectory i uses stream (seed, "sample", i)."""
    if len(prompts) != len(n_objects):
        raise ValidationError("need one object count per prompt")
    for n in n_objects:
        if not 1 <= n <= bundle.cfg.data.n_max:
            raise ValidationError(f"n_objects must be in [1, {bundle.cfg.data.n_max}], got {n}")
    embed = embedder_of(bundle.cfg)
    texts = [np.zeros(bundle.cfg.data.text_dim) if unconditional else embed(p) for p in prompts]
    scenes = []
    for lo in range(0, len(prompts), batch_size):
        ids = range(lo, min(lo + batch_size, len(prompts)))
        n_pad = max(n_objects[i] for i in ids)
        mask = torch.zeros(len(ids), n_pad, dtype=torch.bool)
        for b, i in enumerate(ids):
            mask[b, :n_objects[i]] = True
        text = torch.from_numpy(np.stack([texts[i] for i in ids]))
        rngs = [stream(seed, "sample", i) for i in ids]
        x, h = sample_batch(bundle.denoiser, bundle.schedule, mask, text, rngs, bundle.layout.n_f, trace)
        for b, i in enumerate(ids):
            n = n_objects[i]
            scenes.append(decode_graph(bundle, x[b, :n].numpy(), h[b, :n].numpy()))
    return scenes


def edit_scene(bundle: Bundle, scene: Scene, task: str, prompt: str, seed: int, n_new: int = 0) -> Scene:
    """Zero-shot editing via masked sampling; frozen fields are copied from ``scene`` unchanged."""
    K = bundle.layout.num_categories
    scene.validate(bundle.cfg.data.n_max, K, bundle.layout.code_dim)
    if task == "complete" and len(scene) + n_new > bundle.cfg.data.n_max:
        raise ValidationError(f"completion would exceed {bundle.cfg.data.n_max} objects")
    mask = task_mask(task, len(scene), n_new)
    g = scene_to_graph(scene, bundle.stats, K)
    n = len(scene) + n_new
    kx = np.zeros((n, 3))
    kh = np.zeros((n, bundle.layout.n_f))
    kx[:len(scene)], kh[:len(scene)] = g.x, g.h
    text = embedder_of(bundle.cfg)(prompt)
    x, h = masked_sample(bundle.denoiser, bundle.schedule, kx, kh, mask, bundle.layout, text,
                         stream(seed, "edit", task), stream(seed, "inject", task))
    out = graph_to_scene(GeoSceneGraph(x, h, bundle.layout, scene.room_type), bundle.stats)

    pos_free = ~mask.frozen("position")
    shift = np.zeros(3)
    if pos_free.all():
        # fully re-sampled layouts come back centered; keep them where the input was
        shift = scene.positions.mean(0) - out.positions[:len(scene)].mean(0)
    objects = []
    for i, o in enumerate(out.objects):
        src = scene.objects[i] if i < len(scene) else None
        keep = {g_: src is not None and bool(mask.frozen(g_)[i]) for g_ in GROUPS}
        objects.append(SceneObject(
            src.position if keep["position"] else o.position + shift,
            src.yaw if keep["yaw"] else o.yaw,
            src.size if keep["size"] else o.size,
            src.category if keep["category"] else o.category,
            src.shape_code if keep["shape_code"] else o.shape_code,
        ))
    return Scene(tuple(objects), scene.room_type)


# ---------------------------------------------------------------- shape codec


def train_codec(cfg: RunConfig, out: str | Path | None = None, progress: Callable[[int, float], None] | None = None) -> dict:
    """Train the VAE on synthetic clustered embeddings and build the retrieval index.

    The last ``holdout`` items of each class are held out for the reconstruction
    metric; the index covers the whole catalog (object id = row).
    """
    c = cfg.codec
    K = c.num_classes or len(vocabulary(cfg.data.grammar))
    emb, labels = synth_embeddings(c.seed, K, c.per_class, c.embed_dim)
    within = np.concatenate([np.arange(c.per_class)] * K)
    hold = within >= c.per_class - c.holdout
    train_x = torch.from_numpy(emb[~hold])
    vae = init_parameters(ShapeVAE(c.embed_dim, cfg.data.code_dim, c.hidden, c.depth), c.seed)
    params = dict(vae.named_parameters())
    adam = adam_init(params)
    for step in range(c.steps):
        rng = stream(c.seed, "codec-step", step)
        idx = rng.choice(len(train_x), size=min(c.batch_size, len(train_x)), replace=False)
        eps = torch.from_numpy(rng.standard_normal((len(idx), cfg.data.code_dim)))
        loss = vae_loss(vae, train_x[idx], c.beta_kl, eps)
        grads = dict(zip(params, torch.autograd.grad(loss, list(params.values()))))
        adam_step(params, grads, adam, c.lr)
        if progress is not None:
            progress(step, float(loss.detach()))

    def recon_cos(x):
        with torch.no_grad():
            r = vae.decode(torch.from_numpy(vae.encode_mean(x))).numpy()
        return float(np.mean(np.sum(r * x, 1) / (np.linalg.norm(r, axis=1) * np.linalg.norm(x, axis=1))))

    metrics = {"train_cosine": recon_cos(emb[~hold]),
               "heldout_cosine": recon_cos(emb[hold]) if hold.any() else float("nan"),
               "final_loss": float(loss.detach()) if c.steps else float("nan")}
    index = RetrievalIndex.build(vae.encode_mean(emb), labels, metric=c.metric)
    if out is not None:
        tensors = {**params_to_numpy(vae, "vae/"), **index_to_tensors(index)}
        meta = {"kind": "codec", "config": cfg.to_dict(), "config_hash": cfg.hash, "metrics": metrics,
                "seed": c.seed}
        ckpt.save_container(out, tensors, meta)
    return {"metrics": metrics, "index": index, "vae": vae, "embeddings": emb, "labels": labels, "heldout": hold}


def load_codec(path: str | Path):
    tensors, meta = ckpt.load_container(path)
    if meta.get("kind") != "codec":
        raise ConfigError(f"{path} is not a codec checkpoint")
    cfg = RunConfig.from_dict(meta["config"])
    c = cfg.codec
    vae = ShapeVAE(c.embed_dim, cfg.data.code_dim, c.hidden, c.depth)
    load_numpy_params(vae, tensors, "vae/")
    return vae, index_from_tensors(tensors, c.metric), meta


def retrieve_objects(index: RetrievalIndex, scene: Scene) -> list[int]:
    return [retrieve(index, o.category, o.shape_code) for o in scene.objects]
