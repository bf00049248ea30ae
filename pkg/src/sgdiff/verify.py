"""Self-verification battery run by ``sgdiff verify``.

Each suite returns a short detail string or raises ``AssertionError``; one
PASS/FAIL line is printed per suite and the exit code is nonzero on any failure.
"""
from __future__ import annotations

import time
import traceback

import numpy as np
import torch

from .checkpoint import load_container
from .diffusion import Batch, EgnnDenoiser, cog_project, make_schedule, training_loss
from .egnn import EgnnConfig, SceneEGNN
from .gradcheck import grad_check
from .metrics import irecall, irecall_ri, stylization_delta
from .nn import randomize_parameters
from .relations import HALF_TURN, Relation, RelationTriplet, extract_relations
from .rng import stream
from .scene import Scene, SceneObject, rotate_scene
from .synth import synth_scene

K, CODE = 4, 4


def _small_net(geometry: str, conditioning: str = "edge_text_resnet_selfattn", seed: int = 0,
               scale: float = 1.0) -> SceneEGNN:
    cfg = EgnnConfig(K, CODE, layers=2, latent=8, hidden=12, mlp_depth=2, text_dim=6, heads=2,
                     conditioning=conditioning, geometry=geometry)
    return randomize_parameters(SceneEGNN(cfg), seed, scale)


def _random_orthogonal(rng) -> torch.Tensor:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return torch.from_numpy(q * np.sign(np.diag(r)))


def _inputs(net, rng, n=5, b=2):
    x = torch.from_numpy(rng.standard_normal((b, n, 3)))
    h = torch.from_numpy(rng.standard_normal((b, n, net.cfg.n_f)))
    t = torch.from_numpy(rng.integers(1, 100, size=b))
    text = torch.from_numpy(rng.standard_normal((b, net.cfg.text_dim)))
    return x, h, t, text


def suite_equivariance(cases: int) -> str:
    net = _small_net("scalar_distance")
    worst = 0.0
    with torch.no_grad():
        for k in range(cases):
            rng = stream(0, "verify-eqv", k)
            x, h, t, text = _inputs(net, rng)
            R, shift = _random_orthogonal(rng), torch.from_numpy(rng.standard_normal(3))
            x1, h1 = net(x, h, t, text)
            x2, h2 = net(x @ R.T + shift, h, t, text)
            worst = max(worst, float((x2 - (x1 @ R.T + shift)).abs().max()), float((h2 - h1).abs().max()))
    assert worst < 1e-6, f"max deviation {worst:.3e}"
    return f"{cases} cases, max deviation {worst:.1e}"


def suite_translation(cases: int) -> str:
    worst = 0.0
    with torch.no_grad():
        for geometry in ("vector_delta", "scalar_distance"):
            net = _small_net(geometry)
            for k in range(cases):
                rng = stream(0, "verify-trans", geometry, k)
                x, h, t, text = _inputs(net, rng)
                shift = torch.from_numpy(rng.uniform(-10, 10, size=3))
                x1, h1 = net(x, h, t, text)
                x2, h2 = net(x + shift, h, t, text)
                worst = max(worst, float((x2 - x1 - shift).abs().max()), float((h2 - h1).abs().max()))
    assert worst < 1e-9, f"max deviation {worst:.3e}"
    return f"{2 * cases} cases, max deviation {worst:.1e}"


def suite_gradients() -> str:
    worst = []
    for conditioning in ("edge_text_resnet_selfattn", "concat", "cross_attention"):
        net = _small_net("vector_delta", conditioning, seed=1)
        rng = stream(0, "verify-grad", conditioning)
        x0 = cog_project(torch.from_numpy(rng.standard_normal((1, 2, 3))))
        h0 = torch.from_numpy(rng.standard_normal((1, 2, net.cfg.n_f)))
        batch = Batch(x0, h0, torch.ones(1, 2, dtype=torch.bool), torch.from_numpy(rng.standard_normal((1, 6))))
        sched = make_schedule(10)
        rep = grad_check(lambda: training_loss(EgnnDenoiser(net), sched, batch, stream(0, "verify-noise")),
                         dict(net.named_parameters()), max_entries=6)
        assert rep.passed, f"{conditioning}: {rep}"
        worst.append(rep.max_error)
    return f"3 conditioning modes, max rel err {max(worst):.1e}"


def suite_schedule() -> str:
    for T in (1, 10, 100, 1000):
        for kind in ("linear", "cosine"):
            s = make_schedule(T, kind)
            ab = np.concatenate([[1.0], s.alpha_bars])
            assert np.all(np.diff(ab) < 0), f"{kind} T={T}: alpha_bar not decreasing"
            assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1)), f"{kind} T={T}: alpha_bar outside (0, 1)"
            assert s.sigmas[0] == 0.0, f"{kind} T={T}: sigma_1 != 0"
    assert make_schedule(100).alpha_bars[-1] < 0.05
    return "linear and cosine, T in {1, 10, 100, 1000}"


def suite_cog(cases: int) -> str:
    worst = 0.0
    for k in range(cases):
        rng = stream(0, "verify-cog", k)
        n = int(rng.integers(1, 13))
        mask = torch.from_numpy(np.arange(12) < n)
        y = cog_project(torch.from_numpy(rng.standard_normal((12, 3)) * 100), mask)
        worst = max(worst, float(y[:n].mean(0).abs().max()))
        assert float(y[n:].abs().sum()) == 0.0, "padded rows not zeroed"
    assert worst < 1e-9, f"max |mean| {worst:.3e}"
    return f"{cases} cases, max |mean| {worst:.1e}"


def suite_metrics() -> str:
    code = np.zeros(CODE)
    bed = SceneObject([0.0, 0.25, 0.0], 0.0, [0.5, 0.25, 1.0], 0, code)
    stand = SceneObject([-0.8, 0.25, 0.0], 0.0, [0.25, 0.25, 0.25], 1, code)
    scene = Scene((bed, stand))
    gt = [RelationTriplet("nightstand", Relation.CloselyLeftOf, "bed")]
    assert irecall(scene, gt) == 1.0
    flipped = rotate_scene(scene, 180)
    assert (irecall(flipped, gt), irecall_ri(flipped, gt)) == (0.0, 1.0), "rotated-scene oracle"
    e = np.eye(3)
    assert abs(stylization_delta([e[0]], e[0], [e[0]])) < 1e-9
    assert abs(stylization_delta([e[0]], e[0], [e[1]]) - 1.0) < 1e-9
    for k in range(20):
        s = synth_scene(k, code_dim=CODE)
        rel = {(t.object_ref, t.subject_ref): t.relation for t in extract_relations(s)}
        rot = {(t.object_ref, t.subject_ref): t.relation for t in extract_relations(rotate_scene(s, 180))}
        assert rot == {k_: HALF_TURN[r] for k_, r in rel.items()}, f"half-turn relation map, scene {k}"
    return "rotation oracle, stylization cases, 20 half-turn relation maps"


def suite_checkpoint(path: str) -> str:
    tensors, meta = load_container(path)
    kind = meta.get("kind")
    if kind == "denoiser":
        from .pipeline import load_denoiser
        bundle = load_denoiser(path)
        for name, p in bundle.net.named_parameters():
            assert torch.isfinite(p).all(), f"non-finite parameter {name}"
    elif kind == "codec":
        from .pipeline import load_codec
        load_codec(path)
    return f"{kind or 'unknown'} checkpoint, {len(tensors)} tensors, checksum ok"


def run_suites(checkpoint: str | None = None, quick: bool = False, out=print) -> int:
    n = 20 if quick else 100
    suites = [
        ("equivariance", lambda: suite_equivariance(n)),
        ("translation", lambda: suite_translation(n)),
        ("gradients", suite_gradients),
        ("schedule", suite_schedule),
        ("cog", lambda: suite_cog(10 * n)),
        ("metrics", suite_metrics),
    ]
    if checkpoint is not None:
        suites.append(("checkpoint", lambda: suite_checkpoint(checkpoint)))
    failed = []
    for name, fn in suites:
        t0 = time.perf_counter()
        try:
            detail = fn()
            out(f"PASS {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
        except Exception as e:  # noqa: BLE001 - every failure must be reported per suite
            failed.append(name)
            msg = str(e) or traceback.format_exception_only(type(e), e)[-1].strip()
            out(f"FAIL {name}: {type(e).__name__}: {msg}")
    out(f"{len(suites) - len(failed)}/{len(suites)} suites passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return 1 if failed else 0
