import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sgdiff.diffusion import (
    EditMask, EgnnDenoiser, cog_norm, cog_project, draw_noise, make_schedule, masked_sample, pad_graphs, q_sample,
    sample, sample_batch, task_mask, training_loss,
)
from sgdiff.egnn import CONDITIONING_MODES, EgnnConfig, SceneEGNN
from sgdiff.errors import NumericalError, ValidationError
from sgdiff.gradcheck import grad_check
from sgdiff.nn import DTYPE, randomize_parameters
from sgdiff.scene import GROUPS, GraphLayout

LAYOUT = GraphLayout(4, 3)
N_F = LAYOUT.n_f


def tiny_denoiser(conditioning="edge_text_resnet_selfattn", seed=0):
    cfg = EgnnConfig(4, 3, layers=2, latent=8, hidden=12, mlp_depth=2, text_dim=6, heads=2, conditioning=conditioning)
    return EgnnDenoiser(randomize_parameters(SceneEGNN(cfg), seed, 1.0))


def toy_batch(ns=(2,), seed=0, text_dim=6):
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal((n, 3)) for n in ns]
    hs = [rng.standard_normal((n, N_F)) for n in ns]
    texts = [rng.standard_normal(text_dim) for _ in ns]
    return pad_graphs(xs, hs, texts)


# schedules

def test_t1_linear_schedule():
    s = make_schedule(1)
    assert s.betas.tolist() == [1e-4]
    assert abs(s.alpha_bars[0] - 0.9999) < 1e-15
    assert s.sigmas[0] == 0.0


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("sigma", ["beta", "posterior"])
@pytest.mark.parametrize("T", [1, 2, 10, 100, 1000])
def test_schedule_invariants(kind, sigma, T):
    s = make_schedule(T, kind, sigma)
    ab = s.alpha_bars
    assert np.all(np.diff(ab) < 0) and np.all((ab > 0) & (ab < 1))
    assert np.all(s.sigmas >= 0) and s.sigmas[0] == 0
    np.testing.assert_allclose(np.cumprod(1 - s.betas), ab, rtol=1e-12)
    assert s.alpha_bar(0) == 1.0


def test_schedule_tables():
    assert make_schedule(100).alpha_bars[-1] < 0.05
    assert make_schedule(1000).betas[-1] == pytest.approx(0.02)
    assert make_schedule(100, "cosine").alpha_bars[0] > 0.99


def test_schedule_errors():
    with pytest.raises(ValidationError):
        make_schedule(0)
    with pytest.raises(ValidationError):
        make_schedule(10, "sqrt")
    with pytest.raises(ValidationError):
        make_schedule(10, sigma_kind="learned")


def test_tables_are_read_only():
    s = make_schedule(10)
    with pytest.raises(ValueError):
        s.alpha_bars[0] = 0.5


# center of gravity

def test_cog_examples():
    a = torch.tensor([[1.0, 1, 1], [-1, -1, -1]], dtype=DTYPE)
    assert torch.equal(cog_project(a), a)
    b = torch.tensor([[2.0, 0, 0], [0, 0, 0]], dtype=DTYPE)
    assert cog_project(b).tolist() == [[1, 0, 0], [-1, 0, 0]]


def test_cog_1000_random_inputs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        x = torch.from_numpy(rng.standard_normal((n, 3)) * rng.uniform(0.1, 100))
        mask = torch.from_numpy(rng.random(n) < 0.7)
        mask[int(rng.integers(n))] = True
        out = cog_project(x, mask)
        assert cog_norm(out, mask) < 1e-12
        assert torch.all(out[~mask] == 0)


def test_cog_all_masked():
    with pytest.raises(ValidationError):
        cog_project(torch.ones(2, 3, dtype=DTYPE), torch.zeros(2, dtype=torch.bool))


# forward process

def test_q_sample_boundaries_and_linearity():
    s = make_schedule(10)
    rng = np.random.default_rng(0)
    x0, h0, ex, eh = (torch.from_numpy(rng.standard_normal((1, 3, k))) for k in (3, N_F, 3, N_F))
    zx, zh = q_sample(s, x0, h0, torch.tensor([0]), ex, eh)
    assert torch.equal(zx, x0) and torch.equal(zh, h0)
    # alpha_bar -> 0 : a schedule with beta = 0.999 throughout
    from sgdiff.diffusion import NoiseSchedule
    far = NoiseSchedule(np.full(40, 0.999))
    zx, _ = q_sample(far, x0, h0, torch.tensor([40]), ex, eh)
    assert torch.allclose(zx, ex, atol=1e-12)
    shift = torch.from_numpy(rng.standard_normal((1, 3, 3)))
    t = torch.tensor([4])
    a = q_sample(s, x0 + shift, h0, t, ex, eh)[0]
    b = q_sample(s, x0, h0, t, ex, eh)[0] + math.sqrt(s.alpha_bar(4)) * shift
    assert torch.allclose(a, b, atol=1e-14)
    with pytest.raises(ValidationError):
        q_sample(s, x0, h0, torch.tensor([11]), ex, eh)


# training loss

class Oracle:
    """Returns the injected noise exactly by reading it back from the forward process."""

    def __init__(self, schedule, x0, h0):
        self.s, self.x0, self.h0 = schedule, x0, h0

    def __call__(self, zx, zh, t, text, mask):
        ab = torch.tensor([self.s.alpha_bar(int(v)) for v in t], dtype=DTYPE)[:, None, None]
        fm = mask.to(DTYPE)[..., None]
        ex = (zx - ab.sqrt() * self.x0) / (1 - ab).sqrt()
        eh = (zh - ab.sqrt() * self.h0) / (1 - ab).sqrt()
        return ex * fm, eh * fm


def zero_model(zx, zh, t, text, mask):
    return torch.zeros_like(zx), torch.zeros_like(zh)


def test_oracle_loss_is_zero():
    s = make_schedule(50)
    batch = toy_batch((3, 5, 2))
    loss = training_loss(Oracle(s, batch.x0, batch.h0), s, batch, np.random.default_rng(0))
    assert loss.item() < 1e-20


def test_zero_model_loss_monte_carlo():
    # CoG projection removes one of N degrees of freedom per coordinate axis
    s = make_schedule(50)
    n = 6
    batch = toy_batch((n,) * 64)
    rng = np.random.default_rng(0)
    losses = [training_loss(zero_model, s, batch, rng).item() for _ in range(200)]
    expected = 1 - 3 / (n * (3 + N_F))
    assert len(losses) * 64 * n * (3 + N_F) >= 10_000
    assert abs(np.mean(losses) - expected) < 0.05
    assert abs(np.mean(losses) - 1.0) < 0.05


@pytest.mark.parametrize("mode", CONDITIONING_MODES)
def test_training_loss_gradcheck_two_nodes(mode):
    den = tiny_denoiser(mode, seed=3)
    s = make_schedule(20)
    batch = toy_batch((2,), seed=1)

    def f():
        return training_loss(den, s, batch, np.random.default_rng(5))

    rep = grad_check(f, dict(den.net.named_parameters()), max_entries=6)
    assert rep.passed, rep


def test_training_loss_deterministic_and_permutation_invariant():
    den = tiny_denoiser()
    s = make_schedule(20)
    batch = toy_batch((4,), seed=2)
    a = training_loss(den, s, batch, np.random.default_rng(9))
    assert a.item() == training_loss(den, s, batch, np.random.default_rng(9)).item()
    # permuting nodes permutes the noise draw, so compare with the matching permuted draw
    perm = torch.tensor([2, 0, 3, 1])
    rng = np.random.default_rng(9)
    t = torch.from_numpy(rng.integers(1, s.T + 1, size=1))
    ex, eh = draw_noise(rng, batch.mask, N_F)
    zx, zh = q_sample(s, batch.x0, batch.h0, t, ex, eh)
    px, ph = den(zx[:, perm], zh[:, perm], t, batch.text, batch.mask)
    manual = (((ex[:, perm] - px) ** 2).sum() + ((eh[:, perm] - ph) ** 2).sum()) / (4 * (3 + N_F))
    assert abs(manual.item() - a.item()) < 1e-12


def test_nonfinite_loss_aborts():
    s = make_schedule(5)

    def bad(zx, zh, t, text, mask):
        return zx * math.nan, zh

    with pytest.raises(NumericalError):
        training_loss(bad, s, toy_batch(), np.random.default_rng(0))


# sampling

def test_t1_sampler_algebra():
    s = make_schedule(1)
    den = tiny_denoiser()
    text = np.random.default_rng(0).standard_normal(6)
    x, h = sample(den, s, 3, text, np.random.default_rng(4), N_F)
    rng = np.random.default_rng(4)
    zx, zh = draw_noise(rng, torch.ones(1, 3, dtype=torch.bool), N_F)
    with torch.no_grad():
        ex, eh = den(zx, zh, torch.tensor([1]), torch.from_numpy(text)[None], torch.ones(1, 3, dtype=torch.bool))
    c = math.sqrt(1 - s.alpha_bars[0])
    r = math.sqrt(s.alpha_bars[0])
    np.testing.assert_allclose(x, ((zx - c * ex) / r)[0].numpy(), atol=1e-12)
    np.testing.assert_allclose(h, ((zh - c * eh) / r)[0].numpy(), atol=1e-12)


@pytest.mark.parametrize("sigma", ["beta", "posterior"])
def test_oracle_denoiser_recovers_clean_graph(sigma):
    # with the exact noise of a single clean point the reverse chain collapses onto it
    s = make_schedule(30, sigma_kind=sigma)
    batch = toy_batch((5,), seed=4)
    x, h = sample(Oracle(s, batch.x0, batch.h0), s, 5, batch.text[0].numpy(), np.random.default_rng(0), N_F)
    np.testing.assert_allclose(x, batch.x0[0].numpy(), atol=1e-8)
    np.testing.assert_allclose(h, batch.h0[0].numpy(), atol=1e-8)


def test_sampled_cog_is_zero_and_deterministic():
    s = make_schedule(15)
    den = tiny_denoiser()
    norms = []

    def trace(kind, t, x, mask):
        norms.append(cog_norm(x, mask))

    text = np.ones(6) / math.sqrt(6)
    a = sample(den, s, 6, text, np.random.default_rng(1), N_F, trace=trace)
    b = sample(den, s, 6, text, np.random.default_rng(1), N_F)
    assert max(norms) < 1e-9 and len(norms) == 2 * s.T + 1
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_batched_sampling_matches_single_trajectories():
    s = make_schedule(8)
    den = tiny_denoiser()
    mask = torch.tensor([[True] * 4, [True] * 2 + [False] * 2])
    text = torch.from_numpy(np.random.default_rng(0).standard_normal((2, 6)))
    bx, bh = sample_batch(den, s, mask, text, [np.random.default_rng(k) for k in (10, 11)], N_F)
    for b, n in enumerate((4, 2)):
        x, h = sample(den, s, n, text[b].numpy(), np.random.default_rng(10 + b), N_F)
        np.testing.assert_allclose(bx[b, :n].numpy(), x, atol=1e-12)
        np.testing.assert_allclose(bh[b, :n].numpy(), h, atol=1e-12)
        assert torch.all(bx[b, n:] == 0)


def test_sample_rejects_bad_counts():
    s = make_schedule(3)
    with pytest.raises(ValidationError):
        sample(tiny_denoiser(), s, 0, np.zeros(6), np.random.default_rng(0), N_F)
    with pytest.raises(ValidationError):
        sample(tiny_denoiser(), s, 13, np.zeros(6), np.random.default_rng(0), N_F)


def test_nonfinite_sampler_state_names_step():
    s = make_schedule(4)

    def bad(zx, zh, t, text, mask):
        return zx, zh * (math.inf if int(t[0]) == 2 else 1.0)

    with pytest.raises(NumericalError, match="t=2"):
        sample(bad, s, 2, np.zeros(6), np.random.default_rng(0), N_F)


# masked sampling

def known_graph(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 3)), rng.standard_normal((n, N_F))


def test_empty_mask_reproduces_sample():
    s = make_schedule(10)
    den = tiny_denoiser()
    kx, kh = known_graph(4)
    text = np.random.default_rng(1).standard_normal(6)
    mx, mh = masked_sample(den, s, kx, kh, EditMask.empty(4), LAYOUT, text, np.random.default_rng(3),
                           np.random.default_rng(99))
    x, h = sample(den, s, 4, text, np.random.default_rng(3), N_F)
    np.testing.assert_allclose(mx, x, atol=1e-12)
    np.testing.assert_allclose(mh, h, atol=1e-12)


def test_single_free_position():
    s = make_schedule(10)
    kx, kh = known_graph(4)
    nodes = np.array([True, True, False, True])
    groups = np.zeros((4, len(GROUPS)), bool)
    groups[2] = True
    groups[2, GROUPS.index("position")] = False
    mx, mh = masked_sample(tiny_denoiser(), s, kx, kh, EditMask(nodes, groups), LAYOUT, np.zeros(6),
                           np.random.default_rng(0), np.random.default_rng(1))
    assert np.array_equal(mh, kh)
    changed = np.any(mx != kx, axis=1)
    assert changed.tolist() == [False, False, True, False]


@pytest.mark.parametrize("task,frozen_cols", [
    ("rearrange", ("category", "shape_code", "size")),
    ("stylize", ("position", "yaw", "size", "category")),
])
def test_task_masks_keep_frozen_groups(task, frozen_cols):
    s = make_schedule(10)
    kx, kh = known_graph(5, seed=2)
    mx, mh = masked_sample(tiny_denoiser(), s, kx, kh, task_mask(task, 5), LAYOUT, np.zeros(6),
                           np.random.default_rng(0), np.random.default_rng(1))
    for g in frozen_cols:
        if g == "position":
            assert np.array_equal(mx, kx)
        else:
            cols = LAYOUT.group_columns(g)
            assert np.array_equal(mh[:, cols], kh[:, cols])
    free = [g for g in GROUPS if g not in frozen_cols]
    for g in free:
        if g == "position":
            assert not np.array_equal(mx, kx)
        else:
            assert not np.array_equal(mh[:, LAYOUT.group_columns(g)], kh[:, LAYOUT.group_columns(g)])


def test_completion_keeps_existing_nodes():
    s = make_schedule(10)
    kx, kh = known_graph(6, seed=3)
    mx, mh = masked_sample(tiny_denoiser(), s, kx, kh, task_mask("complete", 4, 2), LAYOUT, np.zeros(6),
                           np.random.default_rng(0), np.random.default_rng(1))
    assert np.array_equal(mx[:4], kx[:4]) and np.array_equal(mh[:4], kh[:4])
    assert not np.array_equal(mx[4:], kx[4:])


@given(st.integers(0, 2 ** 31))
@settings(max_examples=10)
def test_masked_sampling_translation(seed):
    # frozen part shifted by v: free coordinates shift by v, features unchanged
    s = make_schedule(6)
    den = tiny_denoiser(seed=seed % 3)
    kx, kh = known_graph(5, seed=seed)
    v = np.random.default_rng(seed).standard_normal(3) * 3
    m = task_mask("complete", 3, 2)
    a = masked_sample(den, s, kx, kh, m, LAYOUT, np.zeros(6), np.random.default_rng(0), np.random.default_rng(1))
    b = masked_sample(den, s, kx + v, kh, m, LAYOUT, np.zeros(6), np.random.default_rng(0), np.random.default_rng(1))
    np.testing.assert_allclose(b[0], a[0] + v, atol=1e-9)
    np.testing.assert_allclose(b[1], a[1], atol=1e-9)


def test_mask_errors():
    with pytest.raises(ValidationError):
        task_mask("recolor", 3)
    with pytest.raises(ValidationError):
        task_mask("complete", 3, 0)
    with pytest.raises(ValidationError):
        task_mask("stylize", 3, 1)
    with pytest.raises(ValidationError):
        EditMask.from_groups(2, ["colour"])
    full = EditMask(np.ones(3, bool), np.zeros((3, len(GROUPS)), bool))
    with pytest.raises(ValidationError, match="nothing to sample"):
        full.validate(LAYOUT)


# guidance

def test_guidance_zero_is_passthrough_and_guided_is_cog_free():
    from sgdiff.diffusion import GuidedDenoiser

    base = tiny_denoiser()
    b = toy_batch((2, 3), seed=4)
    t = torch.tensor([5.0, 9.0], dtype=DTYPE)
    with torch.no_grad():
        ex0, eh0 = base(b.x0, b.h0, t, b.text, b.mask)
        ex, eh = GuidedDenoiser(base, 0.0)(b.x0, b.h0, t, b.text, b.mask)
        assert torch.equal(ex, ex0) and torch.equal(eh, eh0)
        gx, gh = GuidedDenoiser(base, 2.0)(b.x0, b.h0, t, b.text, b.mask)
        ux, uh = base(b.x0, b.h0, t, torch.zeros_like(b.text), b.mask)
    torch.testing.assert_close(gx, 3 * ex0 - 2 * ux, rtol=0, atol=1e-10)
    torch.testing.assert_close(gh, 3 * eh0 - 2 * uh, rtol=0, atol=1e-10)
    assert cog_norm(gx, b.mask) < 1e-12
