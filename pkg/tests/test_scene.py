import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_scene, scenes
from sgdiff.errors import ValidationError
from sgdiff.scene import (
    GeoSceneGraph, GraphLayout, NormalizationStats, Scene, SceneObject, graph_to_scene, place_on_floor,
    rotate_scene, scene_to_graph, yaw_matrix,
)


def obj(pos=(0, 0, 0), yaw=0.0, size=(1, 1, 1), cat=0, code=(0.0, 0.0)):
    return SceneObject(pos, yaw, size, cat, code)


def test_feature_width_is_categories_plus_code_plus_five():
    g = scene_to_graph(Scene((obj(cat=3),)), NormalizationStats(), num_categories=4)
    assert g.h.shape == (1, 11)
    assert GraphLayout(4, 2).n_f == 11


def test_identity_stats_keep_positions():
    g = scene_to_graph(Scene((obj(pos=(1, 2, 3)),)), NormalizationStats(), 4)
    assert g.x.tolist() == [[1.0, 2.0, 3.0]]


def test_round_trip_100_random_scenes(rng):
    for k in range(100):
        s = random_scene(rng, int(rng.integers(1, 13)))
        stats = NormalizationStats.fit([s, random_scene(rng, 5)])
        back = graph_to_scene(scene_to_graph(s, stats, 4), stats)
        assert back.categories.tolist() == s.categories.tolist()
        np.testing.assert_allclose(back.positions, s.positions, atol=1e-9)
        np.testing.assert_allclose(back.sizes, s.sizes, atol=1e-9)
        for a, b in zip(back.objects, s.objects):
            assert abs(math.remainder(a.yaw - b.yaw, 2 * math.pi)) < 1e-9
            np.testing.assert_allclose(a.shape_code, b.shape_code, atol=1e-9)


@given(scenes())
def test_round_trip_property(scene):
    stats = NormalizationStats.fit([scene])
    back = graph_to_scene(scene_to_graph(scene, stats, 4), stats)
    assert np.array_equal(back.categories, scene.categories)
    np.testing.assert_allclose(back.positions, scene.positions, atol=1e-9)
    np.testing.assert_allclose(back.sizes, scene.sizes, atol=1e-9)
    for a, b in zip(back.objects, scene.objects):
        ca, sa = a.yaw_pair
        assert abs(ca * ca + sa * sa - 1) < 1e-9
        np.testing.assert_allclose(a.yaw_pair, b.yaw_pair, atol=1e-9)


def _graph(h_row, k=3, d=0):
    return GeoSceneGraph(np.zeros((1, 3)), np.array([h_row], dtype=float), GraphLayout(k, d))


def test_decode_argmax_category():
    s = graph_to_scene(_graph([0.1, 0.7, 0.2, 1, 1, 1, 1, 0]), NormalizationStats())
    assert s.objects[0].category == 1


def test_decode_renormalizes_yaw():
    s = graph_to_scene(_graph([1, 0, 0, 1, 1, 1, 2, 0]), NormalizationStats())
    assert s.objects[0].yaw == 0.0
    assert s.objects[0].yaw_pair == (1.0, 0.0)


def test_decode_clamps_sizes():
    s = graph_to_scene(_graph([1, 0, 0, -1, 0.5, 0, 1, 0]), NormalizationStats())
    assert s.objects[0].size.tolist() == [1e-3, 0.5, 1e-3]


def test_decode_rejects_nonfinite():
    with pytest.raises(ValidationError):
        graph_to_scene(_graph([np.nan, 0, 0, 1, 1, 1, 1, 0]), NormalizationStats())


def test_category_out_of_range_rejected():
    with pytest.raises(ValidationError, match="category 5"):
        scene_to_graph(Scene((obj(cat=5),)), NormalizationStats(), 4)


def test_noisy_t1_features_decode_to_same_categories(rng):
    # at t=1 the signal coefficient is ~1 and the noise coefficient ~0.01, far below the one-hot margin
    from sgdiff.diffusion import make_schedule

    sched = make_schedule(100)
    a, s = math.sqrt(sched.alpha_bar(1)), math.sqrt(1 - sched.alpha_bar(1))
    for _ in range(200):
        scene = random_scene(rng, 8)
        stats = NormalizationStats.fit([scene])
        g = scene_to_graph(scene, stats, 4)
        noisy = GeoSceneGraph(g.x, a * g.h + s * rng.standard_normal(g.h.shape), g.layout)
        assert np.array_equal(graph_to_scene(noisy, stats).categories, scene.categories)


def test_scene_invariants():
    with pytest.raises(ValidationError):
        Scene(())
    with pytest.raises(ValidationError):
        obj(size=(1, 0, 1))
    with pytest.raises(ValidationError):
        Scene(tuple(obj() for _ in range(13))).validate(n_max=12)
    with pytest.raises(ValidationError):
        Scene((obj(code=(1.0,)), obj(code=(1.0, 2.0))))


def test_objects_are_immutable():
    o = obj()
    with pytest.raises(ValueError):
        o.position[0] = 5.0


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(0.1, 5), min_size=3, max_size=3))
def test_normalization_inverse(p, scale):
    stats = NormalizationStats(tuple(p), tuple(scale), tuple(p), tuple(scale))
    x = np.array([1.5, -2.0, 0.25])
    np.testing.assert_allclose(stats.denormalize_pos(stats.normalize_pos(x)), x, atol=1e-9)
    np.testing.assert_allclose(stats.denormalize_size(stats.normalize_size(x)), x, atol=1e-9)
    assert NormalizationStats.from_dict(stats.to_dict()) == stats


def test_stats_reject_nonpositive_scale():
    with pytest.raises(ValidationError):
        NormalizationStats(pos_scale=(1.0, 0.0, 1.0))


def test_yaw_matrix_convention():
    R = yaw_matrix(math.pi / 2)
    np.testing.assert_allclose(R @ np.array([1.0, 0, 0]), [0, 0, -1], atol=1e-15)
    np.testing.assert_allclose(R @ np.array([0, 0, 1.0]), [1, 0, 0], atol=1e-15)


def test_quarter_turn_rotation_is_exact():
    s = Scene((obj(pos=(1.25, 0.5, -0.75), yaw=0.3),))
    r = rotate_scene(s, 180)
    assert r.positions.tolist() == [[-1.25, 0.5, 0.75]]
    back = rotate_scene(rotate_scene(r, 90), 90)
    assert back.positions.tolist() == s.positions.tolist()


def test_place_on_floor():
    s = place_on_floor(Scene((obj(pos=(0, 3, 0), size=(1, 0.5, 1)), obj(pos=(1, 4, 0), size=(1, 0.5, 1)))))
    assert s.positions[:, 1].tolist() == [0.5, 1.5]
