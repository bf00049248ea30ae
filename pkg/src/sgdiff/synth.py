"""Procedural room grammars and templated prompts.

The grammars stand in for a real furnished-room dataset: they are small,
deterministic per seed and designed so that their intended relation structure
is recoverable with :func:`sgdiff.relations.extract_relations`.
"""
from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from .errors import ValidationError
from .relations import PHRASES, RelationRules, RelationTriplet, extract_relations
from .rng import stream
from .scene import Scene, SceneObject

BED, NIGHTSTAND, WARDROBE, LAMP = range(4)

VOCABULARIES: dict[str, tuple[str, ...]] = {
    "bedroom-toy": ("bed", "nightstand", "wardrobe", "lamp"),
}


def vocabulary(room_type: str) -> tuple[str, ...]:
    try:
        return VOCABULARIES[room_type]
    except KeyError:
        raise ValidationError(f"unknown room type {room_type!r}") from None


def category_name(room_type: str, category: int) -> str:
    names = VOCABULARIES.get(room_type)
    if names is None or category >= len(names):
        return f"cat{category}"
    return names[category]


def default_code(category: int, code_dim: int, rng: np.random.Generator) -> np.ndarray:
    """Shape code drawn around a fixed per-category prototype."""
    proto = stream(0, "prototype", category).standard_normal(code_dim)
    proto /= np.linalg.norm(proto)
    return proto + 0.1 * rng.standard_normal(code_dim) / math.sqrt(code_dim)


def _bedroom_toy(rng: np.random.Generator, code_fn: Callable[[int], np.ndarray]) -> Scene:
    u = rng.uniform
    room_x, room_z = u(2.0, 3.0), u(2.0, 3.0)
    objs = []

    bed_size = np.array([u(0.45, 0.55), u(0.22, 0.28), u(0.95, 1.05)])
    bed_pos = np.array([u(-0.3, 0.3), bed_size[1], u(-0.3, 0.3)])
    objs.append(SceneObject(bed_pos, 0.0, bed_size, BED, code_fn(BED)))

    n_stands = int(rng.choice(3, p=[0.2, 0.3, 0.5]))
    sides = [-1, 1] if n_stands == 2 else ([int(rng.choice([-1, 1]))] if n_stands == 1 else [])
    stands = []
    for side in sides:
        size = np.array([u(0.2, 0.25), u(0.25, 0.3), u(0.2, 0.25)])
        # center distance to the bed stays below 1 m with |dx| > |dz|
        x = bed_pos[0] + side * (bed_size[0] + size[0] + u(0.02, 0.08))
        pos = np.array([x, size[1], bed_pos[2] + u(-0.25, 0.25)])
        stands.append((pos, size))
        objs.append(SceneObject(pos, 0.0, size, NIGHTSTAND, code_fn(NIGHTSTAND)))

    w_size = np.array([u(0.5, 0.7), u(0.9, 1.1), u(0.28, 0.32)])
    wall = int(rng.choice([-1, 1]))
    w_pos = np.array([wall * (room_x - w_size[2]), w_size[1], u(-(room_z - 0.7), room_z - 0.7)])
    objs.append(SceneObject(w_pos, -wall * math.pi / 2, w_size, WARDROBE, code_fn(WARDROBE)))

    if stands and rng.uniform() < 0.6:
        s_pos, s_size = stands[int(rng.integers(len(stands)))]
        l_size = np.array([u(0.1, 0.15), u(0.2, 0.3), u(0.1, 0.15)])
        l_pos = np.array([s_pos[0], 2 * s_size[1] + l_size[1], s_pos[2]])
        objs.append(SceneObject(l_pos, 0.0, l_size, LAMP, code_fn(LAMP)))

    return Scene(tuple(objs), "bedroom-toy")


GRAMMARS = {"bedroom-toy": _bedroom_toy}


def synth_scene(
    rng_seed: int,
    grammar: str = "bedroom-toy",
    code_dim: int = 16,
    codebook: Mapping[int, np.ndarray] | None = None,
) -> Scene:
    """Sample one scene from a registered grammar.

    ``codebook`` maps category -> (M, code_dim) array of catalog shape codes;
    when given, every object takes the code of a uniformly chosen catalog entry.
    """
    if grammar not in GRAMMARS:
        raise ValidationError(f"unknown grammar {grammar!r}; known: {sorted(GRAMMARS)}")
    rng = stream(rng_seed, "scene", grammar)
    code_rng = stream(rng_seed, "code", grammar)

    def code_fn(cat: int) -> np.ndarray:
        if codebook is None:
            return default_code(cat, code_dim, code_rng)
        bank = np.asarray(codebook[cat])
        return bank[int(code_rng.integers(len(bank)))]

    return GRAMMARS[grammar](rng, code_fn)


def render_triplet(t: RelationTriplet) -> str:
    return f"Place a {t.object_ref} {PHRASES[t.relation]} the {t.subject_ref}."


def synth_prompt(
    scene: Scene,
    rng_seed: int,
    k_triplets: int,
    rules: RelationRules = RelationRules(),
) -> tuple[str, list[RelationTriplet]]:
    """Sample up to ``k_triplets`` relations of ``scene`` and render them as text.

    Returned triplets reference category names, which is what the text mentions.
    """
    if k_triplets <= 0:
        return "", []
    available = extract_relations(scene, rules)
    if not available:
        raise ValidationError("scene has no relations to describe")
    rng = stream(rng_seed, "prompt")
    k = min(k_triplets, len(available))
    picked = rng.choice(len(available), size=k, replace=False)
    triplets = []
    for idx in picked:
        t = available[int(idx)]
        triplets.append(RelationTriplet(
            category_name(scene.room_type, scene.objects[t.object_ref].category),
            t.relation,
            category_name(scene.room_type, scene.objects[t.subject_ref].category),
        ))
    return " ".join(render_triplet(t) for t in triplets), triplets
