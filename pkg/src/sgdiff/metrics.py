"""Controllability and stylization metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .relations import Relation, RelationRules, RelationTriplet, relation_codes
from .rng import stream
from .scene import Scene, rotate_scene
from .synth import category_name

ROTATIONS = (0, 90, 180, 270)


def _names(scene: Scene) -> list[str]:
    return [category_name(scene.room_type, c) for c in scene.categories]


def _ref_name(scene: Scene, ref) -> str:
    return category_name(scene.room_type, scene.objects[ref].category) if isinstance(ref, int) else str(ref)


def _satisfied(codes: np.ndarray, names: Sequence[str], gt: Sequence[RelationTriplet], scene: Scene) -> np.ndarray:
    """Per-triplet bool (broadcast over leading axes of ``codes``): some instance pair matches."""
    names = np.asarray(names)
    out = []
    for trip in gt:
        obj = names == _ref_name(scene, trip.object_ref)
        sub = names == _ref_name(scene, trip.subject_ref)
        pair = obj[:, None] & sub[None, :]
        out.append(((codes == Relation(trip.relation).code) & pair).any(axis=(-1, -2)))
    return np.stack(out, axis=-1)


def irecall(scene: Scene, gt: Sequence[RelationTriplet], rules: RelationRules = RelationRules()) -> float:
    """Fraction of ground-truth triplets realized by the scene (1.0 for an empty list).

    Triplets match on category names; with duplicate categories a triplet counts
    as satisfied if any instance pair satisfies it.
    """
    if not gt:
        return 1.0
    codes = relation_codes(scene.positions, scene.sizes, scene.yaws, rules)
    return float(_satisfied(codes, _names(scene), gt, scene).mean())


def irecall_ri(scene: Scene, gt: Sequence[RelationTriplet], rules: RelationRules = RelationRules()) -> float:
    """Maximum iRecall over the four quarter-turn yaw rotations of the scene."""
    return max(irecall(rotate_scene(scene, deg), gt, rules) for deg in ROTATIONS)


def cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValidationError("cosine similarity of a zero-norm embedding")
    return float(a @ b / (na * nb))


def stylization_delta(object_embs, style_emb, class_embs) -> float:
    """Mean over objects of cos(e_obj, e_style) - cos(e_obj, e_class)."""
    objs = np.atleast_2d(np.asarray(object_embs, dtype=np.float64))
    style = np.asarray(style_emb, dtype=np.float64)
    styles = np.broadcast_to(style, objs.shape) if style.ndim == 1 else style
    classes = np.atleast_2d(np.asarray(class_embs, dtype=np.float64))
    if not (objs.shape == styles.shape == classes.shape):
        raise ValidationError(f"embedding shapes differ: {objs.shape}, {styles.shape}, {classes.shape}")
    return float(np.mean([cosine(o, s) - cosine(o, c) for o, s, c in zip(objs, styles, classes)]))


def random_baseline(
    scenes: Sequence[Scene],
    gt_lists: Sequence[Sequence[RelationTriplet]],
    rng_seed: int,
    trials: int,
    region: tuple[tuple[float, float], tuple[float, float]] | None = None,
    rules: RelationRules = RelationRules(),
) -> float:
    """Mean iRecall when object x/z positions are re-drawn uniformly in the room region.

    Heights, sizes, yaws and categories are kept. ``region`` is
    ((x_min, x_max), (z_min, z_max)); by default the bounding rectangle of all
    object centers in ``scenes``.
    """
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    if region is None:
        pos = np.concatenate([s.positions for s in scenes])
        region = ((pos[:, 0].min(), pos[:, 0].max()), (pos[:, 2].min(), pos[:, 2].max()))
    (x0, x1), (z0, z1) = region
    scores = []
    for k, (scene, gt) in enumerate(zip(scenes, gt_lists)):
        if not gt:
            scores.append(1.0)
            continue
        rng = stream(rng_seed, "baseline", k)
        n = len(scene)
        pos = np.broadcast_to(scene.positions, (trials, n, 3)).copy()
        pos[..., 0] = rng.uniform(x0, x1, size=(trials, n))
        pos[..., 2] = rng.uniform(z0, z1, size=(trials, n))
        codes = relation_codes(pos, np.broadcast_to(scene.sizes, pos.shape), np.broadcast_to(scene.yaws, (trials, n)), rules)
        scores.append(float(_satisfied(codes, _names(scene), gt, scene).mean()))
    return float(np.mean(scores))


@dataclass
class EvalReport:
    per_scene: list[dict] = field(default_factory=list)
    means: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def evaluate(
    scenes: Sequence[Scene],
    gt_lists: Sequence[Sequence[RelationTriplet]],
    baseline_seed: int = 0,
    baseline_trials: int = 10_000,
    rules: RelationRules = RelationRules(),
    deltas: Sequence[float] | None = None,
    baseline_scenes: Sequence[Scene] | None = None,
) -> EvalReport:
    """Per-scene recalls plus means; the chance level re-places objects of ``baseline_scenes``.

    Passing the ground-truth scenes as ``baseline_scenes`` keeps the chance level
    independent of the model being scored; by default the evaluated scenes are used.
    """
    rows = []
    for i, (scene, gt) in enumerate(zip(scenes, gt_lists)):
        row = {"index": i, "n_objects": len(scene), "n_triplets": len(gt),
               "irecall": irecall(scene, gt, rules), "irecall_ri": irecall_ri(scene, gt, rules)}
        if deltas is not None:
            row["delta"] = float(deltas[i])
        rows.append(row)
    means = {
        "irecall": float(np.mean([r["irecall"] for r in rows])),
        "irecall_ri": float(np.mean([r["irecall_ri"] for r in rows])),
        "random_baseline": random_baseline(baseline_scenes or scenes, gt_lists, baseline_seed, baseline_trials,
                                           rules=rules),
    }
    if deltas is not None:
        means["delta"] = float(np.mean(deltas))
    return EvalReport(
        rows, means, {"scenes": len(rows), "triplets": int(sum(len(g) for g in gt_lists))},
        {"baseline_seed": baseline_seed, "baseline_trials": baseline_trials,
         "vertical_gap": rules.vertical_gap, "close_dist": rules.close_dist},
    )
