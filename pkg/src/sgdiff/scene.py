"""Scene and scene-graph representations.

Axis convention: y is up, the world origin sits at the center of the floor and
yaw rotates about +y with ``R = [[c, 0, s], [0, 1, 0], [-s, 0, c]]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError

N_MAX = 12
SIZE_EPS = 1e-3

# feature groups of a node, in the order used by EditMask
GROUPS = ("position", "yaw", "size", "category", "shape_code")


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValidationError(f"expected shape {shape}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class SceneObject:
    """One furniture item.

    ``yaw`` is stored as an angle; ``yaw_pair`` gives the (cos, sin) view used
    inside node features. ``size`` holds positive half-extents.
    """

    position: np.ndarray
    yaw: float
    size: np.ndarray
    category: int
    shape_code: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position, (3,)))
        object.__setattr__(self, "size", _frozen(self.size, (3,)))
        object.__setattr__(self, "shape_code", _frozen(self.shape_code))
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "category", int(self.category))
        if self.shape_code.ndim != 1:
            raise ValidationError("shape_code must be a vector")
        if not np.all(self.size > 0):
            raise ValidationError(f"size components must be positive, got {self.size.tolist()}")
        if self.category < 0:
            raise ValidationError(f"negative category {self.category}")
        finite = [self.position, self.size, self.shape_code, np.array([self.yaw])]
        if not all(np.all(np.isfinite(a)) for a in finite):
            raise ValidationError("non-finite object field")

    @property
    def yaw_pair(self) -> tuple[float, float]:
        return math.cos(self.yaw), math.sin(self.yaw)

    def same_as(self, other: "SceneObject") -> bool:
        return (
            self.yaw == other.yaw
            and self.category == other.category
            and np.array_equal(self.position, other.position)
            and np.array_equal(self.size, other.size)
            and np.array_equal(self.shape_code, other.shape_code)
        )


@dataclass(frozen=True, eq=False)
class Scene:
    objects: tuple[SceneObject, ...]
    room_type: str = "bedroom-toy"

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if len(self.objects) < 1:
            raise ValidationError("a scene needs at least one object")
        dims = {len(o.shape_code) for o in self.objects}
        if len(dims) != 1:
            raise ValidationError(f"inconsistent shape_code lengths {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.objects)

    @property
    def code_dim(self) -> int:
        return len(self.objects[0].shape_code)

    def validate(self, n_max: int = N_MAX, num_categories: int | None = None, code_dim: int | None = None):
        if len(self.objects) > n_max:
            raise ValidationError(f"scene has {len(self.objects)} objects, limit is {n_max}")
        for i, o in enumerate(self.objects):
            if num_categories is not None and o.category >= num_categories:
                raise ValidationError(f"object {i}: category {o.category} out of range [0, {num_categories})")
            if code_dim is not None and len(o.shape_code) != code_dim:
                raise ValidationError(f"object {i}: shape_code length {len(o.shape_code)} != {code_dim}")
        return self

    def same_as(self, other: "Scene") -> bool:
        return (
            self.room_type == other.room_type
            and len(self) == len(other)
            and all(a.same_as(b) for a, b in zip(self.objects, other.objects))
        )

    @property
    def positions(self) -> np.ndarray:
        return np.stack([o.position for o in self.objects])

    @property
    def sizes(self) -> np.ndarray:
        return np.stack([o.size for o in self.objects])

    @property
    def yaws(self) -> np.ndarray:
        return np.array([o.yaw for o in self.objects])

    @property
    def categories(self) -> np.ndarray:
        return np.array([o.category for o in self.objects], dtype=np.int64)


@dataclass(frozen=True)
class GraphLayout:
    """Column layout of node features: one-hot category | shape code | size | cos | sin."""

    num_categories: int
    code_dim: int

    @property
    def n_f(self) -> int:
        return self.num_categories + self.code_dim + 5

    @property
    def cat(self) -> slice:
        return slice(0, self.num_categories)

    @property
    def code(self) -> slice:
        k = self.num_categories
        return slice(k, k + self.code_dim)

    @property
    def size(self) -> slice:
        k = self.num_categories + self.code_dim
        return slice(k, k + 3)

    @property
    def yaw(self) -> slice:
        k = self.num_categories + self.code_dim + 3
        return slice(k, k + 2)

    @property
    def box(self) -> slice:
        """Bounding-box block b = [size, cos, sin]."""
        k = self.num_categories + self.code_dim
        return slice(k, k + 5)

    def group_columns(self, group: str) -> slice:
        return {"yaw": self.yaw, "size": self.size, "category": self.cat, "shape_code": self.code}[group]


@dataclass(frozen=True, eq=False)
class GeoSceneGraph:
    """Fully connected node view of a scene: coordinates ``x`` (N, 3) and features ``h`` (N, n_f)."""

    x: np.ndarray
    h: np.ndarray
    layout: GraphLayout
    room_type: str = "bedroom-toy"

    def __post_init__(self):
        x = _frozen(self.x)
        h = _frozen(self.h)
        if x.ndim != 2 or x.shape[1] != 3:
            raise ValidationError(f"x must be (N, 3), got {x.shape}")
        if h.shape != (x.shape[0], self.layout.n_f):
            raise ValidationError(f"h must be ({x.shape[0]}, {self.layout.n_f}), got {h.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "h", h)

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class NormalizationStats:
    """Per-dimension affine normalization of positions and sizes."""

    pos_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    pos_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    size_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    size_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in ("pos_mean", "pos_scale", "size_mean", "size_scale"):
            v = tuple(float(a) for a in getattr(self, name))
            if len(v) != 3 or not all(math.isfinite(a) for a in v):
                raise ValidationError(f"{name} must be 3 finite numbers")
            object.__setattr__(self, name, v)
        if min(self.pos_scale) <= 0 or min(self.size_scale) <= 0:
            raise ValidationError("normalization scales must be positive")

    @classmethod
    def fit(cls, scenes: Sequence[Scene], min_scale: float = 1e-3) -> "NormalizationStats":
        pos = np.concatenate([s.positions for s in scenes])
        size = np.concatenate([s.sizes for s in scenes])
        return cls(
            tuple(pos.mean(0)),
            tuple(np.maximum(pos.std(0), min_scale)),
            tuple(size.mean(0)),
            tuple(np.maximum(size.std(0), min_scale)),
        )

    def normalize_pos(self, p):
        return (np.asarray(p) - np.array(self.pos_mean)) / np.array(self.pos_scale)

    def denormalize_pos(self, p):
        return np.asarray(p) * np.array(self.pos_scale) + np.array(self.pos_mean)

    def normalize_size(self, s):
        return (np.asarray(s) - np.array(self.size_mean)) / np.array(self.size_scale)

    def denormalize_size(self, s):
        return np.asarray(s) * np.array(self.size_scale) + np.array(self.size_mean)

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("pos_mean", "pos_scale", "size_mean", "size_scale")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(**{k: tuple(v) for k, v in d.items()})


def scene_to_graph(scene: Scene, stats: NormalizationStats, num_categories: int) -> GeoSceneGraph:
    layout = GraphLayout(num_categories, scene.code_dim)
    scene.validate(n_max=len(scene), num_categories=num_categories)
    n = len(scene)
    h = np.zeros((n, layout.n_f))
    h[np.arange(n), scene.categories] = 1.0
    h[:, layout.code] = np.stack([o.shape_code for o in scene.objects])
    h[:, layout.size] = stats.normalize_size(scene.sizes)
    h[:, layout.yaw] = np.stack([o.yaw_pair for o in scene.objects])
    return GeoSceneGraph(stats.normalize_pos(scene.positions), h, layout, scene.room_type)


def graph_to_scene(g: GeoSceneGraph, stats: NormalizationStats, size_eps: float = SIZE_EPS) -> Scene:
    if not (np.all(np.isfinite(g.x)) and np.all(np.isfinite(g.h))):
        raise ValidationError("graph contains non-finite entries")
    lay = g.layout
    pos = stats.denormalize_pos(g.x)
    size = np.maximum(stats.denormalize_size(g.h[:, lay.size]), size_eps)
    cs = g.h[:, lay.yaw]
    cats = np.argmax(g.h[:, lay.cat], axis=1)
    objects = []
    for i in range(len(g)):
        c, s = cs[i]
        if c == 0.0 and s == 0.0:
            c = 1.0
        objects.append(SceneObject(pos[i], math.atan2(s, c), size[i], cats[i], g.h[i, lay.code]))
    return Scene(tuple(objects), g.room_type)


# exact quarter-turn rotations avoid cos(pi/2) ~ 6e-17 residue
_QUARTER = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}


def yaw_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotate_scene(scene: Scene, degrees: int) -> Scene:
    """Rotate positions and yaws about the vertical axis through the floor center."""
    if degrees % 360 in _QUARTER:
        c, s = _QUARTER[degrees % 360]
        R = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    else:
        R = yaw_matrix(math.radians(degrees))
    dtheta = math.radians(degrees)
    objects = [
        SceneObject(R @ o.position, o.yaw + dtheta, o.size, o.category, o.shape_code)
        for o in scene.objects
    ]
    return Scene(tuple(objects), scene.room_type)


def place_on_floor(scene: Scene) -> Scene:
    """Translate vertically so the lowest bounding-box bottom touches y = 0."""
    lift = -min(o.position[1] - o.size[1] for o in scene.objects)
    objects = [
        SceneObject(o.position + np.array([0.0, lift, 0.0]), o.yaw, o.size, o.category, o.shape_code)
        for o in scene.objects
    ]
    return Scene(tuple(objects), scene.room_type)
