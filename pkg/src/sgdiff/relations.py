"""Geometric spatial-relation rules.

For an ordered pair (object, subject) with displacement d = pos(object) - pos(subject):

* Above / Below when |d_y| exceeds ``vertical_gap`` and the axis-aligned
  floor footprints of the two boxes overlap;
* otherwise the dominant horizontal axis decides: d_x < 0 LeftOf, d_x > 0
  RightOf, d_z < 0 InFrontOf, d_z > 0 Behind, prefixed with "Closely" when the
  horizontal center distance is below ``close_dist``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .scene import Scene


class Relation(str, enum.Enum):
    LeftOf = "LeftOf"
    RightOf = "RightOf"
    InFrontOf = "InFrontOf"
    Behind = "Behind"
    Above = "Above"
    Below = "Below"
    CloselyLeftOf = "CloselyLeftOf"
    CloselyRightOf = "CloselyRightOf"
    CloselyInFrontOf = "CloselyInFrontOf"
    CloselyBehind = "CloselyBehind"

    @property
    def code(self) -> int:
        return _CODES[self]

    @property
    def is_vertical(self) -> bool:
        return self in (Relation.Above, Relation.Below)


# 0 is reserved for "no relation"
_ORDER = [
    Relation.LeftOf, Relation.RightOf, Relation.InFrontOf, Relation.Behind,
    Relation.Above, Relation.Below,
    Relation.CloselyLeftOf, Relation.CloselyRightOf, Relation.CloselyInFrontOf, Relation.CloselyBehind,
]
_CODES = {r: i + 1 for i, r in enumerate(_ORDER)}
FROM_CODE = {i + 1: r for i, r in enumerate(_ORDER)}

# relation seen from the other side of the pair, and under a 180 degree yaw turn
INVERSE = {
    Relation.LeftOf: Relation.RightOf, Relation.RightOf: Relation.LeftOf,
    Relation.InFrontOf: Relation.Behind, Relation.Behind: Relation.InFrontOf,
    Relation.Above: Relation.Below, Relation.Below: Relation.Above,
    Relation.CloselyLeftOf: Relation.CloselyRightOf, Relation.CloselyRightOf: Relation.CloselyLeftOf,
    Relation.CloselyInFrontOf: Relation.CloselyBehind, Relation.CloselyBehind: Relation.CloselyInFrontOf,
}
HALF_TURN = {r: (INVERSE[r] if not r.is_vertical else r) for r in Relation}

PHRASES = {
    Relation.LeftOf: "to the left of",
    Relation.RightOf: "to the right of",
    Relation.InFrontOf: "in front of",
    Relation.Behind: "behind",
    Relation.Above: "above",
    Relation.Below: "below",
    Relation.CloselyLeftOf: "closely to the left of",
    Relation.CloselyRightOf: "closely to the right of",
    Relation.CloselyInFrontOf: "closely in front of",
    Relation.CloselyBehind: "closely behind",
}


@dataclass(frozen=True)
class RelationRules:
    vertical_gap: float = 0.3
    close_dist: float = 1.0


@dataclass(frozen=True)
class RelationTriplet:
    """(object, relation, subject). Refs are object indices or category names."""

    object_ref: int | str
    relation: Relation
    subject_ref: int | str

    def __post_init__(self):
        object.__setattr__(self, "relation", Relation(self.relation))
        # two distinct instances may share a category name, so only index refs must differ
        if isinstance(self.object_ref, int) and self.object_ref == self.subject_ref:
            raise ValidationError(f"triplet relates object {self.object_ref} to itself")

    def as_list(self) -> list:
        return [self.object_ref, self.relation.value, self.subject_ref]


def footprint_half_extents(size: np.ndarray, yaw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Half-extents along x and z of the axis-aligned box around each yawed footprint."""
    c, s = np.abs(np.cos(yaw)), np.abs(np.sin(yaw))
    return c * size[..., 0] + s * size[..., 2], s * size[..., 0] + c * size[..., 2]


def relation_codes(pos: np.ndarray, size: np.ndarray, yaw: np.ndarray, rules: RelationRules = RelationRules()) -> np.ndarray:
    """Relation code matrix ``[..., i, j]`` of object i relative to subject j.

    Accepts arbitrary leading batch dimensions: ``pos``/``size`` are (..., N, 3)
    and ``yaw`` is (..., N). Code 0 means no relation (including i == j).
    """
    d = pos[..., :, None, :] - pos[..., None, :, :]
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    ex, ez = footprint_half_extents(size, yaw)
    overlap = (np.abs(dx) < ex[..., :, None] + ex[..., None, :]) & (np.abs(dz) < ez[..., :, None] + ez[..., None, :])
    vertical = overlap & (np.abs(dy) > rules.vertical_gap)

    along_x = np.abs(dx) >= np.abs(dz)
    horiz = np.where(
        along_x,
        np.where(dx < 0, 1, np.where(dx > 0, 2, 0)),
        np.where(dz < 0, 3, 4),
    )
    close = np.hypot(dx, dz) < rules.close_dist
    horiz = np.where((horiz > 0) & close, horiz + 6, horiz)
    codes = np.where(vertical, np.where(dy > 0, 5, 6), horiz)

    n = pos.shape[-2]
    return np.where(np.eye(n, dtype=bool), 0, codes)


def extract_relations(scene: Scene, rules: RelationRules = RelationRules()) -> list[RelationTriplet]:
    codes = relation_codes(scene.positions, scene.sizes, scene.yaws, rules)
    out = []
    for i, j in zip(*np.nonzero(codes)):
        out.append(RelationTriplet(int(i), FROM_CODE[int(codes[i, j])], int(j)))
    return out
