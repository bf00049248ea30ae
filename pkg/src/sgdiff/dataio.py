"""JSON-Lines scene datasets.

One record per line::

    {"v": 1, "room": str,
     "objects": [{"pos": [x, y, z], "yaw": a, "size": [sx, sy, sz], "cat": c, "code": [...]}],
     "prompt": str, "triplets": [[object, relation, subject], ...]}
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import ValidationError
from .relations import RelationTriplet
from .scene import Scene, SceneObject

SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class Record:
    scene: Scene
    prompt: str = ""
    triplets: tuple[RelationTriplet, ...] = field(default_factory=tuple)

    def same_as(self, other: "Record") -> bool:
        return self.scene.same_as(other.scene) and self.prompt == other.prompt and self.triplets == other.triplets


def record_to_dict(rec: Record) -> dict:
    return {
        "v": SCHEMA_VERSION,
        "room": rec.scene.room_type,
        "objects": [
            {
                "pos": o.position.tolist(),
                "yaw": o.yaw,
                "size": o.size.tolist(),
                "cat": o.category,
                "code": o.shape_code.tolist(),
            }
            for o in rec.scene.objects
        ],
        "prompt": rec.prompt,
        "triplets": [t.as_list() for t in rec.triplets],
    }


def record_from_dict(d: dict) -> Record:
    if d.get("v") != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema version {d.get('v')!r} (expected {SCHEMA_VERSION})")
    objects = tuple(
        SceneObject(o["pos"], o["yaw"], o["size"], o["cat"], o["code"]) for o in d["objects"]
    )
    triplets = tuple(RelationTriplet(a, r, b) for a, r, b in d.get("triplets", []))
    return Record(Scene(objects, d["room"]), d.get("prompt", ""), triplets)


def dumps(rec: Record) -> str:
    return json.dumps(record_to_dict(rec), separators=(",", ":"))


def save_dataset(path: str | Path, records: Iterable[Record]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")


def load_dataset(path: str | Path) -> list[Record]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(record_from_dict(json.loads(line)))
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}: line {lineno}: malformed JSON ({e.msg})") from None
            except ValidationError as e:
                raise ValidationError(f"{path}: line {lineno}: {e}") from None
            except (KeyError, TypeError, ValueError) as e:
                raise ValidationError(f"{path}: line {lineno}: bad record ({e!r})") from None
    return out
