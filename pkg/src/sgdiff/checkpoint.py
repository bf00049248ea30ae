"""Checkpoint container: ``manifest.json`` plus a little-endian raw tensor blob.

Identical inputs give byte-identical files: tensors are written in sorted name
order and the manifest is dumped with sorted keys and no timestamps.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, ValidationError

FORMAT = "sgdiff-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def save_container(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    """Write a checkpoint directory; returns the blob's sha256."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        a = np.asarray(tensors[name])
        if a.dtype.kind == "f":
            a = a.astype("<f8")
        elif a.dtype.kind in "iub":
            a = a.astype("<i8")
        else:
            raise ValidationError(f"tensor {name}: unsupported dtype {a.dtype}")
        raw = np.ascontiguousarray(a).tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "blob_sha256": digest,
        "tensors": entries,
        "meta": dict(meta or {}),
    }
    tmp_blob, tmp_man = path / (BLOB + ".tmp"), path / (MANIFEST + ".tmp")
    tmp_blob.write_bytes(blob)
    tmp_man.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    os.replace(tmp_blob, path / BLOB)
    os.replace(tmp_man, path / MANIFEST)
    return digest


def read_manifest(path: str | Path) -> dict:
    try:
        manifest = json.loads((Path(path) / MANIFEST).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"unreadable checkpoint manifest in {path}: {e}") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format/version "
                          f"{manifest.get('format')!r}/{manifest.get('version')!r}")
    return manifest


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read and integrity-check a checkpoint; returns (tensors, meta)."""
    manifest = read_manifest(path)
    blob = (Path(path) / BLOB).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ValidationError(f"{path}: tensor blob checksum mismatch (corrupted checkpoint)")
    tensors = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, manifest["meta"]


def checkpoint_hash(path: str | Path) -> str:
    return read_manifest(path)["blob_sha256"]
