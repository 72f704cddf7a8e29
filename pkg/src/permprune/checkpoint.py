"""Versioned binary array bundles with a JSON manifest.

A bundle ``<stem>.bin`` holds a fixed header (magic, format version, array
count) followed by every array as little-endian IEEE-754 float64 in row-major
order. ``<stem>.json`` names the arrays, their shapes and byte offsets, plus
free-form metadata. Both files are written atomically and deterministically,
so save -> load -> save reproduces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PERMPRUNE-CKPT\x00\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<16sII")


class CheckpointError(ValueError):
    pass


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n").encode()


@dataclass
class Bundle:
    arrays: dict = field(default_factory=dict)  # name -> float64 ndarray, insertion order kept
    meta: dict = field(default_factory=dict)


def encode(bundle: Bundle) -> tuple[bytes, bytes]:
    chunks, entries, offset = [], [], _HEADER.size
    for name, arr in bundle.arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        if not np.all(np.isfinite(a)):
            raise CheckpointError(f"array {name!r} has non-finite entries")
        raw = a.tobytes(order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, len(entries)) + b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arrays": entries,
        "data_sha256": hashlib.sha256(body).hexdigest(),
        "meta": bundle.meta,
    }
    return body, dumps_json(manifest)


def decode(body: bytes, manifest_bytes: bytes) -> Bundle:
    try:
        manifest = json.loads(manifest_bytes)
    except (ValueError, UnicodeDecodeError) as err:
        raise CheckpointError(f"manifest is not valid JSON: {err}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"manifest format version {version!r} != supported {FORMAT_VERSION}")
    if len(body) < _HEADER.size:
        raise CheckpointError("binary file is truncated")
    magic, bin_version, count = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("binary file has the wrong magic bytes")
    if bin_version != FORMAT_VERSION:
        raise CheckpointError(f"binary format version {bin_version} != supported {FORMAT_VERSION}")
    if hashlib.sha256(body).hexdigest() != manifest.get("data_sha256"):
        raise CheckpointError("binary data does not match the manifest checksum")
    entries = manifest.get("arrays", [])
    if count != len(entries):
        raise CheckpointError(f"binary holds {count} arrays, manifest lists {len(entries)}")
    arrays = {}
    for e in entries:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        if e["nbytes"] != 8 * n or e["offset"] + e["nbytes"] > len(body):
            raise CheckpointError(f"array {e['name']!r} has inconsistent size")
        arrays[e["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"]).astype(np.float64).reshape(shape)
    return Bundle(arrays, manifest.get("meta", {}))


def save(bundle: Bundle, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    body, manifest = encode(bundle)
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    atomic_write(bin_path, body)
    atomic_write(json_path, manifest)
    return bin_path, json_path


def load(stem) -> Bundle:
    stem = Path(stem)
    if stem.suffix in (".bin", ".json"):
        stem = stem.with_suffix("")
    try:
        body = stem.with_suffix(".bin").read_bytes()
        manifest = stem.with_suffix(".json").read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {stem}: {err}") from None
    return decode(body, manifest)


# -- training checkpoints --------------------------------------------------


def training_checkpoint(params: dict, perms: dict, cfg) -> Bundle:
    """Cost matrices plus resolved permutations, pattern and config."""
    meta = {
        "kind": "cost_checkpoint",
        "pattern": str(cfg.pattern),
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "perms": {k: [int(i) for i in v] for k, v in sorted(perms.items())},
    }
    return Bundle({k: params[k] for k in sorted(params)}, meta)
