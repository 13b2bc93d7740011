"""Array container: a JSON manifest next to a raw little-endian blob.

Layout for ``stem``::

    stem.json   {"format": "hqsnet-container", "version": 1, "blob": "stem.bin",
                 "arrays": [{name, dtype, shape, byte_offset, byte_length}, ...]}
    stem.bin    concatenated row-major array bytes

Supported dtype tags are ``float32``, ``uint8`` and ``complex64-as-2xfloat32``
(interleaved real/imag float32 pairs; ``shape`` is the complex shape).
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContainerError

FORMAT = "hqsnet-container"

_DTYPES = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
    "complex64-as-2xfloat32": np.dtype("<c8"),
}


def _tag_for(arr: np.ndarray) -> str:
    if np.iscomplexobj(arr):
        return "complex64-as-2xfloat32"
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return "uint8"
    if arr.dtype.kind in "iuf":
        return "float32"
    raise ContainerError(f"cannot store arrays of dtype {arr.dtype}")


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def write_container(stem, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``arrays`` to ``stem.json`` + ``stem.bin``; returns the manifest path.

    Files are written to temporaries and renamed, so a crash never leaves a
    manifest pointing at a half-written blob.
    """
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = _tag_for(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes(order="C")
        entries.append(
            {
                "name": name,
                "dtype": tag,
                "shape": list(arr.shape),
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "version": 1, "blob": blob_path.name, "arrays": entries}
    if meta:
        manifest["meta"] = meta

    tmp_blob = blob_path.with_name(blob_path.name + ".tmp")
    tmp_manifest = manifest_path.with_name(manifest_path.name + ".tmp")
    with open(tmp_blob, "wb") as fh:
        for c in chunks:
            fh.write(c)
    with open(tmp_manifest, "w") as fh:
        json.dump(manifest, fh, indent=2)
    os.replace(tmp_blob, blob_path)
    os.replace(tmp_manifest, manifest_path)
    return manifest_path


def read_manifest(stem) -> dict:
    manifest_path, _ = _paths(stem)
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise ContainerError(f"missing container manifest {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise ContainerError(f"corrupt container manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise ContainerError(f"{manifest_path} is not an {FORMAT} manifest")
    return manifest


def read_container(stem) -> dict[str, np.ndarray]:
    """Load every array of a container, checking the manifest against the blob.

    Raises ``ContainerError`` before returning anything if any entry is
    inconsistent (unknown dtype, wrong length for its shape, out-of-range
    offsets, or unaccounted blob bytes).
    """
    manifest_path, _ = _paths(stem)
    manifest = read_manifest(stem)
    blob_path = manifest_path.with_name(manifest["blob"])
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError as exc:
        raise ContainerError(f"missing container blob {blob_path}") from exc

    out: dict[str, np.ndarray] = {}
    covered = 0
    for entry in manifest["arrays"]:
        name = entry["name"]
        tag = entry["dtype"]
        if tag not in _DTYPES:
            raise ContainerError(f"{name}: unknown dtype tag {tag!r}")
        dt = _DTYPES[tag]
        shape = tuple(int(s) for s in entry["shape"])
        start, length = int(entry["byte_offset"]), int(entry["byte_length"])
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if length != expected:
            raise ContainerError(
                f"{name}: byte_length {length} does not match shape {shape} ({expected} bytes)"
            )
        if start < 0 or start + length > len(blob):
            raise ContainerError(f"{name}: byte range [{start}, {start + length}) outside blob")
        out[name] = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape)), offset=start).reshape(shape).copy()
        covered += length
    if covered != len(blob):
        raise ContainerError(f"blob has {len(blob)} bytes but manifest accounts for {covered}")
    return out


def read_meta(stem) -> dict:
    return read_manifest(stem).get("meta", {})
