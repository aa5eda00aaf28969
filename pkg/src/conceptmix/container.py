"""Array container: a JSON manifest plus one raw binary blob file.

Layout on disk (a directory):
    manifest.json   {"format", "version", "metadata", "arrays": [...]}
    data.bin        concatenated little-endian array bodies

Each manifest entry records {name, shape, dtype, offset, nbytes}. Arrays
are stored sorted by name with contiguous offsets, and the manifest is
serialized with sorted keys, so writing the same arrays and metadata twice
produces byte-identical files. Used for checkpoints and precomputed
feature sets.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_NAME = "conceptmix-container"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int32": "<i4",
    "int64": "<i8",
    "uint8": "|u1",
    "bool": "|b1",
}
_CANONICAL = {np.dtype(v): k for k, v in _DTYPES.items()}


class ContainerError(ValueError):
    """Malformed or inconsistent container on disk."""


def write_container(path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> Path:
    """Write ``arrays`` (+ JSON-serializable ``metadata``) under directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    bodies = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        key = _CANONICAL.get(np.dtype(arr.dtype.name))
        if key is None:
            raise ContainerError(f"unsupported dtype {arr.dtype} for array {name!r}")
        body = arr.astype(_DTYPES[key], copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": key,
            "offset": offset,
            "nbytes": len(body),
        })
        bodies.append(body)
        offset += len(body)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "metadata": metadata or {},
        "arrays": entries,
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    (path / "data.bin").write_bytes(b"".join(bodies))
    return path


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Load all arrays and the metadata dict from a container directory."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise ContainerError(f"no manifest.json under {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ContainerError(f"manifest.json is not valid JSON: {e}") from e
    if manifest.get("format") != FORMAT_NAME:
        raise ContainerError(f"unrecognized container format {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {manifest.get('version')!r}")
    blob = (path / "data.bin").read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        name, shape = entry["name"], tuple(entry["shape"])
        key = entry["dtype"]
        if key not in _DTYPES:
            raise ContainerError(f"array {name!r} has unsupported dtype {key!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if start < 0 or start + nbytes > len(blob):
            raise ContainerError(f"array {name!r} extends past the end of data.bin")
        dt = np.dtype(_DTYPES[key])
        count = nbytes // dt.itemsize
        if count * dt.itemsize != nbytes or count != int(np.prod(shape, dtype=np.int64)):
            raise ContainerError(f"array {name!r}: nbytes inconsistent with shape/dtype")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=start).reshape(shape)
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, manifest.get("metadata", {})


def container_names(path) -> list[str]:
    """Array names present in a container, without loading the blob."""
    manifest = json.loads((Path(path) / "manifest.json").read_text(encoding="utf-8"))
    return [entry["name"] for entry in manifest["arrays"]]
