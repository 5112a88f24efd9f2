"""Checkpoint serialization: a JSON manifest plus a raw binary sidecar.

The manifest lists every array by name with shape, dtype, byte offset and
length; the sidecar is the concatenation of the arrays' little-endian bytes
in manifest order. Loaders validate the format version and the sidecar
checksum before reconstructing anything.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int32": "<i4",
    "int64": "<i8",
}


def save_arrays(
    prefix: str | Path,
    kind: str,
    arrays: list[tuple[str, np.ndarray]],
    meta: dict | None = None,
    config_hash: str = "",
) -> tuple[Path, Path]:
    """Write ``<prefix>.json`` and ``<prefix>.bin``; returns both paths."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays:
        dname = arr.dtype.name
        if dname not in _DTYPES:
            raise ValueError(f"unsupported dtype {dname} for array '{name}'")
        raw = np.ascontiguousarray(arr).astype(_DTYPES[dname], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dname,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config_hash": config_hash,
        "meta": meta or {},
        "bin_file": prefix.name + ".bin",
        "bin_sha256": hashlib.sha256(blob).hexdigest(),
        "arrays": entries,
    }
    json_path = prefix.with_name(prefix.name + ".json")
    bin_path = prefix.with_name(prefix.name + ".bin")
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    bin_path.write_bytes(blob)
    return json_path, bin_path


def load_arrays(json_path: str | Path) -> tuple[str, dict[str, np.ndarray], dict]:
    """Read a manifest + sidecar pair; returns (kind, name->array, meta)."""
    json_path = Path(json_path)
    manifest = json.loads(json_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version: {version!r}")
    blob = (json_path.parent / manifest["bin_file"]).read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["bin_sha256"]:
        raise ValueError("checkpoint sidecar checksum mismatch")
    out: dict[str, np.ndarray] = {}
    for ent in manifest["arrays"]:
        dname = ent["dtype"]
        if dname not in _DTYPES:
            raise ValueError(f"unsupported dtype {dname} in manifest")
        start, n = ent["offset"], ent["nbytes"]
        arr = np.frombuffer(blob[start : start + n], dtype=_DTYPES[dname])
        out[ent["name"]] = arr.reshape(ent["shape"]).astype(dname, copy=True)
    return manifest["kind"], out, manifest.get("meta", {})
