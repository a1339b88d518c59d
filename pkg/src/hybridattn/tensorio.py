"""Raw tensor file format: little-endian IEEE-754 buffer + JSON sidecar.

A tensor named `x` under directory `dir` lives in `dir/x.bin` (flat buffer,
C order, little-endian) with sidecar `dir/x.json` holding
{"dtype": "f32"|"f64", "shape": [..]}. Groups of named tensors are described
by a `manifest.json` mapping names to arbitrary metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_LE = {"f32": "<f4", "f64": "<f8"}


def _tag(dtype: np.dtype) -> str:
    if dtype == np.float32:
        return "f32"
    if dtype == np.float64:
        return "f64"
    raise ValueError(f"unsupported dtype {dtype}")


def save_tensor(path: str | Path, name: str, array: np.ndarray) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(array)
    tag = _tag(array.dtype)
    array.astype(_LE[tag], copy=False).tofile(path / f"{name}.bin")
    with open(path / f"{name}.json", "w") as fh:
        json.dump({"dtype": tag, "shape": list(array.shape)}, fh)


def load_tensor(path: str | Path, name: str) -> np.ndarray:
    path = Path(path)
    with open(path / f"{name}.json") as fh:
        meta = json.load(fh)
    tag = meta["dtype"]
    if tag not in _LE:
        raise ValueError(f"unsupported dtype tag {tag!r}")
    flat = np.fromfile(path / f"{name}.bin", dtype=_LE[tag])
    shape = tuple(meta["shape"])
    if flat.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"buffer length {flat.size} does not match shape {shape}")
    out_dtype = np.float32 if tag == "f32" else np.float64
    return flat.reshape(shape).astype(out_dtype, copy=False)


def save_group(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Save several named tensors plus a manifest.json describing them."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, arr in tensors.items():
        save_tensor(path, name, arr)
    manifest = {"tensors": sorted(tensors), "meta": meta or {}}
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_group(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    tensors = {name: load_tensor(path, name) for name in manifest["tensors"]}
    return tensors, manifest.get("meta", {})
