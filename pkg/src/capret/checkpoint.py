"""On-disk tensor container.

A container is a directory holding ``manifest.json`` and ``tensors.bin``.
The manifest lists each tensor's name, shape, dtype (``f32``/``f64``),
byte offset, and SHA-256 digest; ``tensors.bin`` is the concatenation of the
raw little-endian arrays at those offsets.  A free-form ``train_state``
mapping rides along in the manifest for optimizer counters, RNG state, and
configuration echoes.

The same container format backs both model checkpoints and retrieval-index
persistence.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(RuntimeError):
    """Raised for unreadable, corrupt, or version-mismatched containers."""


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}; only float32/float64 are stored")


def write_container(path: str | Path, tensors: dict[str, np.ndarray], train_state: dict | None = None) -> None:
    """Write ``tensors`` (name -> array) and ``train_state`` to directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        tag = _dtype_tag(a)
        raw = a.astype(_DTYPES[tag], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(a.shape),
                "dtype": tag,
                "offset": offset,
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "train_state": train_state or {},
    }
    # tensors.bin first so a manifest never refers to missing bytes
    (path / "tensors.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back as (tensors, train_state).

    Every tensor is digest-verified before anything is returned, so a corrupt
    file never yields partial state.
    """
    path = Path(path)
    manifest_path = path / "manifest.json"
    bin_path = path / "tensors.bin"
    if not manifest_path.is_file() or not bin_path.is_file():
        raise CheckpointError(f"no container at {path} (need manifest.json and tensors.bin)")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable manifest in {path}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"container format version {version!r} not supported (expected {FORMAT_VERSION})")
    blob = bin_path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"tensor {name}: unknown dtype tag {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        start = entry["offset"]
        raw = blob[start : start + size]
        if len(raw) != size:
            raise CheckpointError(f"tensor {name}: file truncated (need {size} bytes at offset {start})")
        digest = hashlib.sha256(raw).hexdigest()
        if digest != entry["sha256"]:
            raise CheckpointError(f"tensor {name}: digest mismatch (stored {entry['sha256'][:12]}…, got {digest[:12]}…)")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return tensors, manifest.get("train_state", {})
