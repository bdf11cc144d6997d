"""Dataset manifests: loading, validation and multi-dataset merging.

A manifest is a JSON file of the form::

    {"name": str, "base_dir": str,
     "records": [{"image": relative-path, "split": "train"|"val"|"test",
                  "captions": [str, ...]}]}

Image paths are relative to ``base_dir`` and must exist at load time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests."""


@dataclass(frozen=True)
class ImageCaptionRecord:
    """One image with its caption list and split assignment."""

    image_uri: str
    split: str
    captions: tuple[str, ...]
    source: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"invalid split {self.split!r} (expected one of {SPLITS})")
        if len(self.captions) == 0:
            raise ManifestError(f"record {self.image_uri!r} has no captions")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    base_dir: Path
    records: tuple[ImageCaptionRecord, ...] = field(default_factory=tuple)

    @property
    def n_images(self) -> int:
        return len(self.records)

    @property
    def n_captions(self) -> int:
        return sum(len(r.captions) for r in self.records)

    def split_records(self, split: str) -> list[ImageCaptionRecord]:
        if split not in SPLITS:
            raise ManifestError(f"invalid split {split!r}")
        return [r for r in self.records if r.split == split]

    def image_path(self, record: ImageCaptionRecord) -> Path:
        return Path(self.base_dir) / record.image_uri

    def all_captions(self) -> list[str]:
        return [c for r in self.records for c in r.captions]


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a manifest file.

    Record order is preserved.  Raises ``ManifestError`` naming the record
    index for malformed records, and the offending path for image files that
    do not resolve under ``base_dir``.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc

    for key in ("name", "base_dir", "records"):
        if key not in raw:
            raise ManifestError(f"manifest {path} missing key {key!r}")

    base_dir = Path(raw["base_dir"])
    if not base_dir.is_absolute():
        base_dir = (path.parent / base_dir).resolve()

    records = []
    for i, entry in enumerate(raw["records"]):
        try:
            rec = ImageCaptionRecord(
                image_uri=entry["image"],
                split=entry["split"],
                captions=tuple(entry["captions"]),
                source=raw["name"],
            )
        except (KeyError, TypeError, ManifestError) as exc:
            raise ManifestError(f"malformed record at index {i}: {exc}") from exc
        img_path = (base_dir / rec.image_uri).resolve()
        if not str(img_path).startswith(str(base_dir.resolve())):
            raise ManifestError(f"record {i}: image path escapes base_dir: {img_path}")
        if not img_path.is_file():
            raise ManifestError(f"record {i}: image file not found: {img_path}")
        records.append(rec)

    return DatasetManifest(name=raw["name"], base_dir=base_dir, records=tuple(records))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest in the documented JSON format (base_dir stored relative
    to the manifest file when possible)."""
    path = Path(path)
    base = Path(manifest.base_dir)
    try:
        base_out = str(base.relative_to(path.parent))
    except ValueError:
        base_out = str(base)
    payload = {
        "name": manifest.name,
        "base_dir": base_out,
        "records": [
            {"image": r.image_uri, "split": r.split, "captions": list(r.captions)}
            for r in manifest.records
        ],
    }
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def merge_datasets(manifests: list[DatasetManifest], name: str) -> DatasetManifest:
    """Concatenate several manifests into one, preserving per-source splits.

    No caption deduplication is performed; record and caption counts are the
    sums of the inputs.  Each record keeps (or gains) its source dataset name.
    Duplicate (source, image_uri) pairs are rejected.
    """
    if len(manifests) == 0:
        raise ManifestError("merge_datasets needs at least one manifest")

    base = Path(manifests[0].base_dir)
    seen: dict[tuple[str, str], int] = {}
    collisions = []
    records: list[ImageCaptionRecord] = []
    for m in manifests:
        for r in m.records:
            src = r.source or m.name
            key = (src, r.image_uri)
            if key in seen:
                collisions.append(key)
            seen[key] = seen.get(key, 0) + 1
            uri = r.image_uri
            if Path(m.base_dir) != base:
                # Sources with a different base_dir keep resolvable paths by
                # going absolute (pathlib joins ignore base_dir then).
                uri = str(Path(m.base_dir) / r.image_uri)
            records.append(replace(r, source=src, image_uri=uri))
    if collisions:
        raise ManifestError(f"duplicate (source, image_uri) pairs in merge: {sorted(set(collisions))}")

    return DatasetManifest(name=name, base_dir=base, records=tuple(records))
