"""Deterministic synthetic scene/caption generator.

Stands in for aerial-imagery captioning data so every test and demo run is
self-contained.  Each image is a procedurally textured background for one
scene class with a few colored geometric objects on top; captions are five
paraphrase templates mentioning the scene class, object count and object
color.  Identical (n_images, seed) produce byte-identical files.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from capret.data.manifest import DatasetManifest, ImageCaptionRecord, save_manifest

RENDER_SIZE = 256

SCENE_CLASSES = ("water", "forest", "buildings", "tanks", "runway")
OBJECT_COLORS = ("red", "yellow", "white", "purple", "orange")
OBJECT_COUNTS = (1, 2, 3, 4)

_COLOR_RGB = {
    "red": (220, 40, 40),
    "yellow": (235, 220, 50),
    "white": (245, 245, 245),
    "purple": (160, 60, 200),
    "orange": (240, 140, 30),
}

_BACKGROUND_RGB = {
    "water": (28, 78, 158),
    "forest": (30, 108, 44),
    "buildings": (120, 120, 126),
    "tanks": (150, 122, 82),
    "runway": (70, 70, 76),
}

_COUNT_WORD = {1: "one", 2: "two", 3: "three", 4: "four"}

_CAPTION_TEMPLATES = (
    "a {cls} scene with {count} {color} objects",
    "{count} {color} objects over a {cls} area",
    "there are {count} {color} objects in this {cls} scene",
    "an aerial view of {cls} with {count} {color} objects",
    "the {cls} area contains {count} {color} objects",
)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int
    scene_class: str
    object_count: int
    object_color: str

    def captions(self) -> tuple[str, ...]:
        words = {
            "cls": self.scene_class,
            "count": _COUNT_WORD[self.object_count],
            "color": self.object_color,
        }
        return tuple(t.format(**words) for t in _CAPTION_TEMPLATES)


def _background(scene_class: str, rng: np.random.Generator) -> np.ndarray:
    h = w = RENDER_SIZE
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = _BACKGROUND_RGB[scene_class]

    if scene_class == "water":
        ripple = 18.0 * np.sin(np.arange(h)[:, None] / 9.0 + rng.uniform(0, 6.28))
        img += ripple[..., None] * np.array([0.3, 0.6, 1.0])
    elif scene_class == "forest":
        blobs = rng.uniform(-1, 1, size=(16, 16))
        blobs = np.kron(blobs, np.ones((16, 16)))
        img[..., 1] += 30.0 * blobs
        img[..., 0] += 8.0 * blobs
    elif scene_class == "buildings":
        step = 32
        img[::step, :, :] -= 45.0
        img[:, ::step, :] -= 45.0
    elif scene_class == "tanks":
        speckle = rng.uniform(-1, 1, size=(h, w))
        img += 12.0 * speckle[..., None]
    elif scene_class == "runway":
        x0 = w // 2 - 28
        img[:, x0 : x0 + 56, :] += 40.0
        img[::24, w // 2 - 2 : w // 2 + 2, :] = 225.0

    img += rng.uniform(-8, 8, size=(h, w, 3))
    return img


def _draw_objects(img: np.ndarray, spec: SyntheticSceneSpec, rng: np.random.Generator) -> None:
    color = np.array(_COLOR_RGB[spec.object_color], dtype=np.float64)
    square = spec.scene_class in ("buildings", "runway")
    yy, xx = np.mgrid[0:RENDER_SIZE, 0:RENDER_SIZE]

    # One object per cell of a coarse grid keeps objects non-overlapping so
    # the count stays visually unambiguous.
    cells = rng.permutation(16)[: spec.object_count]
    for cell in cells:
        cy = 32 + 64 * (int(cell) // 4) + rng.integers(-12, 13)
        cx = 32 + 64 * (int(cell) % 4) + rng.integers(-12, 13)
        r = int(rng.integers(12, 19))
        if square:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[mask] = color


def render_scene(spec: SyntheticSceneSpec) -> np.ndarray:
    """Render one scene as an RGB uint8 array (RENDER_SIZE square)."""
    rng = np.random.default_rng(spec.seed)
    img = _background(spec.scene_class, rng)
    _draw_objects(img, spec, rng)
    return np.clip(img, 0, 255).astype(np.uint8)


def _split_sizes(n: int) -> tuple[int, int, int]:
    n_val = int(round(0.1 * n))
    n_test = int(round(0.1 * n))
    return n - n_val - n_test, n_val, n_test


def scene_specs(n_images: int, seed: int) -> list[SyntheticSceneSpec]:
    """Deterministic attribute assignment: the full class/count/color product
    is shuffled once, then cycled, so small sets get distinct attribute
    triples."""
    combos = list(itertools.product(SCENE_CLASSES, OBJECT_COUNTS, OBJECT_COLORS))
    order = np.random.default_rng(seed).permutation(len(combos))
    specs = []
    for i in range(n_images):
        cls, count, color = combos[order[i % len(combos)]]
        specs.append(
            SyntheticSceneSpec(
                seed=int(np.random.default_rng((seed, i)).integers(0, 2**31 - 1)),
                scene_class=cls,
                object_count=count,
                object_color=color,
            )
        )
    return specs


def generate_synthetic_dataset(n_images: int, seed: int, out_dir: str | Path) -> DatasetManifest:
    """Write n_images rendered PNGs plus a manifest under out_dir.

    Split assignment is 80/10/10 over the (already attribute-shuffled)
    generation order.  Rerunning with the same arguments reproduces every
    file byte for byte.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    n_train, n_val, _ = _split_sizes(n_images)
    records = []
    for i, spec in enumerate(scene_specs(n_images, seed)):
        uri = f"images/img_{i:04d}.png"
        Image.fromarray(render_scene(spec), mode="RGB").save(out_dir / uri)
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        records.append(
            ImageCaptionRecord(image_uri=uri, split=split, captions=spec.captions(), source="synthetic")
        )

    manifest = DatasetManifest(name="synthetic", base_dir=out_dir.resolve(), records=tuple(records))
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
