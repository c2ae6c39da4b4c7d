"""Panoptic-segmentation ingestion.

Scenes are built from COCO-panoptic JSON plus RGB-packed id PNGs. Each
segment becomes a :class:`Region` with a binary mask, a tight inclusive
bounding box and a vocabulary index. Region ids are the 1-based order of
the segment inside ``segments_info``; the raw panoptic id is kept as
``segment_id``.
"""

from __future__ import annotations

import json
import logging
import re
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

BBox = tuple[int, int, int, int]


class IngestionError(Exception):
    """A dataset file is missing or unreadable."""


class MalformedAnnotationError(IngestionError):
    """The annotation JSON disagrees with itself or with the mask PNGs."""


class DegenerateRegionError(ValueError):
    """A mask with no set pixels."""


def normalize_name(name: str) -> str:
    return re.sub(r"\s+", " ", name.strip().lower())


@dataclass(frozen=True)
class Vocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        seen: dict[str, int] = {}
        for i, name in enumerate(self.names):
            key = normalize_name(name)
            if key in seen:
                raise ValueError(f"duplicate vocabulary name {name!r} (index {seen[key]} and {i})")
            seen[key] = i
        object.__setattr__(self, "_index", seen)

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, i: int) -> str:
        return self.names[i]

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> Optional[int]:
        """Index of ``name`` after normalization, or None."""
        return self._index.get(normalize_name(name))


def mask_to_bbox(mask: np.ndarray) -> BBox:
    """Tight inclusive (x_min, y_min, x_max, y_max) bound of a binary mask."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise DegenerateRegionError("mask has no set pixels")
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


@dataclass(frozen=True)
class Region:
    id: int
    mask: np.ndarray
    bbox: BBox
    gt_class: int
    segment_id: int = 0

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if not mask.any():
            raise DegenerateRegionError(f"region {self.id} has an empty mask")
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))

    @classmethod
    def from_mask(cls, id: int, mask: np.ndarray, gt_class: int, segment_id: int = 0) -> "Region":
        return cls(id=id, mask=mask, bbox=mask_to_bbox(mask), gt_class=gt_class, segment_id=segment_id)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class Scene:
    image: np.ndarray
    regions: tuple[Region, ...]
    source_id: str
    _png: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.uint8)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"scene {self.source_id}: expected an HxWx3 image, got {image.shape}")
        image.flags.writeable = False
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "regions", tuple(self.regions))
        ids = [r.id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise ValueError(f"scene {self.source_id}: duplicate region ids")
        for r in self.regions:
            if r.mask.shape != image.shape[:2]:
                raise ValueError(
                    f"scene {self.source_id}: region {r.id} mask {r.mask.shape} "
                    f"does not match image {image.shape[:2]}"
                )

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def region(self, region_id: int) -> Region:
        for r in self.regions:
            if r.id == region_id:
                return r
        raise KeyError(f"scene {self.source_id} has no region {region_id}")

    def png_bytes(self) -> bytes:
        """PNG encoding of the scene image, computed once."""
        if "image" not in self._png:
            from groundloop.imaging import encode_png

            self._png["image"] = encode_png(self.image)
        return self._png["image"]


# -- panoptic id packing --------------------------------------------------


def rgb2id(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb).astype(np.int64)
    return rgb[..., 0] + 256 * rgb[..., 1] + 256 * 256 * rgb[..., 2]


def id2rgb(ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.empty(ids.shape + (3,), dtype=np.uint8)
    rem = ids.copy()
    for c in range(3):
        out[..., c] = rem % 256
        rem //= 256
    return out


# -- loading ---------------------------------------------------------------


def read_subset_manifest(path: Path | str) -> list[str]:
    """Image stems listed one per line; blank lines and ``#`` comments ignored."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"subset manifest not found: {path}")
    stems = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            stems.append(Path(line).stem)
    return stems


def _read_rgb(path: Path) -> np.ndarray:
    if not path.is_file():
        raise IngestionError(f"file not found: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, zlib.error) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc


def _build_scene(ann: dict, image_info: dict, mask_dir: Path, image_dir: Path,
                 cat_to_index: dict[int, int]) -> Scene:
    png_path = mask_dir / ann["file_name"]
    ids = rgb2id(_read_rgb(png_path))
    image = _read_rgb(image_dir / image_info["file_name"])
    if image.shape[:2] != ids.shape:
        raise MalformedAnnotationError(
            f"{png_path}: mask size {ids.shape} differs from image size {image.shape[:2]}"
        )
    regions = []
    for seg in ann.get("segments_info", []):
        seg_id = int(seg["id"])
        if seg_id == 0:
            continue
        cat = int(seg["category_id"])
        if cat not in cat_to_index:
            raise MalformedAnnotationError(
                f"{png_path}: segment {seg_id} has unknown category id {cat}"
            )
        mask = ids == seg_id
        if not mask.any():
            raise MalformedAnnotationError(f"{png_path}: segment {seg_id} listed in JSON but absent from PNG")
        regions.append(Region.from_mask(len(regions) + 1, mask, cat_to_index[cat], segment_id=seg_id))
    return Scene(image=image, regions=tuple(regions), source_id=Path(image_info["file_name"]).stem)


def load_panoptic_dataset(
    annotation_file: Path | str,
    mask_dir: Path | str,
    image_dir: Path | str,
    subset_manifest: Path | str | None = None,
    workers: int = 1,
) -> tuple[list[Scene], Vocabulary]:
    """Load scenes from a COCO-panoptic annotation file.

    Args:
        annotation_file: panoptic JSON with ``images``, ``annotations`` and
            ``categories``.
        mask_dir: directory holding the id-encoded PNGs named by
            ``annotations[].file_name``.
        image_dir: directory holding the RGB images named by
            ``images[].file_name``.
        subset_manifest: optional newline-separated list of image stems;
            scenes are returned in manifest order.
        workers: per-scene decoding threads.

    Returns:
        (scenes, vocabulary), with the vocabulary in categories-table order.
    """
    annotation_file = Path(annotation_file)
    mask_dir, image_dir = Path(mask_dir), Path(image_dir)
    if not annotation_file.is_file():
        raise IngestionError(f"annotation file not found: {annotation_file}")
    try:
        data = json.loads(annotation_file.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedAnnotationError(f"{annotation_file}: invalid JSON ({exc})") from exc
    for key in ("images", "annotations", "categories"):
        if key not in data:
            raise MalformedAnnotationError(f"{annotation_file}: missing '{key}'")

    categories = data["categories"]
    vocabulary = Vocabulary(tuple(c["name"] for c in categories))
    cat_to_index = {int(c["id"]): i for i, c in enumerate(categories)}

    images = {img["id"]: img for img in data["images"]}
    by_stem: dict[str, tuple[dict, dict]] = {}
    for ann in data["annotations"]:
        info = images.get(ann["image_id"])
        if info is None:
            raise MalformedAnnotationError(
                f"{annotation_file}: annotation {ann.get('file_name')} references unknown image {ann['image_id']}"
            )
        by_stem[Path(info["file_name"]).stem] = (ann, info)
        by_stem.setdefault(Path(ann["file_name"]).stem, (ann, info))

    if subset_manifest is not None:
        stems = read_subset_manifest(subset_manifest)
        missing = [s for s in stems if s not in by_stem]
        if missing:
            raise IngestionError(f"manifest lists images absent from {annotation_file}: {missing[:5]}")
        selected = [by_stem[s] for s in stems]
    else:
        selected = [(ann, images[ann["image_id"]]) for ann in data["annotations"]]

    def build(pair):
        return _build_scene(pair[0], pair[1], mask_dir, image_dir, cat_to_index)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scenes = list(pool.map(build, selected))
    else:
        scenes = [build(p) for p in selected]
    logger.info("loaded %d scenes / %d regions from %s", len(scenes),
                sum(len(s.regions) for s in scenes), annotation_file)
    return scenes, vocabulary


# Layouts of the two benchmark splits relative to a dataset root. Each entry
# is (annotation json, mask dir, image dir, subset manifest).
PRESETS = {
    "ade20k": (
        "ade20k_panoptic_val.json",
        "ade20k_panoptic_val",
        "images/validation",
        "som_split.txt",
    ),
    "coco": (
        "annotations/panoptic_val2017.json",
        "annotations/panoptic_val2017",
        "val2017",
        "som_split.txt",
    ),
}


def load_preset(name: str, root: Path | str, workers: int = 4) -> tuple[list[Scene], Vocabulary]:
    """Load a benchmark split laid out as in :data:`PRESETS` under ``root``."""
    if name not in PRESETS:
        raise ValueError(f"unknown dataset preset {name!r}; expected one of {sorted(PRESETS)}")
    root = Path(root)
    ann, masks, imgs, manifest = PRESETS[name]
    manifest_path = root / manifest
    return load_panoptic_dataset(
        root / ann, root / masks, root / imgs,
        manifest_path if manifest_path.exists() else None,
        workers=workers,
    )


# -- synthetic scenes ------------------------------------------------------


def synthetic_vocabulary(k: int) -> Vocabulary:
    return Vocabulary(tuple(f"class {i}" for i in range(k)))


def make_synthetic_scenes(
    n_scenes: int,
    regions_per_scene: int,
    n_classes: int,
    seed: int = 0,
    cell: int = 3,
) -> tuple[list[Scene], Vocabulary]:
    """Grid-partitioned scenes with random labels, for desk-scale loop runs.

    Each region is one ``cell``x``cell`` tile of a gray image, so masks are
    disjoint and bboxes are trivial.
    """
    if regions_per_scene < 1 or n_classes < 2:
        raise ValueError("need at least one region and two classes")
    rng = np.random.default_rng(seed)
    cols = int(np.ceil(np.sqrt(regions_per_scene)))
    rows = int(np.ceil(regions_per_scene / cols))
    h, w = rows * cell, cols * cell
    scenes = []
    for s in range(n_scenes):
        image = rng.integers(40, 216, size=(h, w, 3), dtype=np.uint8)
        labels = rng.integers(0, n_classes, size=regions_per_scene)
        regions = []
        for i in range(regions_per_scene):
            r, c = divmod(i, cols)
            mask = np.zeros((h, w), dtype=bool)
            mask[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = True
            regions.append(Region.from_mask(i + 1, mask, int(labels[i]), segment_id=i + 1))
        scenes.append(Scene(image=image, regions=tuple(regions), source_id=f"synthetic_{seed}_{s:04d}"))
    return scenes, synthetic_vocabulary(n_classes)


def total_regions(scenes: Iterable[Scene]) -> int:
    return sum(len(s.regions) for s in scenes)


def check_disjoint(regions: Sequence[Region]) -> bool:
    if not regions:
        return True
    counts = np.sum([r.mask for r in regions], axis=0)
    return bool(counts.max() <= 1)
