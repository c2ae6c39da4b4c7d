"""Visual prompts rendered onto scene images: RoI crop, red ellipse marks and
Set-of-Mark overlays.

Everything here is a pure function of its arguments. Text is stamped with a
fixed 5x7 bitmap font so results do not depend on installed fonts.
"""

from __future__ import annotations

import colorsys
import hashlib
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from groundloop.dataset import BBox, Region

KINDS = ("none", "roi_crop", "visual_mark", "som", "mark_plus_crop")


@dataclass(frozen=True)
class VisualPromptSpec:
    """How an image is altered before it is sent to a model.

    ``pad`` and ``mark_thickness`` default to values derived from the region
    and image size when left as None (see :func:`default_pad` and
    :func:`default_thickness`).
    """

    kind: str = "none"
    alpha: float = 0.2
    pad: Optional[int] = None
    mark_color: tuple[int, int, int] = (255, 0, 0)
    mark_thickness: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown visual prompt kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.pad is not None and self.pad < 0:
            raise ValueError(f"pad must be non-negative, got {self.pad}")
        if self.mark_thickness is not None and self.mark_thickness < 1:
            raise ValueError(f"mark_thickness must be >= 1, got {self.mark_thickness}")
        object.__setattr__(self, "mark_color", tuple(int(c) for c in self.mark_color))


def default_pad(bbox: BBox) -> int:
    x0, y0, x1, y1 = bbox
    return int(round(0.05 * float(np.hypot(x1 - x0 + 1, y1 - y0 + 1))))


def default_thickness(shape: tuple[int, ...]) -> int:
    return max(2, int(round(0.01 * float(np.hypot(shape[0], shape[1])))))


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"))


def expand_bbox(bbox: BBox, pad: int, shape: tuple[int, ...]) -> BBox:
    h, w = shape[:2]
    x0, y0, x1, y1 = bbox
    return (max(0, x0 - pad), max(0, y0 - pad), min(w - 1, x1 + pad), min(h - 1, y1 + pad))


def roi_crop(image: np.ndarray, region: Region, pad: int = 0) -> np.ndarray:
    """Copy of the region's bbox grown by ``pad`` and clamped to the image."""
    x0, y0, x1, y1 = expand_bbox(region.bbox, pad, image.shape)
    return np.array(image[y0:y1 + 1, x0:x1 + 1], copy=True)


# -- marks -----------------------------------------------------------------


def ellipse_ring_mask(
    shape: tuple[int, ...],
    center: tuple[float, float],
    axes: tuple[float, float],
    thickness: int,
) -> np.ndarray:
    """Pixels whose centers fall between an ellipse and the ellipse shrunk by
    ``thickness`` along both axes.

    ``center`` is (x, y) and ``axes`` is (semi-x, semi-y), both in pixel
    coordinates. For a circle of radius r this is ``r - t <= d <= r``.
    """
    h, w = shape[:2]
    cx, cy = center
    a, b = axes
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs - cx
    dy = ys - cy
    outer = (dx / a) ** 2 + (dy / b) ** 2 <= 1.0
    ia, ib = a - thickness, b - thickness
    if ia <= 0 or ib <= 0:
        return outer
    inner = (dx / ia) ** 2 + (dy / ib) ** 2 < 1.0
    return outer & ~inner


def _disk(shape, center, diameter) -> np.ndarray:
    h, w = shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    return (xs - center[0]) ** 2 + (ys - center[1]) ** 2 <= (diameter / 2.0) ** 2


def mark_stroke(shape: tuple[int, ...], bbox: BBox, pad: int, thickness: int) -> np.ndarray:
    """Boolean stroke of the ellipse inscribed in ``bbox`` grown by ``pad``."""
    x0, y0, x1, y1 = bbox
    center = ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    if x0 == x1 and y0 == y1:
        return _disk(shape, center, thickness)
    a = max((x1 - x0) / 2.0 + pad, 0.5)
    b = max((y1 - y0) / 2.0 + pad, 0.5)
    return ellipse_ring_mask(shape, center, (a, b), thickness)


def draw_visual_mark(image: np.ndarray, region: Region, spec: VisualPromptSpec = VisualPromptSpec("visual_mark"),
                     bbox: Optional[BBox] = None) -> np.ndarray:
    """Stroke a red ellipse around ``region`` (or an explicit ``bbox``)."""
    bbox = region.bbox if bbox is None else bbox
    pad = default_pad(bbox) if spec.pad is None else spec.pad
    thickness = default_thickness(image.shape) if spec.mark_thickness is None else spec.mark_thickness
    stroke = mark_stroke(image.shape, bbox, pad, thickness)
    out = np.array(image, copy=True)
    out[stroke] = spec.mark_color
    return out


# -- Set-of-Mark -----------------------------------------------------------


def region_color(region_id: int) -> tuple[int, int, int]:
    """Saturated color whose hue is a hash of the region id."""
    digest = hashlib.sha256(str(int(region_id)).encode()).digest()
    hue = int.from_bytes(digest[:4], "big") / 2**32
    r, g, b = colorsys.hsv_to_rgb(hue, 1.0, 1.0)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def blend(pixels: np.ndarray, color, alpha: float) -> np.ndarray:
    out = (1.0 - alpha) * pixels.astype(np.float64) + alpha * np.asarray(color, dtype=np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


_GLYPHS = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}
_GLYPH_W, _GLYPH_H = 5, 7


def text_bitmap(text: str, scale: int = 1) -> np.ndarray:
    """Boolean raster of ``text`` (digits only) with one blank column between glyphs."""
    cols = []
    for i, ch in enumerate(text):
        if ch not in _GLYPHS:
            raise ValueError(f"no glyph for {ch!r}")
        if i:
            cols.append(np.zeros((_GLYPH_H, 1), dtype=bool))
        cols.append(np.array([[c == "1" for c in row] for row in _GLYPHS[ch]], dtype=bool))
    bitmap = np.concatenate(cols, axis=1)
    return np.kron(bitmap, np.ones((scale, scale), dtype=bool))


def label_anchor(mask: np.ndarray) -> tuple[int, int]:
    """(x, y) of the mask centroid, or of the mask pixel nearest to it when the
    rounded centroid falls outside the mask."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("empty mask")
    cy, cx = ys.mean(), xs.mean()
    ry, rx = int(round(cy)), int(round(cx))
    if 0 <= ry < mask.shape[0] and 0 <= rx < mask.shape[1] and mask[ry, rx]:
        return rx, ry
    k = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
    return int(xs[k]), int(ys[k])


@dataclass(frozen=True)
class LabelBox:
    """Placement of one stamped id: the box spans x0..x1, y0..y1 inclusive and
    may extend past the image edge (clipped when drawn)."""

    text: str
    anchor: tuple[int, int]
    x0: int
    y0: int
    x1: int
    y1: int
    scale: int

    @property
    def center(self) -> tuple[int, int]:
        return ((self.x0 + self.x1) // 2, (self.y0 + self.y1) // 2)


def label_scale(shape: tuple[int, ...]) -> int:
    return max(1, min(shape[0], shape[1]) // 160)


def layout_labels(shape: tuple[int, ...], regions: Sequence[Region], id_labels: Sequence[int]) -> list[LabelBox]:
    scale = label_scale(shape)
    boxes = []
    for region, label in zip(regions, id_labels):
        text = str(int(label))
        bw = len(text) * (_GLYPH_W + 1) * scale - scale + 2  # glyphs plus 1px outline each side
        bh = _GLYPH_H * scale + 2
        ax, ay = label_anchor(region.mask)
        # odd box sizes keep the anchor at the exact center
        bw += (bw + 1) % 2
        bh += (bh + 1) % 2
        x0, y0 = ax - bw // 2, ay - bh // 2
        boxes.append(LabelBox(text, (ax, ay), x0, y0, x0 + bw - 1, y0 + bh - 1, scale))
    return boxes


def _stamp(out: np.ndarray, box: LabelBox, fg=(255, 255, 255), bg=(0, 0, 0)) -> None:
    h, w = out.shape[:2]
    bh, bw = box.y1 - box.y0 + 1, box.x1 - box.x0 + 1
    canvas = np.zeros((bh, bw), dtype=bool)
    glyph = text_bitmap(box.text, box.scale)
    gy = (bh - glyph.shape[0]) // 2
    gx = (bw - glyph.shape[1]) // 2
    canvas[gy:gy + glyph.shape[0], gx:gx + glyph.shape[1]] = glyph
    ys0, ys1 = max(0, box.y0), min(h, box.y1 + 1)
    xs0, xs1 = max(0, box.x0), min(w, box.x1 + 1)
    if ys0 >= ys1 or xs0 >= xs1:
        return
    sub = canvas[ys0 - box.y0:ys1 - box.y0, xs0 - box.x0:xs1 - box.x0]
    patch = out[ys0:ys1, xs0:xs1]
    patch[...] = bg
    patch[sub] = fg


def render_som_overlay(image: np.ndarray, regions: Sequence[Region], alpha: float,
                       id_labels: Optional[Sequence[int]] = None) -> np.ndarray:
    """Blend each region mask with its color and stamp its numeric id.

    Blending is ``(1 - alpha) * pixel + alpha * color`` rounded to the nearest
    integer. Ids are white on a black box centered at :func:`label_anchor`.
    """
    if id_labels is None:
        id_labels = [r.id for r in regions]
    if len(id_labels) != len(regions):
        raise ValueError(f"{len(id_labels)} labels for {len(regions)} regions")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    out = np.array(image, copy=True)
    for region in regions:
        out[region.mask] = blend(image[region.mask], region_color(region.id), alpha)
    for box in layout_labels(image.shape, regions, id_labels):
        _stamp(out, box)
    return out


# -- dispatch --------------------------------------------------------------


def apply_visual_prompt(image: np.ndarray, regions: Sequence[Region], spec: VisualPromptSpec,
                        all_regions: Optional[Sequence[Region]] = None) -> np.ndarray:
    """Render ``spec`` for the target ``regions``.

    ``som`` overlays ``all_regions`` (defaults to the targets). Crops need
    exactly one target; ``mark_plus_crop`` crops first and then marks the
    region in crop coordinates.
    """
    if spec.kind == "none":
        return image
    if spec.kind == "som":
        return render_som_overlay(image, list(all_regions or regions), spec.alpha)
    if spec.kind == "visual_mark":
        out = image
        for r in regions:
            out = draw_visual_mark(out, r, spec)
        return out
    if len(regions) != 1:
        raise ValueError(f"{spec.kind} needs exactly one region, got {len(regions)}")
    region = regions[0]
    pad = default_pad(region.bbox) if spec.pad is None else spec.pad
    crop_box = expand_bbox(region.bbox, pad, image.shape)
    cropped = roi_crop(image, region, pad)
    if spec.kind == "roi_crop":
        return cropped
    x0, y0, x1, y1 = region.bbox
    local = (x0 - crop_box[0], y0 - crop_box[1], x1 - crop_box[0], y1 - crop_box[1])
    return draw_visual_mark(cropped, region, spec, bbox=local)
