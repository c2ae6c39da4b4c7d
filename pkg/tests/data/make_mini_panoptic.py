"""Regenerates the 3-scene panoptic fixture in ``mini_panoptic/``.

Layouts are listed as inclusive (x0, y0, x1, y1) rectangles painted in order,
so later rectangles overwrite earlier ones.
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image

HERE = Path(__file__).parent / "mini_panoptic"

CATEGORIES = [
    {"id": 1, "name": "wall", "isthing": 0},
    {"id": 3, "name": "floor", "isthing": 0},
    {"id": 7, "name": "person", "isthing": 1},
    {"id": 12, "name": "sky", "isthing": 0},
]

# scene stem -> (height, width, [(segment id, category id, [rects])])
SCENES = {
    "scene_a": (6, 8, [
        (5, 1, [(0, 0, 7, 2)]),
        (300, 3, [(0, 3, 3, 5)]),
        (70000, 7, [(4, 3, 7, 5)]),
    ]),
    "scene_b": (7, 9, [
        (1193046, 12, [(0, 0, 8, 1)]),
        (42, 7, [(2, 3, 3, 6), (2, 6, 6, 6)]),  # L shape
        (9, 3, [(6, 2, 8, 4)]),
    ]),
    "scene_c": (5, 5, [
        (2, 1, [(1, 1, 3, 3)]),
        (3, 12, [(4, 0, 4, 0)]),  # single pixel
    ]),
}


def id2rgb(i):
    return [i % 256, (i // 256) % 256, (i // 65536) % 256]


def main():
    (HERE / "panoptic").mkdir(parents=True, exist_ok=True)
    (HERE / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    rng = np.random.default_rng(0)
    for k, (stem, (h, w, segs)) in enumerate(SCENES.items()):
        pan = np.zeros((h, w, 3), dtype=np.uint8)
        info = []
        for seg_id, cat, rects in segs:
            for x0, y0, x1, y1 in rects:
                pan[y0:y1 + 1, x0:x1 + 1] = id2rgb(seg_id)
            info.append({"id": seg_id, "category_id": cat})
        # a void entry that must be ignored
        info.append({"id": 0, "category_id": 1})
        Image.fromarray(pan).save(HERE / "panoptic" / f"{stem}.png")
        Image.fromarray(rng.integers(0, 256, (h, w, 3), dtype=np.uint8)).save(HERE / "images" / f"{stem}.png")
        images.append({"id": k + 1, "file_name": f"{stem}.png", "height": h, "width": w})
        annotations.append({"image_id": k + 1, "file_name": f"{stem}.png", "segments_info": info})
    data = {"images": images, "annotations": annotations, "categories": CATEGORIES}
    (HERE / "panoptic.json").write_text(json.dumps(data, indent=1))
    (HERE / "subset.txt").write_text("# two of three\nscene_c\nscene_a\n")


if __name__ == "__main__":
    main()
