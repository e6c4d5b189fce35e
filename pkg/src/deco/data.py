"""Synthetic shape scenes and COCO-format annotation I/O.

Scenes are a pure function of (seed, index): disks, squares and triangles
with per-class colors on a noisy background.  Boxes are tight around the
rendered pixels, stored normalized as (cx, cy, w, h).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .config import DataConfig

CLASS_NAMES = ("disk", "square", "triangle")

# base paint per class; instances jitter around these
_CLASS_COLORS = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.75, 0.30],
    [0.25, 0.35, 0.85],
])

_PLACEMENT_TRIES = 12
_SHRINK = 0.85


class CocoFormatError(ValueError):
    """Annotation file violates the expected COCO detection subset."""


@dataclass
class Scene:
    image: np.ndarray  # [3,H,W] float32 in [0,1]
    annotations: list  # [(class_id, np.ndarray[cx,cy,w,h] normalized)]
    index: int = 0


def _raster_mask(kind: int, cx: float, cy: float, size: float, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    half = size / 2.0
    if kind == 0:  # disk
        return (px - cx) ** 2 + (py - cy) ** 2 <= half ** 2
    if kind == 1:  # square
        return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
    # upward triangle: apex above, base below, half-plane tests on the edges
    th = size * np.sqrt(3.0) / 2.0
    ax, ay = cx, cy - th / 2.0
    bx, by = cx - half, cy + th / 2.0
    cx2, cy2 = cx + half, cy + th / 2.0

    def side(x1, y1, x2, y2):
        return (px - x1) * (y2 - y1) - (py - y1) * (x2 - x1)

    d1 = side(ax, ay, bx, by)
    d2 = side(bx, by, cx2, cy2)
    d3 = side(cx2, cy2, ax, ay)
    return (d1 >= 0) & (d2 >= 0) & (d3 >= 0)


def _boxes_iou(a: np.ndarray, b: np.ndarray) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def generate_scene(cfg: DataConfig, index: int) -> Scene:
    """Render one deterministic scene; bit-identical for equal (seed, index)."""
    rng = np.random.default_rng((cfg.seed, index))
    h = w = cfg.image_size
    base = rng.uniform(0.35, 0.65, size=3).astype(np.float64)
    img = np.broadcast_to(base[:, None, None], (3, h, w)).copy()

    count = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    placed_px = []  # xyxy pixel boxes of accepted shapes
    annotations = []
    for _ in range(count):
        kind = int(rng.integers(0, len(CLASS_NAMES)))
        size = float(rng.uniform(cfg.size_min, cfg.size_max))
        size = min(size, cfg.image_size - 2.0)
        cx = cy = None
        while True:
            for _ in range(_PLACEMENT_TRIES):
                margin = size / 2.0 + 1.0
                tx = float(rng.uniform(margin, w - margin))
                ty = float(rng.uniform(margin, h - margin))
                probe = np.array([tx - size / 2, ty - size / 2, tx + size / 2, ty + size / 2])
                if all(_boxes_iou(probe, q) <= cfg.overlap_max for q in placed_px):
                    cx, cy = tx, ty
                    break
            if cx is not None or size * _SHRINK < max(8.0, cfg.size_min * 0.5):
                break
            size *= _SHRINK
        if cx is None:  # crowded scene: accept the last candidate so counts hold
            margin = size / 2.0 + 1.0
            cx = float(rng.uniform(margin, w - margin))
            cy = float(rng.uniform(margin, h - margin))

        mask = _raster_mask(kind, cx, cy, size, h, w)
        if not mask.any():
            continue
        color = np.clip(_CLASS_COLORS[kind] + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
        img[:, mask] = color[:, None]

        ys, xs = np.nonzero(mask)
        x1, x2 = float(xs.min()), float(xs.max() + 1)
        y1, y2 = float(ys.min()), float(ys.max() + 1)
        placed_px.append(np.array([x1, y1, x2, y2]))
        box = np.array([(x1 + x2) / 2 / w, (y1 + y2) / 2 / h, (x2 - x1) / w, (y2 - y1) / h])
        annotations.append((kind, box))

    img += rng.normal(0.0, cfg.noise, size=(3, h, w))
    np.clip(img, 0.0, 1.0, out=img)
    return Scene(image=img.astype(np.float32), annotations=annotations, index=index)


def generate_dataset(cfg: DataConfig, start: int, count: int) -> list:
    return [generate_scene(cfg, i) for i in range(start, start + count)]


def scene_to_uint8(scene: Scene) -> np.ndarray:
    return np.round(scene.image * 255.0).astype(np.uint8)


def uint8_to_image(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / 255.0


def normalize_image(img: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    return (img - m) / s


def flip_scene_horizontal(image: np.ndarray, annotations: list):
    """Mirror the image about the vertical axis, carrying boxes along."""
    flipped = np.ascontiguousarray(image[:, :, ::-1])
    flipped_ann = []
    for cls, box in annotations:
        b = box.copy()
        b[0] = 1.0 - b[0]
        flipped_ann.append((cls, b))
    return flipped, flipped_ann


# --- COCO-subset annotation files -------------------------------------------

def write_coco(scenes: list, out_dir: str) -> str:
    """Write PNG images plus an ``annotations.json`` in COCO detection form."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    images = []
    annotations = []
    ann_id = 1
    for scene in scenes:
        _, h, w = scene.image.shape
        file_name = f"scene_{scene.index:06d}.png"
        arr = scene_to_uint8(scene).transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(os.path.join(img_dir, file_name))
        images.append({"id": scene.index, "width": w, "height": h, "file_name": file_name})
        for cls, box in scene.annotations:
            cx, cy, bw, bh = (float(v) for v in box)
            x = (cx - bw / 2) * w
            y = (cy - bh / 2) * h
            annotations.append({
                "id": ann_id,
                "image_id": scene.index,
                "category_id": int(cls),
                "bbox": [x, y, bw * w, bh * h],
                "area": bw * w * bh * h,
                "iscrowd": 0,
            })
            ann_id += 1
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i, "name": n} for i, n in enumerate(CLASS_NAMES)],
    }
    path = os.path.join(out_dir, "annotations.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    return path


def _require(record: dict, key: str, what: str):
    if key not in record:
        ident = record.get("id", "?")
        raise CocoFormatError(f"{what} {ident} missing key '{key}'")
    return record[key]


def read_coco(data_dir: str, load_images: bool = True) -> list:
    """Read a directory produced by write_coco back into scenes.

    Raises CocoFormatError naming the offending record on malformed input.
    """
    path = os.path.join(data_dir, "annotations.json")
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    for key in ("images", "annotations", "categories"):
        if key not in payload:
            raise CocoFormatError(f"annotation file missing top-level key '{key}'")

    by_id = {}
    for rec in payload["images"]:
        img_id = _require(rec, "id", "image")
        for key in ("width", "height", "file_name"):
            _require(rec, key, "image")
        if img_id in by_id:
            raise CocoFormatError(f"image {img_id} declared twice")
        by_id[img_id] = rec

    ann_by_image = {img_id: [] for img_id in by_id}
    for rec in payload["annotations"]:
        ann_id = _require(rec, "id", "annotation")
        img_id = _require(rec, "image_id", "annotation")
        if img_id not in by_id:
            raise CocoFormatError(f"annotation {ann_id} references unknown image {img_id}")
        bbox = _require(rec, "bbox", "annotation")
        cat = _require(rec, "category_id", "annotation")
        if len(bbox) != 4:
            raise CocoFormatError(f"annotation {ann_id} bbox must have 4 entries")
        x, y, bw, bh = (float(v) for v in bbox)
        if bw <= 0 or bh <= 0:
            raise CocoFormatError(f"annotation {ann_id} has nonpositive bbox dims")
        ann_by_image[img_id].append((int(cat), x, y, bw, bh))

    scenes = []
    for img_id in sorted(by_id):
        rec = by_id[img_id]
        w, h = rec["width"], rec["height"]
        if load_images:
            img_path = os.path.join(data_dir, "images", rec["file_name"])
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            image = uint8_to_image(arr.transpose(2, 0, 1))
        else:
            image = np.zeros((3, h, w), dtype=np.float32)
        annotations = []
        for cat, x, y, bw, bh in ann_by_image[img_id]:
            box = np.array([(x + bw / 2) / w, (y + bh / 2) / h, bw / w, bh / h])
            annotations.append((cat, box))
        scenes.append(Scene(image=image, annotations=annotations, index=img_id))
    return scenes
