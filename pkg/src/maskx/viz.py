"""PNG overlays: set-A instances in green, set-B instances in red."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .shapes import SceneRecord, SplitConfig

COLOUR_A = (0, 200, 0)
COLOUR_B = (220, 0, 0)
MASK_ALPHA = 0.45


def colour_for(category: int, split: SplitConfig) -> tuple[int, int, int]:
    return COLOUR_A if category in split.a else COLOUR_B


def overlay(scene: SceneRecord, items, split: SplitConfig, scale: int = 2) -> Image.Image:
    """``items`` are (category, mask, continuous box) triples."""
    base = scene.pixels.astype(np.float64)
    for category, mask, _ in items:
        colour = np.array(colour_for(category, split), dtype=np.float64)
        base[mask] = (1 - MASK_ALPHA) * base[mask] + MASK_ALPHA * colour
    img = Image.fromarray(np.round(base).astype(np.uint8), mode="RGB")
    img = img.resize((scene.width * scale, scene.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for category, _, box in items:
        x0, y0, x1, y1 = (v * scale for v in box)
        draw.rectangle([x0, y0, x1 - 1, y1 - 1], outline=colour_for(category, split), width=2)
    return img


def ground_truth_items(scene: SceneRecord):
    return [(i.category, i.mask, (i.box[0], i.box[1], i.box[2] + 1, i.box[3] + 1)) for i in scene.instances]


def write_overlays(scenes: list[SceneRecord], split: SplitConfig, out, detections=None) -> list[Path]:
    """One PNG per scene; predicted masks when ``detections`` are given, else ground truth."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    by_image = {}
    for d in detections or ():
        by_image.setdefault(d.image_id, []).append((d.category, d.mask, d.box))
    paths = []
    for scene in scenes:
        items = by_image.get(scene.image_id, []) if detections is not None else ground_truth_items(scene)
        path = out / f"{scene.image_id}.png"
        overlay(scene, items, split).save(path)
        paths.append(path)
    return paths
