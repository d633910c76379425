"""On-disk scene datasets.

Layout::

    <dir>/manifest          JSON: magic, version, config hash, image ids, checksums
    <dir>/images/<id>.png   8-bit RGB
    <dir>/annotations.rle   one instance per line:
                            image_id category x0 y0 x1 y1 <rle counts...>

Reading verifies the manifest and every checksum before decoding anything.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from . import rle
from .shapes import Instance, SceneRecord, derive_bbox

MAGIC = "maskx-dataset"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_dataset(records: list[SceneRecord], path, config_hash: str = "") -> dict:
    """Write ``records`` under ``path`` and return the manifest."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    checksums = {}
    lines = []
    sizes = set()
    for rec in records:
        sizes.add((rec.height, rec.width))
        data = _png_bytes(rec.pixels)
        name = f"images/{rec.image_id}.png"
        (root / name).write_bytes(data)
        checksums[name] = _sha256(data)
        for inst in rec.instances:
            if derive_bbox(inst.mask) != tuple(inst.box):
                raise DatasetFormatError(f"image {rec.image_id}: box is not the tight box of its mask")
            head = f"{rec.image_id} {inst.category} " + " ".join(str(v) for v in inst.box)
            lines.append(f"{head} {rle.to_string(rle.encode(inst.mask))}\n")
    if len(sizes) > 1:
        raise DatasetFormatError("all images in a dataset must share one size")
    ann = "".join(lines).encode("utf-8")
    (root / "annotations.rle").write_bytes(ann)
    checksums["annotations.rle"] = _sha256(ann)
    height, width = sizes.pop() if sizes else (0, 0)
    manifest = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "config_hash": config_hash,
        "height": height,
        "width": width,
        "images": [rec.image_id for rec in records],
        "checksums": checksums,
    }
    tmp = root / "manifest.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, root / "manifest")
    return manifest


def read_manifest(path) -> dict:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetFormatError(f"no manifest in {root}") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"unreadable manifest: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("magic") != MAGIC:
        raise DatasetFormatError("manifest magic string mismatch")
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {manifest.get('version')!r}")
    return manifest


def read_dataset(path) -> tuple[list[SceneRecord], dict]:
    root = Path(path)
    manifest = read_manifest(root)
    blobs = {}
    for name, digest in manifest["checksums"].items():
        try:
            data = (root / name).read_bytes()
        except FileNotFoundError:
            raise DatasetFormatError(f"missing file {name}") from None
        if _sha256(data) != digest:
            raise DatasetFormatError(f"checksum mismatch for {name}")
        blobs[name] = data

    shape = (manifest["height"], manifest["width"])
    instances: dict[int, list[Instance]] = {i: [] for i in manifest["images"]}
    for lineno, line in enumerate(blobs["annotations.rle"].decode("utf-8").splitlines(), 1):
        fields = line.split()
        if len(fields) < 7:
            raise DatasetFormatError(f"annotations line {lineno}: too few fields")
        image_id, category, x0, y0, x1, y1 = (int(v) for v in fields[:6])
        if image_id not in instances:
            raise DatasetFormatError(f"annotations line {lineno}: unknown image {image_id}")
        mask = rle.decode([int(v) for v in fields[6:]], shape)
        instances[image_id].append(Instance(category, mask, (x0, y0, x1, y1)))

    records = []
    for image_id in manifest["images"]:
        name = f"images/{image_id}.png"
        if name not in blobs:
            raise DatasetFormatError(f"manifest has no checksum for {name}")
        with Image.open(io.BytesIO(blobs[name])) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
        records.append(SceneRecord(image_id, pixels, instances[image_id]))
    return records, manifest
