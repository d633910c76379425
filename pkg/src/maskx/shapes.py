"""Procedural scenes of filled shapes with exact instance masks.

Coordinates: x is the column, y the row.  Pixel (row r, col c) has its
centre at (c + 0.5, r + 0.5); boxes are inclusive integer pixel bounds
``(x0, y0, x1, y1)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

SHAPE_KINDS = ("disk", "square", "triangle", "star", "annulus")
FILLS = ("solid", "striped")

MAX_ATTEMPTS = 1000
STRIPE_PERIOD = 6.0
STRIPE_GAP_SHADE = 0.55
ANNULUS_INNER = 0.5
STAR_INNER = 0.45


class InfeasibleConfigError(RuntimeError):
    pass


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class Category:
    kind: str
    fill: str

    @property
    def name(self) -> str:
        return f"{self.fill}-{self.kind}"


def default_vocabulary() -> tuple[Category, ...]:
    # kind-major so that any prefix split mixes fills and shapes
    return tuple(Category(k, f) for k in SHAPE_KINDS for f in FILLS)


@dataclass(frozen=True)
class GenConfig:
    height: int = 128
    width: int = 128
    vocabulary: tuple[Category, ...] = field(default_factory=default_vocabulary)
    min_instances: int = 1
    max_instances: int = 4
    min_size: float = 0.15
    max_size: float = 0.45
    max_overlap: float = 0.2
    noise: float = 0.05

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("canvas must be at least 8x8")
        if not self.vocabulary:
            raise ValueError("vocabulary must be non-empty")
        for cat in self.vocabulary:
            if cat.kind not in SHAPE_KINDS or cat.fill not in FILLS:
                raise ValueError(f"unknown category {cat}")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ValueError("instance range must be non-empty")
        if not 0 < self.min_size <= self.max_size <= 1:
            raise ValueError("size range must be non-empty within (0, 1]")
        if not 0 <= self.max_overlap < 1:
            raise ValueError("overlap cap must lie in [0, 1)")
        if self.noise < 0:
            raise ValueError("noise amplitude must be non-negative")

    @property
    def num_classes(self) -> int:
        return len(self.vocabulary)

    def digest(self) -> str:
        text = repr((self.height, self.width, [(c.kind, c.fill) for c in self.vocabulary],
                     self.min_instances, self.max_instances, self.min_size, self.max_size,
                     self.max_overlap, self.noise))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass(eq=False)
class Instance:
    category: int
    mask: np.ndarray
    box: tuple[int, int, int, int]

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.category == other.category and self.box == other.box
                and np.array_equal(self.mask, other.mask))


@dataclass(eq=False)
class SceneRecord:
    image_id: int
    pixels: np.ndarray  # (H, W, 3) uint8
    instances: list[Instance]

    @property
    def image(self) -> np.ndarray:
        """(H, W, 3) float32 in [0, 1]."""
        return self.pixels.astype(np.float32) / np.float32(255)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (self.image_id == other.image_id and np.array_equal(self.pixels, other.pixels)
                and self.instances == other.instances)


@dataclass(frozen=True)
class SplitConfig:
    a: frozenset[int]
    b: frozenset[int]
    mode: str = "fixed"
    seed: int = 0

    def __post_init__(self):
        if not self.a:
            raise ValueError("set A must be non-empty")
        if self.a & self.b:
            raise ValueError("sets A and B must be disjoint")

    @property
    def classes(self) -> frozenset[int]:
        return self.a | self.b

    def digest(self) -> str:
        text = f"A={sorted(self.a)};B={sorted(self.b)}"
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def derive_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight inclusive (min col, min row, max col, max row) of set pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise EmptyMaskError("cannot derive a box from an empty mask")
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


def split_classes(num_classes: int, size_a: int, mode: str = "fixed", seed: int = 0) -> SplitConfig:
    """Partition class ids ``0..num_classes-1`` into mask-annotated A and box-only B.

    ``fixed`` takes the first ``size_a`` ids; ``random`` draws them with a
    generator seeded by ``seed``.
    """
    if not 1 <= size_a < num_classes:
        raise ValueError(f"|A| must lie in [1, {num_classes - 1}], got {size_a}")
    ids = np.arange(num_classes)
    if mode == "fixed":
        a = ids[:size_a]
    elif mode == "random":
        a = np.random.default_rng(seed).permutation(ids)[:size_a]
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    a_set = frozenset(int(i) for i in a)
    return SplitConfig(a_set, frozenset(int(i) for i in ids) - a_set, mode, seed)


# ---------------------------------------------------------------------------
# rasterisation


def _pixel_centres(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width]
    return xs + 0.5, ys + 0.5


def _inside_polygon(xs: np.ndarray, ys: np.ndarray, verts: np.ndarray) -> np.ndarray:
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        xi, yi = verts[i]
        xj, yj = verts[(i + 1) % n]
        crosses = (yi > ys) != (yj > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (xj - xi) * (ys - yi) / (yj - yi) + xi
        inside ^= crosses & (xs < x_at)
    return inside


def _regular_vertices(cx, cy, radii, angle) -> np.ndarray:
    n = len(radii)
    theta = angle + np.arange(n) * (2 * np.pi / n)
    return np.stack([cx + radii * np.cos(theta), cy + radii * np.sin(theta)], axis=1)


def rasterize_shape(kind: str, cx: float, cy: float, radius: float, angle: float,
                    height: int, width: int) -> np.ndarray:
    """Hard (un-antialiased) mask of a shape inscribed in the circle (cx, cy, radius)."""
    xs, ys = _pixel_centres(height, width)
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    if kind == "disk":
        return d2 <= radius**2
    if kind == "annulus":
        return (d2 <= radius**2) & (d2 >= (ANNULUS_INNER * radius) ** 2)
    if kind == "square":
        verts = _regular_vertices(cx, cy, np.full(4, radius), angle + np.pi / 4)
    elif kind == "triangle":
        verts = _regular_vertices(cx, cy, np.full(3, radius), angle - np.pi / 2)
    elif kind == "star":
        radii = np.tile([radius, STAR_INNER * radius], 5)
        verts = _regular_vertices(cx, cy, radii, angle - np.pi / 2)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return _inside_polygon(xs, ys, verts)


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    c0, c1 = rng.uniform(0.0, 0.75, size=(2, 3))
    phi = rng.uniform(0, 2 * np.pi)
    xs, ys = _pixel_centres(height, width)
    proj = xs * math.cos(phi) + ys * math.sin(phi)
    t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    return c0 * (1 - t[..., None]) + c1 * t[..., None]


def _object_colour(rng: np.random.Generator, local_bg: np.ndarray) -> np.ndarray:
    colour = rng.uniform(0.0, 1.0, size=3)
    for _ in range(100):
        if np.abs(colour - local_bg).mean() >= 0.25:
            break
        colour = rng.uniform(0.0, 1.0, size=3)
    return colour


def _stripes(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    psi = rng.uniform(0, np.pi)
    xs, ys = _pixel_centres(height, width)
    proj = xs * math.cos(psi) + ys * math.sin(psi)
    return np.floor(proj / (STRIPE_PERIOD / 2)).astype(np.int64) % 2 == 1


def generate_scene(seed: int, config: GenConfig, image_id: int = 0) -> SceneRecord:
    """Deterministic scene for ``(seed, config)``.

    Instances are placed by rejection sampling so that every pair of
    analytic masks satisfies intersection / min-area <= ``max_overlap``.
    Later instances occlude earlier ones; stored masks are the visible
    pixels and boxes are derived from them.
    """
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    count = int(rng.integers(config.min_instances, config.max_instances + 1))
    side = min(h, w)

    placed: list[tuple[int, np.ndarray]] = []
    visibles: list[np.ndarray] = []
    attempts = 0
    while len(placed) < count:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise InfeasibleConfigError(
                f"could not place {count} instances within {MAX_ATTEMPTS} attempts")
        category = int(rng.integers(config.num_classes))
        radius = 0.5 * side * rng.uniform(config.min_size, config.max_size)
        cx = rng.uniform(radius, w - radius)
        cy = rng.uniform(radius, h - radius)
        angle = rng.uniform(0, 2 * np.pi)
        mask = rasterize_shape(config.vocabulary[category].kind, cx, cy, radius, angle, h, w)
        area = mask.sum()
        if area == 0:
            continue
        ok = all((mask & other).sum() <= config.max_overlap * min(area, other.sum())
                 for _, other in placed)
        # occlusion must leave every earlier instance visible
        if ok and all((visible & ~mask).any() for visible in visibles):
            visibles = [visible & ~mask for visible in visibles] + [mask]
            placed.append((category, mask))

    image = _background(rng, h, w)
    for category, mask in placed:
        rows, cols = np.nonzero(mask)
        local = image[rows, cols].mean(axis=0)
        colour = _object_colour(rng, local)
        if config.vocabulary[category].fill == "striped":
            gap = _stripes(rng, h, w) & mask
            image[mask] = colour
            image[gap] = STRIPE_GAP_SHADE * colour
        else:
            image[mask] = colour
    image = image + rng.uniform(-config.noise, config.noise, size=image.shape)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)

    instances = [Instance(category, visible, derive_bbox(visible))
                 for (category, _), visible in zip(placed, visibles)]
    return SceneRecord(image_id, pixels, instances)


def scene_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, np.uint64)[0])


def generate_dataset(base_seed: int, count: int, config: GenConfig, start_id: int = 0) -> list[SceneRecord]:
    """Scenes ``start_id .. start_id+count-1``; each id has its own seed, so ranges never overlap."""
    ids = range(start_id, start_id + count)
    return [generate_scene(scene_seed(base_seed, i), config, image_id=i) for i in ids]


def dataset_hash(records: list[SceneRecord]) -> str:
    h = hashlib.sha256()
    for rec in records:
        h.update(f"{rec.image_id}:{rec.pixels.shape}".encode())
        h.update(rec.pixels.tobytes())
        for inst in rec.instances:
            h.update(f"{inst.category}:{inst.box}".encode())
            h.update(np.packbits(inst.mask).tobytes())
    return h.hexdigest()[:16]
