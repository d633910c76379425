"""Backbone, RoI feature extraction, box head and mask head.

Boxes handled here are continuous ``(x0, y0, x1, y1)`` image coordinates
with pixel ``j`` spanning ``[j, j + 1)``; an inclusive integer box
``(a, b, c, d)`` corresponds to ``(a, b, c + 1, d + 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, bilinear_matrix

# largest |dw|, |dh| accepted when decoding (box may grow or shrink ~62x)
DELTA_CLIP = math.log(1000.0 / 16)

DEFAULT_STAGES = ((16, 3, 2), (32, 3, 1), (64, 3, 2), (64, 3, 1))


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple[tuple[int, int, int], ...] = DEFAULT_STAGES

    @property
    def stride(self) -> int:
        return math.prod(s for _, _, s in self.stages)

    @property
    def channels(self) -> int:
        return self.stages[-1][0]


def init_backbone(rng: np.random.Generator, config: BackboneConfig, in_channels: int = 3) -> dict[str, np.ndarray]:
    params = {}
    c_in = in_channels
    for i, (c_out, k, _) in enumerate(config.stages):
        params[f"backbone.conv{i}.w"] = ag.he_normal(rng, (c_out, c_in, k, k), c_in * k * k)
        params[f"backbone.conv{i}.b"] = np.zeros(c_out, dtype=np.float32)
        c_in = c_out
    return params


def backbone_forward(images: Tensor, params: dict[str, Tensor], config: BackboneConfig) -> Tensor:
    """(N, 3, H, W) -> (N, C_f, H / stride, W / stride)."""
    n, _, h, w = images.shape
    if h % config.stride or w % config.stride:
        raise ag.ShapeError(f"image {h}x{w} not divisible by total stride {config.stride}")
    x = images
    for i, (_, k, s) in enumerate(config.stages):
        x = ag.relu(ag.conv2d(x, params[f"backbone.conv{i}.w"], params[f"backbone.conv{i}.b"], stride=s, pad=k // 2))
    return x


def to_feature_boxes(boxes: np.ndarray, stride: int, height: int, width: int) -> np.ndarray:
    """Scale image boxes by 1/stride and clamp to the (height, width) feature map."""
    fb = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) / stride
    fb[:, [0, 2]] = np.clip(fb[:, [0, 2]], 0, width)
    fb[:, [1, 3]] = np.clip(fb[:, [1, 3]], 0, height)
    small = (fb[:, 2] - fb[:, 0] < 1) | (fb[:, 3] - fb[:, 1] < 1)
    if small.any():
        raise DegenerateBoxError(f"box {boxes[int(np.argmax(small))]} is under one feature pixel")
    return fb


def crop_resize(features: Tensor, boxes, index, size: int, stride: int) -> Tensor:
    """Bilinear RoI features, one sample per bin at bin centres: (R, C_f, size, size)."""
    _, _, h, w = features.shape
    return ag.bilinear_crop(features, to_feature_boxes(boxes, stride, h, w), index, size)


# ---------------------------------------------------------------------------
# box head


def init_box_head(rng, in_features: int, roi_dim: int, num_classes: int) -> dict[str, np.ndarray]:
    return {
        "box.trunk.w": ag.he_normal(rng, (roi_dim, in_features), in_features),
        "box.trunk.b": np.zeros(roi_dim, dtype=np.float32),
        # last column of each class row is its bias
        "box.cls": np.concatenate([ag.he_normal(rng, (num_classes + 1, roi_dim), roi_dim),
                                   np.zeros((num_classes + 1, 1), np.float32)], axis=1),
        "box.reg": np.concatenate([ag.he_normal(rng, (4 * num_classes, roi_dim), roi_dim),
                                   np.zeros((4 * num_classes, 1), np.float32)], axis=1),
    }


def with_bias_column(x: Tensor, axis: int) -> Tensor:
    """Append a constant-one slice along ``axis`` (so that weights carry a bias entry)."""
    shape = list(x.shape)
    shape[axis] = 1
    return ag.concat([x, ag.constant(np.ones(shape, dtype=x.dtype))], axis=axis)


def box_head_forward(roi_features: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Class logits (R, C+1) with background at index 0, and deltas (R, 4C)."""
    h = ag.relu(ag.linear(ag.flatten(roi_features), params["box.trunk.w"], params["box.trunk.b"]))
    h1 = with_bias_column(h, axis=1)
    logits = ag.matmul(h1, ag.transpose(params["box.cls"]))
    deltas = ag.matmul(h1, ag.transpose(params["box.reg"]))
    return logits, deltas


def _centre_size(boxes: np.ndarray):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_box(reference, target) -> np.ndarray:
    """Deltas (dx, dy, dw, dh) taking ``reference`` to ``target``."""
    cx, cy, w, h = _centre_size(np.asarray(reference, dtype=np.float64))
    tx, ty, tw, th = _centre_size(np.asarray(target, dtype=np.float64))
    return np.stack([(tx - cx) / w, (ty - cy) / h, np.log(tw / w), np.log(th / h)], axis=-1)


def decode_box(reference, deltas, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """centre' = centre + d * size, size' = size * exp(d_wh); clipped to the image if given."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if not np.all(np.isfinite(deltas)):
        raise ag.NonFiniteError("non-finite box deltas")
    cx, cy, w, h = _centre_size(np.asarray(reference, dtype=np.float64))
    dx, dy = deltas[..., 0], deltas[..., 1]
    dw = np.minimum(deltas[..., 2], DELTA_CLIP)
    dh = np.minimum(deltas[..., 3], DELTA_CLIP)
    ncx, ncy = cx + dx * w, cy + dy * h
    nw, nh = w * np.exp(dw), h * np.exp(dh)
    out = np.stack([ncx - 0.5 * nw, ncy - 0.5 * nh, ncx + 0.5 * nw, ncy + 0.5 * nh], axis=-1)
    if image_size is not None:
        height, width = image_size
        out[..., [0, 2]] = np.clip(out[..., [0, 2]], 0, width)
        out[..., [1, 3]] = np.clip(out[..., [1, 3]], 0, height)
    return out


# ---------------------------------------------------------------------------
# mask head


def init_mask_head(rng, in_channels: int, mask_dim: int, convs: int, mask_size: int,
                   mlp_hidden: int, crop: int) -> dict[str, np.ndarray]:
    params = {}
    c_in = in_channels
    for i in range(convs):
        params[f"mask.fcn{i}.w"] = ag.he_normal(rng, (mask_dim, c_in, 3, 3), c_in * 9)
        params[f"mask.fcn{i}.b"] = np.zeros(mask_dim, dtype=np.float32)
        c_in = mask_dim
    flat = in_channels * crop * crop
    params["mask.mlp1.w"] = ag.he_normal(rng, (mlp_hidden, flat), flat)
    params["mask.mlp1.b"] = np.zeros(mlp_hidden, dtype=np.float32)
    params["mask.mlp2.w"] = ag.he_normal(rng, (mask_size * mask_size, mlp_hidden), mlp_hidden)
    params["mask.mlp2.b"] = np.zeros(mask_size * mask_size, dtype=np.float32)
    return params


@dataclass
class MaskOutputs:
    fused: Tensor  # (F, K, M, M)
    fcn: Tensor  # (F, K, M, M)
    mlp: Tensor | None  # (F, 1, M, M)


def mask_head_forward(roi_features: Tensor, w_seg: Tensor, params: dict[str, Tensor],
                      convs: int, mlp: bool) -> MaskOutputs:
    """Per-class mask logits from an E-channel FCN trunk and ``w_seg`` (K, E+1).

    Channel c is ``w_seg[c, :E] . feature + w_seg[c, E]`` at every pixel.
    With ``mlp`` on, one class-agnostic MLP map is tiled over the K channels
    and added.
    """
    x = roi_features
    for i in range(convs):
        x = ag.relu(ag.conv2d(x, params[f"mask.fcn{i}.w"], params[f"mask.fcn{i}.b"], stride=1, pad=1))
    f, e, m, m2 = x.shape
    if w_seg.ndim != 2 or w_seg.shape[1] != e + 1:
        raise ag.ShapeError(f"w_seg {w_seg.shape} does not match {e}-channel mask features")
    k = w_seg.shape[0]
    feats = with_bias_column(ag.reshape(x, (f, e, m * m2)), axis=1)
    fcn = ag.reshape(ag.matmul(w_seg, feats), (f, k, m, m2))
    if not mlp:
        return MaskOutputs(fcn, fcn, None)
    hidden = ag.relu(ag.linear(ag.flatten(roi_features), params["mask.mlp1.w"], params["mask.mlp1.b"]))
    agnostic = ag.reshape(ag.linear(hidden, params["mask.mlp2.w"], params["mask.mlp2.b"]), (f, 1, m, m2))
    # a sum of two float32 values is exact in float64, so fused - fcn recovers the MLP map bitwise
    fcn = ag.cast(fcn, np.float64)
    agnostic = ag.cast(agnostic, np.float64)
    fused = ag.add(fcn, ag.tile(agnostic, axis=1, count=k))
    return MaskOutputs(fused, fcn, agnostic)


def box_pixel_range(box, image_size: tuple[int, int]) -> tuple[int, int, int, int]:
    """Inclusive pixel bounds (c0, r0, c1, r1) whose centres fall inside ``box``."""
    height, width = image_size
    x0, y0, x1, y1 = (float(v) for v in box)
    c0 = max(0, math.ceil(x0 - 0.5))
    r0 = max(0, math.ceil(y0 - 0.5))
    c1 = min(width - 1, math.ceil(x1 - 0.5) - 1)
    r1 = min(height - 1, math.ceil(y1 - 0.5) - 1)
    if c1 < c0 or r1 < r0 or x1 <= x0 or y1 <= y0:
        raise DegenerateBoxError(f"box {box} covers no pixel centre")
    return c0, r0, c1, r1


def resize_to_box(probabilities: np.ndarray, box, image_size: tuple[int, int]):
    """Bilinearly resample an (M, M) map onto the pixels covered by ``box``.

    Returns the patch and its inclusive pixel bounds.
    """
    c0, r0, c1, r1 = box_pixel_range(box, image_size)
    m_rows, m_cols = probabilities.shape
    x0, y0, x1, y1 = (float(v) for v in box)
    sx, sy = m_cols / (x1 - x0), m_rows / (y1 - y0)
    nx, ny = c1 - c0 + 1, r1 - r0 + 1
    start_x, start_y = (c0 - x0) * sx, (r0 - y0) * sy
    rx = bilinear_matrix(start_x, start_x + nx * sx, nx, m_cols)
    ry = bilinear_matrix(start_y, start_y + ny * sy, ny, m_rows)
    return ry @ probabilities @ rx.T, (c0, r0, c1, r1)


def paste_mask(logits: np.ndarray, box, image_size: tuple[int, int], threshold: float = 0.5) -> np.ndarray:
    """Full-resolution binary mask: sigmoid, resize into the box, threshold; zero outside."""
    probs = 1.0 / (1.0 + np.exp(-np.clip(np.asarray(logits, dtype=np.float64), -60, 60)))
    patch, (c0, r0, c1, r1) = resize_to_box(probs, box, image_size)
    out = np.zeros(image_size, dtype=bool)
    out[r0 : r1 + 1, c0 : c1 + 1] = patch > threshold
    return out


def crop_mask_target(mask: np.ndarray, box, size: int) -> np.ndarray:
    """Ground-truth bitmask cropped to ``box``, resized to size x size, binarised at 0.5."""
    height, width = mask.shape
    x0, y0, x1, y1 = (float(v) for v in box)
    wy = bilinear_matrix(y0, y1, size, height)
    wx = bilinear_matrix(x0, x1, size, width)
    return (wy @ mask.astype(np.float64) @ wx.T) >= 0.5
