"""Predicting per-class mask weights from per-class detection weights.

A single small MLP ``T`` (parameters shared across classes) maps each
class's embedding row to that class's mask weights, so classes with no
mask annotations still receive mask weights at test time.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor

SOURCES = ("cls", "box", "cls+box", "randn", "external")
ACTIVATIONS = ("relu", "leaky_relu", "none")

# final layer starts small so early predicted mask weights are near zero
FINAL_LAYER_SCALE = 0.1


class EmbeddingFileError(ValueError):
    pass


@dataclass(frozen=True)
class TransferSpec:
    source: str = "cls+box"
    layers: int = 2
    activation: str = "leaky_relu"
    leaky_slope: float = 0.01
    hidden: int = 0  # 0 selects the output width
    stop_grad: bool = True
    randn_seed: int = 0
    randn_dim: int = 0  # 0 selects the cls+box width
    embedding_file: str = ""

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown embedding source {self.source!r}")
        if not 1 <= self.layers <= 3:
            raise ValueError("transfer function must have 1 to 3 layers")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.hidden < 0 or self.randn_dim < 0:
            raise ValueError("widths must be non-negative")
        if self.activation == "leaky_relu" and not self.leaky_slope > 0:
            raise ValueError("leaky slope must be positive")
        if self.source == "external" and not self.embedding_file:
            raise ValueError("external source needs an embedding file")

    def label(self) -> str:
        return f"{self.source},{self.layers}-layer,{self.activation}"


def embedding_width(spec: TransferSpec, roi_dim: int, external: np.ndarray | None = None) -> int:
    d1 = roi_dim + 1
    if spec.source == "cls":
        return d1
    if spec.source == "box":
        return 4 * d1
    if spec.source == "cls+box":
        return 5 * d1
    if spec.source == "randn":
        return spec.randn_dim or 5 * d1
    if external is None:
        raise EmbeddingFileError("external embeddings not loaded")
    return external.shape[1]


def randn_embedding(num_classes: int, width: int, seed: int, dtype=np.float32) -> np.ndarray:
    """Fixed Gaussian vector per (class, seed)."""
    rows = [np.random.default_rng([seed, c]).standard_normal(width) for c in range(num_classes)]
    return np.stack(rows).astype(dtype)


def build_class_embedding(w_cls: Tensor, w_box: Tensor, spec: TransferSpec, num_classes: int,
                          external: np.ndarray | None = None) -> Tensor:
    """K x Din embedding for foreground classes (background row 0 of ``w_cls`` dropped).

    ``cls`` uses rows 1..C of ``w_cls``; ``box`` flattens each class's four
    regression rows of ``w_box``; ``cls+box`` concatenates the two.
    """
    if spec.source in ("cls", "box", "cls+box"):
        if w_cls.shape[0] != num_classes + 1 or w_box.shape[0] != 4 * num_classes:
            raise ag.ShapeError("detection weights do not match the class count")
        cls_part = ag.slice_axis(w_cls, 0, 1, num_classes + 1)
        box_part = ag.reshape(w_box, (num_classes, 4 * w_box.shape[1]))
        if spec.source == "cls":
            return cls_part
        if spec.source == "box":
            return box_part
        return ag.concat([cls_part, box_part], axis=1)
    if spec.source == "randn":
        width = embedding_width(spec, w_cls.shape[1] - 1)
        return ag.constant(randn_embedding(num_classes, width, spec.randn_seed, w_cls.dtype))
    if external is None:
        raise EmbeddingFileError("external embeddings not loaded")
    if external.shape[0] != num_classes:
        raise EmbeddingFileError(f"embedding file has {external.shape[0]} classes, expected {num_classes}")
    return ag.constant(external.astype(w_cls.dtype))


def layer_widths(spec: TransferSpec, din: int, dout: int) -> list[int]:
    hidden = spec.hidden or dout
    return [din] + [hidden] * (spec.layers - 1) + [dout]


def init_transfer(rng: np.random.Generator, spec: TransferSpec, din: int, dout: int) -> dict[str, np.ndarray]:
    widths = layer_widths(spec, din, dout)
    params = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        scale = FINAL_LAYER_SCALE if i == spec.layers - 1 else 1.0
        params[f"transfer.l{i}.w"] = ag.he_normal(rng, (b, a), a, scale=scale)
        params[f"transfer.l{i}.b"] = np.zeros(b, dtype=np.float32)
    return params


def _activate(x: Tensor, spec: TransferSpec) -> Tensor:
    if spec.activation == "relu":
        return ag.relu(x)
    if spec.activation == "leaky_relu":
        return ag.leaky_relu(x, spec.leaky_slope)
    return x


def transfer_forward(embedding: Tensor, params: dict[str, Tensor], spec: TransferSpec) -> Tensor:
    """Row-wise MLP: predicted mask weights (K, E+1), one row per class."""
    x = ag.stop_gradient(embedding) if spec.stop_grad else embedding
    for i in range(spec.layers):
        w = params[f"transfer.l{i}.w"]
        if x.shape[1] != w.shape[1]:
            raise ag.ShapeError(f"transfer layer {i}: input width {x.shape[1]} != {w.shape[1]}")
        x = ag.linear(x, w, params[f"transfer.l{i}.b"])
        if i < spec.layers - 1:
            x = _activate(x, spec)
    return x


def load_embedding_file(path, num_classes: int | None = None) -> np.ndarray:
    """Read ``embedding <C> <Din>`` followed by one line of Din reals per class 1..C."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise EmbeddingFileError("empty embedding file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "embedding":
        raise EmbeddingFileError("header must read 'embedding <C> <Din>'")
    count, width = int(head[1]), int(head[2])
    if num_classes is not None and count != num_classes:
        raise EmbeddingFileError(f"file declares {count} classes, expected {num_classes}")
    rows = [ln.split() for ln in lines[1:]]
    if len(rows) != count:
        raise EmbeddingFileError(f"expected {count} class rows, found {len(rows)}")
    if any(len(r) != width for r in rows):
        raise EmbeddingFileError(f"every row must have {width} values")
    return np.array(rows, dtype=np.float64)


def save_embedding_file(path, embedding: np.ndarray) -> None:
    lines = [f"embedding {embedding.shape[0]} {embedding.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in embedding]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
