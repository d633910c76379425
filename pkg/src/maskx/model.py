"""The full network: backbone, box head, mask head and the mask-weight source."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import heads
from .autograd import Tensor
from .heads import BackboneConfig, DegenerateBoxError, MaskOutputs
from .shapes import SceneRecord
from .transfer import TransferSpec, build_class_embedding, embedding_width, init_transfer, transfer_forward

HEAD_MODES = ("oracle", "class-agnostic", "transfer")

DIRECT_SEG_SCALE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 10
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    roi_dim: int = 128
    mask_dim: int = 32
    mask_size: int = 14
    box_crop: int = 7
    mask_convs: int = 2
    mlp_hidden: int = 128
    mlp_fusion: bool = False
    head_mode: str = "transfer"
    transfer: TransferSpec = field(default_factory=TransferSpec)

    def __post_init__(self):
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"unknown head mode {self.head_mode!r}")
        if self.num_classes < 1:
            raise ValueError("need at least one class")

    def digest(self) -> str:
        return hashlib.sha256(repr(asdict(self)).encode()).hexdigest()[:16]


@dataclass
class Detection:
    image_id: int
    box: tuple[float, float, float, float]
    category: int  # vocabulary id, 0-based
    score: float
    mask: np.ndarray


def jitter_boxes(rng: np.random.Generator, boxes: np.ndarray, fraction: float,
                 image_size: tuple[int, int], min_size: float = 4.0) -> np.ndarray:
    """Move each edge by U(-fraction, fraction) of the box extent, clipped to the image."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    noise = rng.uniform(-fraction, fraction, size=boxes.shape)
    out = boxes + noise * np.stack([w, h, w, h], axis=1)
    height, width = image_size
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    # keep jittered boxes usable; fall back to the reference box when squashed
    bad = (out[:, 2] - out[:, 0] < min_size) | (out[:, 3] - out[:, 1] < min_size)
    out[bad] = boxes[bad]
    return out


def gt_boxes(scene: SceneRecord) -> np.ndarray:
    """Continuous boxes of a scene's instances."""
    if not scene.instances:
        return np.zeros((0, 4))
    return np.array([(x0, y0, x1 + 1, y1 + 1) for x0, y0, x1, y1 in (i.box for i in scene.instances)], dtype=np.float64)


# fixed offset so the backbone sees roughly zero-mean input
INPUT_OFFSET = 0.5


def images_tensor(scenes: list[SceneRecord]) -> Tensor:
    batch = np.stack([s.image for s in scenes]).transpose(0, 3, 1, 2) - np.float32(INPUT_OFFSET)
    return ag.constant(np.ascontiguousarray(batch, dtype=np.float32))


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], external: np.ndarray | None = None):
        self.config = config
        self.params = {name: Tensor(value, requires_grad=True, name=name) for name, value in params.items()}
        self.external = external

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int, external: np.ndarray | None = None) -> "Model":
        rng = np.random.default_rng([seed, 7919])
        c = config
        params = heads.init_backbone(rng, c.backbone)
        channels = c.backbone.channels
        params.update(heads.init_box_head(rng, channels * c.box_crop**2, c.roi_dim, c.num_classes))
        mask = heads.init_mask_head(rng, channels, c.mask_dim, c.mask_convs, c.mask_size, c.mlp_hidden, c.mask_size)
        if not c.mlp_fusion:
            mask = {k: v for k, v in mask.items() if ".mlp" not in k}
        params.update(mask)
        out_width = c.mask_dim + 1
        if c.head_mode == "transfer":
            din = embedding_width(c.transfer, c.roi_dim, external)
            params.update(init_transfer(rng, c.transfer, din, out_width))
        else:
            rows = c.num_classes if c.head_mode == "oracle" else 1
            seg = ag.he_normal(rng, (rows, c.mask_dim), c.mask_dim, scale=DIRECT_SEG_SCALE)
            params["mask.seg"] = np.concatenate([seg, np.zeros((rows, 1), np.float32)], axis=1)
        return cls(config, params, external)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def group(self, prefixes: tuple[str, ...]) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if n.startswith(prefixes)}

    @property
    def detection_params(self) -> dict[str, Tensor]:
        return self.group(("backbone.", "box."))

    @property
    def mask_params(self) -> dict[str, Tensor]:
        return self.group(("mask.", "transfer."))

    # -- forward pieces -------------------------------------------------

    def features(self, images: Tensor) -> Tensor:
        return heads.backbone_forward(images, self.params, self.config.backbone)

    def box_outputs(self, feats: Tensor, boxes: np.ndarray, index: np.ndarray) -> tuple[Tensor, Tensor]:
        rois = heads.crop_resize(feats, boxes, index, self.config.box_crop, self.config.backbone.stride)
        return heads.box_head_forward(rois, self.params)

    def class_embedding(self) -> Tensor:
        return build_class_embedding(self.params["box.cls"], self.params["box.reg"], self.config.transfer,
                                     self.config.num_classes, self.external)

    def seg_weights(self, freeze_detection: bool = False) -> Tensor:
        """Mask weights (K, E+1) for every foreground class."""
        c = self.config
        if c.head_mode == "oracle":
            return self.params["mask.seg"]
        if c.head_mode == "class-agnostic":
            return ag.tile(self.params["mask.seg"], axis=0, count=c.num_classes)
        emb = self.class_embedding()
        if freeze_detection:
            emb = ag.stop_gradient(emb)
        return transfer_forward(emb, self.params, c.transfer)

    def mask_outputs(self, feats: Tensor, boxes: np.ndarray, index: np.ndarray, w_seg: Tensor) -> MaskOutputs:
        size = self.config.mask_size
        rois = heads.crop_resize(feats, boxes, index, size, self.config.backbone.stride)
        return heads.mask_head_forward(rois, w_seg, self.params, self.config.mask_convs, self.config.mlp_fusion)

    # -- inference ---------------------------------------------------------

    def detect(self, scenes: list[SceneRecord], seed: int, jitter: float = 0.1,
               batch_size: int = 8) -> list[Detection]:
        """One detection per ground-truth instance, from a jittered GT RoI.

        The RoI is classified, refined with the predicted class's deltas, and
        the mask is read from that class's channel.
        """
        detections = []
        w_seg = self.seg_weights()
        stride = self.config.backbone.stride
        for start in range(0, len(scenes), batch_size):
            chunk = [s for s in scenes[start : start + batch_size]]
            chunk_boxes, chunk_index = [], []
            for j, scene in enumerate(chunk):
                boxes = gt_boxes(scene)
                if len(boxes):
                    rng = np.random.default_rng([seed, scene.image_id])
                    chunk_boxes.append(jitter_boxes(rng, boxes, jitter, (scene.height, scene.width)))
                    chunk_index.append(np.full(len(boxes), j))
            if not chunk_boxes:
                continue
            rois = np.concatenate(chunk_boxes)
            index = np.concatenate(chunk_index)
            feats = self.features(images_tensor(chunk))
            logits, deltas = self.box_outputs(feats, rois, index)
            probs = softmax(logits.data.astype(np.float64))
            labels = 1 + np.argmax(probs[:, 1:], axis=1)
            scores = probs[np.arange(len(rois)), labels]
            picked = np.stack([deltas.data[r, 4 * (c - 1) : 4 * c] for r, c in enumerate(labels)])
            size = (chunk[0].height, chunk[0].width)
            refined = heads.decode_box(rois, picked, size)
            fh, fw = feats.shape[2], feats.shape[3]
            for r in range(len(refined)):
                try:
                    heads.to_feature_boxes(refined[r], stride, fh, fw)
                    heads.box_pixel_range(refined[r], size)
                except DegenerateBoxError:
                    refined[r] = rois[r]
            masks = self.mask_outputs(feats, refined, index, w_seg).fused.data
            for r in range(len(refined)):
                scene = chunk[index[r]]
                c = int(labels[r])
                mask = heads.paste_mask(masks[r, c - 1], refined[r], size)
                detections.append(Detection(scene.image_id, tuple(float(v) for v in refined[r]),
                                            c - 1, float(scores[r]), mask))
        return detections


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
