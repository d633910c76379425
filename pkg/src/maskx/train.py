"""Partially supervised training: box losses on every class, mask loss on set A."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from . import autograd as ag
from . import heads
from .autograd import SGD, OptimState, Tape, Tensor
from .checkpoint import Checkpoint
from .model import Model, ModelConfig, gt_boxes, images_tensor, jitter_boxes
from .shapes import SceneRecord, SplitConfig

log = logging.getLogger(__name__)

MODES = ("stagewise", "e2e")
LOSS_TERMS = ("cls", "box", "mask")
BG_MAX_IOU = 0.3
BG_TRIES = 50


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "e2e"
    steps: int = 1000
    lr: float = 0.02
    decay_steps: tuple[int, ...] = (600, 800)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    images_per_step: int = 4
    rois_per_image: int = 8
    seed: int = 0
    jitter: float = 0.1
    full_k_mask_loss: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.steps < 1 or self.images_per_step < 1 or self.rois_per_image < 2:
            raise ValueError("steps, images per step and RoIs per image must be positive")
        if list(self.decay_steps) != sorted(set(self.decay_steps)) or any(
                not 0 < s < self.steps for s in self.decay_steps):
            raise ValueError("decay steps must be strictly ascending and inside (0, steps)")

    def digest(self) -> str:
        return hashlib.sha256(repr(asdict(self)).encode()).hexdigest()[:16]

    @property
    def total_steps(self) -> int:
        return 2 * self.steps if self.mode == "stagewise" else self.steps


def lr_at(step: int, config: TrainConfig) -> float:
    """Piecewise-constant schedule; stage-wise training restarts it for stage 2."""
    local = step % config.steps
    drops = sum(1 for s in config.decay_steps if local >= s)
    return config.lr * config.decay_factor**drops


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    images: Tensor
    rois: np.ndarray  # (R, 4) continuous image boxes
    index: np.ndarray  # (R,) image within batch
    labels: np.ndarray  # (R,) 0 = background, else category + 1
    box_targets: np.ndarray  # (R, 4) deltas, zero for background
    mask_targets: np.ndarray  # (R, M, M) bool, all-False for background

    @property
    def foreground(self) -> np.ndarray:
        return self.labels > 0


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x0 = np.maximum(a[:, None, 0], b[None, :, 0])
    y0 = np.maximum(a[:, None, 1], b[None, :, 1])
    x1 = np.minimum(a[:, None, 2], b[None, :, 2])
    y1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def sample_background(rng: np.random.Generator, gts: np.ndarray, count: int,
                      image_size: tuple[int, int]) -> np.ndarray:
    height, width = image_size
    side = min(height, width)
    out = []
    for _ in range(count * BG_TRIES):
        if len(out) == count:
            break
        w, h = rng.uniform(0.1, 0.5, size=2) * side
        x0 = rng.uniform(0, width - w)
        y0 = rng.uniform(0, height - h)
        box = np.array([x0, y0, x0 + w, y0 + h])
        if len(gts) == 0 or box_iou(box, gts).max() < BG_MAX_IOU:
            out.append(box)
    return np.array(out).reshape(-1, 4)


@lru_cache(maxsize=8)
def _epoch_order(seed: int, epoch: int, size: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 17]).permutation(size)


def batch_indices(step: int, config: TrainConfig, dataset_size: int) -> list[int]:
    """Dataset indices for ``step``; a pure function of (seed, step) so resumed runs replay."""
    out = []
    for j in range(config.images_per_step):
        k = step * config.images_per_step + j
        out.append(int(_epoch_order(config.seed, k // dataset_size, dataset_size)[k % dataset_size]))
    return out


def build_batch(scenes: list[SceneRecord], config: TrainConfig, mask_size: int, step: int) -> Batch:
    rng = np.random.default_rng([config.seed, step, 29])
    rois, index, labels, deltas, targets = [], [], [], [], []
    for j, scene in enumerate(scenes):
        size = (scene.height, scene.width)
        gts = gt_boxes(scene)
        keep = min(len(gts), config.rois_per_image // 2)
        fg = jitter_boxes(rng, gts[:keep], config.jitter, size)
        bg = sample_background(rng, gts, min(keep, config.rois_per_image - keep) if keep else 1, size)
        for r, inst in enumerate(scene.instances[:keep]):
            rois.append(fg[r])
            labels.append(inst.category + 1)
            deltas.append(heads.encode_box(fg[r], gts[r]))
            targets.append(heads.crop_mask_target(inst.mask, fg[r], mask_size))
        for box in bg:
            rois.append(box)
            labels.append(0)
            deltas.append(np.zeros(4))
            targets.append(np.zeros((mask_size, mask_size), dtype=bool))
        index.extend([j] * (keep + len(bg)))
    return Batch(images_tensor(scenes), np.array(rois), np.array(index), np.array(labels),
                 np.array(deltas), np.array(targets))


# ---------------------------------------------------------------------------
# losses


def mask_supervision(labels: np.ndarray, supervised: frozenset[int], num_classes: int,
                     full_k: bool = False) -> np.ndarray:
    """(R, K) channel mask: the ground-truth channel of each RoI whose class is supervised.

    With ``full_k`` every supervised channel of such a RoI is used instead.
    """
    weight = np.zeros((len(labels), num_classes))
    sup_channels = np.array([c in supervised for c in range(num_classes)])
    for r, label in enumerate(labels):
        if label > 0 and (label - 1) in supervised:
            if full_k:
                weight[r] = sup_channels
            else:
                weight[r, label - 1] = 1
    return weight


def box_loss_inputs(labels: np.ndarray, box_targets: np.ndarray, num_classes: int):
    target = np.zeros((len(labels), 4 * num_classes))
    weight = np.zeros_like(target)
    for r, label in enumerate(labels):
        if label > 0:
            sl = slice(4 * (label - 1), 4 * label)
            target[r, sl] = box_targets[r]
            weight[r, sl] = 1
    return target, weight


def compute_losses(cls_logits: Tensor | None, deltas: Tensor | None, mask_logits: Tensor | None,
                   batch: Batch, mask_rows: np.ndarray, supervised: frozenset[int],
                   full_k: bool = False) -> dict[str, Tensor]:
    """cls over all RoIs, box on foreground RoIs' GT-class deltas, mask on supervised RoIs.

    ``mask_rows`` are the batch rows that ``mask_logits`` (F, K, M, M) was
    computed for.  Returned tensors carry ``empty`` when nothing contributed.
    """
    out = {}
    if cls_logits is not None:
        out["cls"] = ag.compute_loss("softmax_ce", cls_logits, batch.labels)
        num_classes = cls_logits.shape[1] - 1
        target, weight = box_loss_inputs(batch.labels, batch.box_targets, num_classes)
        out["box"] = ag.compute_loss("smooth_l1", deltas, target, weight)
    if mask_logits is not None:
        f, k, m, _ = mask_logits.shape
        channels = mask_supervision(batch.labels[mask_rows], supervised, k, full_k)
        weight = np.broadcast_to(channels[:, :, None, None], (f, k, m, m))
        target = np.broadcast_to(batch.mask_targets[mask_rows][:, None], (f, k, m, m))
        out["mask"] = ag.compute_loss("bce_with_logits", mask_logits, target, weight)
    else:
        zero = Tensor(np.zeros((), dtype=np.float32))
        zero.empty = True
        out["mask"] = zero
    return out


def supervised_classes(model: Model, split: SplitConfig) -> frozenset[int]:
    if model.config.head_mode == "oracle":
        return frozenset(range(model.config.num_classes))
    return split.a


# ---------------------------------------------------------------------------
# steps


def forward_losses(model: Model, batch: Batch, split: SplitConfig, terms=LOSS_TERMS,
                   freeze_detection: bool = False, full_k: bool = False) -> dict[str, Tensor]:
    """Build the losses for ``batch`` (call inside a Tape to record)."""
    supervised = supervised_classes(model, split)
    feats = model.features(batch.images)
    cls_logits = deltas = mask_logits = None
    if "cls" in terms or "box" in terms:
        cls_logits, deltas = model.box_outputs(feats, batch.rois, batch.index)
    rows = np.array([r for r, lab in enumerate(batch.labels) if lab > 0 and (lab - 1) in supervised], dtype=int)
    if "mask" in terms and len(rows):
        w_seg = model.seg_weights(freeze_detection=freeze_detection)
        mask_logits = model.mask_outputs(feats, batch.rois[rows], batch.index[rows], w_seg).fused
    return compute_losses(cls_logits, deltas, mask_logits, batch, rows, supervised, full_k)


def train_step(model: Model, optimizer: SGD, batch: Batch, split: SplitConfig, lr: float,
               terms=LOSS_TERMS, freeze_detection: bool = False, full_k: bool = False) -> dict[str, float]:
    """One recorded forward/backward/update; loss terms not in ``terms`` are left out."""
    with Tape():
        losses = forward_losses(model, batch, split, terms, freeze_detection, full_k)
        total = None
        for name in terms:
            t = losses.get(name)
            if t is None or not t.requires_grad:
                continue
            total = t if total is None else ag.add(total, t)
    if total is not None:
        optimizer.step(ag.backward(total), lr)
    return {name: float(t.data) for name, t in losses.items()}


@dataclass
class LossRow:
    step: int
    lr: float
    cls: float | None
    box: float | None
    mask: float | None

    def csv(self) -> str:
        cells = [str(self.step), repr(self.lr)] + ["" if v is None else repr(v) for v in (self.cls, self.box, self.mask)]
        return ",".join(cells)


LOSS_LOG_HEADER = "step,lr,cls_loss,box_loss,mask_loss"


def new_checkpoint(model: Model, train_config: TrainConfig) -> Checkpoint:
    return Checkpoint(params=model.arrays(), velocity={}, step=0, config_hash=train_config.digest())


def train(scenes: list[SceneRecord], split: SplitConfig, model_config: ModelConfig, config: TrainConfig,
          resume: Checkpoint | None = None, external: np.ndarray | None = None,
          stop_at: int | None = None, on_step: Callable[[LossRow], None] | None = None,
          ) -> tuple[Model, Checkpoint, list[LossRow]]:
    """Run (or resume) training and return the model, its checkpoint and the loss rows.

    ``stop_at`` halts early at that global step, leaving a resumable
    checkpoint.
    """
    if not scenes:
        raise ValueError("empty training set")
    vocab = model_config.num_classes
    used = {i.category for s in scenes for i in s.instances}
    if not split.classes == frozenset(range(vocab)) or not used <= split.classes:
        raise ValueError("dataset and split vocabularies do not match the model's class count")

    if resume is None:
        model = Model.initialize(model_config, config.seed, external)
        start, velocity = 0, {}
    else:
        if resume.config_hash != config.digest():
            raise ValueError("checkpoint was produced with a different training config")
        model = Model(model_config, resume.params, external)
        start, velocity = resume.step, {k: v.copy() for k, v in resume.velocity.items()}

    end = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    state = OptimState(config.lr, config.momentum, config.weight_decay, velocity)
    rows = []
    for step in range(start, end):
        stage2 = config.mode == "stagewise" and step >= config.steps
        if config.mode == "e2e":
            params, terms, freeze = model.params, LOSS_TERMS, False
        elif not stage2:
            params, terms, freeze = model.detection_params, ("cls", "box"), False
        else:
            params, terms, freeze = model.mask_params, ("mask",), True
        optimizer = SGD(params, state)
        lr = lr_at(step, config)
        picked = [scenes[i] for i in batch_indices(step, config, len(scenes))]
        batch = build_batch(picked, config, model_config.mask_size, step)
        values = train_step(model, optimizer, batch, split, lr, terms, freeze, config.full_k_mask_loss)
        row = LossRow(step, lr, values.get("cls") if "cls" in terms else None,
                      values.get("box") if "box" in terms else None,
                      values.get("mask") if "mask" in terms else None)
        rows.append(row)
        if on_step is not None:
            on_step(row)
        if step % 100 == 0:
            log.info("step %d lr %.4g %s", step, lr, row.csv())
    ckpt = Checkpoint(params={k: v.copy() for k, v in model.arrays().items()},
                      velocity={k: v.copy() for k, v in state.velocity.items()},
                      step=end, config_hash=config.digest())
    return model, ckpt, rows
