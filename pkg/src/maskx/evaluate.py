"""Mask AP (COCO-style, 101-point) split into class sets A and B, plus ablation tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import Detection
from .shapes import SceneRecord, SplitConfig

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100

REPORT_COLUMNS = ("label", "split_hash", "AP_A", "AP_B", "rel_change_B", "trials", "std_AP_B")
CLASS_COLUMNS = ("label", "class_id", "AP")


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def iou_matrix(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    if not len(preds) or not len(gts):
        return np.zeros((len(preds), len(gts)))
    p = np.stack([np.asarray(m, bool).ravel() for m in preds]).astype(np.float64)
    g = np.stack([np.asarray(m, bool).ravel() for m in gts]).astype(np.float64)
    if p.shape[1] != g.shape[1]:
        raise ValueError("mask shapes differ")
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def greedy_match(ious: np.ndarray, order: np.ndarray, threshold: float) -> np.ndarray:
    """True-positive flags for predictions visited in ``order``.

    Each prediction takes the unmatched GT of highest IoU >= threshold;
    ``argmax`` resolves ties to the lower GT index.
    """
    taken = np.zeros(ious.shape[1], dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for rank, p in enumerate(order):
        if not ious.shape[1]:
            break
        cand = np.where(taken | (ious[p] < threshold), -1.0, ious[p])
        g = int(np.argmax(cand))
        if cand[g] >= 0:
            taken[g] = True
            tp[rank] = True
    return tp


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from TP flags in descending-score order."""
    if num_gt == 0:
        return math.nan
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # envelope: precision at r is the max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    values = np.where(idx < len(tp), envelope[np.minimum(idx, len(tp) - 1)], 0.0)
    return float(values.mean())


def score_order(scores: Sequence[float]) -> np.ndarray:
    # stable sort keeps insertion order among equal scores
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def ap_single(predictions: Sequence[tuple[float, np.ndarray]], gts: Sequence[np.ndarray],
              threshold: float) -> float:
    """AP for one class over one group of masks; NaN when there is no GT."""
    scores = [s for s, _ in predictions]
    order = score_order(scores)
    ious = iou_matrix([m for _, m in predictions], gts)
    return interpolated_ap(greedy_match(ious, order, threshold), len(gts))


@dataclass
class EvalReport:
    class_ap: dict[int, dict[float, float]]  # class -> threshold -> AP
    split: SplitConfig
    num_images: int = 0
    num_gt: int = 0
    num_predictions: int = 0
    per_class: dict[int, float] = field(init=False)

    def __post_init__(self):
        self.per_class = {c: float(np.mean(list(v.values()))) for c, v in self.class_ap.items()
                          if not any(math.isnan(x) for x in v.values())}

    def set_ap(self, classes: Iterable[int]) -> float:
        vals = [self.per_class[c] for c in sorted(classes) if c in self.per_class]
        return float(np.mean(vals)) if vals else math.nan

    def set_ap_at(self, classes: Iterable[int], threshold: float) -> float:
        vals = [self.class_ap[c][threshold] for c in sorted(classes) if c in self.per_class]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def ap_a(self) -> float:
        return self.set_ap(self.split.a)

    @property
    def ap_b(self) -> float:
        return self.set_ap(self.split.b)


def coco_map(detections: Sequence[Detection], scenes: Sequence[SceneRecord], split: SplitConfig,
             thresholds: Sequence[float] = IOU_THRESHOLDS) -> EvalReport:
    """Per-image greedy matching, precision-recall pooled over images per class."""
    classes = split.classes
    by_image: dict[int, list[Detection]] = {}
    for d in detections:
        if d.category not in classes:
            raise ValueError(f"unknown class id {d.category}")
        by_image.setdefault(d.image_id, []).append(d)
    known = {s.image_id for s in scenes}
    if set(by_image) - known:
        raise ValueError("detections refer to images not in the ground truth")

    num_gt = {c: 0 for c in classes}
    # per class: list of (score, insertion key, tp flags per threshold)
    records: dict[int, list[tuple[float, int, np.ndarray]]] = {c: [] for c in classes}
    serial = 0
    for scene in scenes:
        dets = by_image.get(scene.image_id, [])
        for c in classes:
            gts = [i.mask for i in scene.instances if i.category == c]
            num_gt[c] += len(gts)
            preds = [d for d in dets if d.category == c]
            if not preds:
                continue
            order = score_order([d.score for d in preds])
            ious = iou_matrix([d.mask for d in preds], gts)
            flags = np.stack([greedy_match(ious, order, t) for t in thresholds], axis=1)
            for rank, p in enumerate(order):
                records[c].append((preds[p].score, serial + p, flags[rank]))
            serial += len(preds)

    class_ap = {}
    for c in sorted(classes):
        recs = sorted(records[c], key=lambda r: (-r[0], r[1]))
        flags = np.array([r[2] for r in recs]).reshape(len(recs), len(thresholds))
        class_ap[c] = {t: interpolated_ap(flags[:, i], num_gt[c]) for i, t in enumerate(thresholds)}
    return EvalReport(class_ap, split, len(scenes), sum(num_gt.values()), len(detections))


# ---------------------------------------------------------------------------
# ablation tables


@dataclass
class RunResult:
    label: str
    report: EvalReport
    dataset_hash: str
    trial: int = 0

    @property
    def split_hash(self) -> str:
        return self.report.split.digest()


def relative_change(value: float, base: float) -> float:
    return (value - base) / base if base else math.nan


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else f"{x:.6f}"
    return str(x)


def ablation_rows(runs: Sequence[RunResult], baseline: str) -> list[dict]:
    """Run rows (trials=1) followed by one aggregate row per label (trials=n, mean and sample std)."""
    if not runs:
        raise ValueError("no runs to report")
    hashes = {r.dataset_hash for r in runs}
    if len(hashes) > 1:
        raise ValueError(f"runs use different datasets: {sorted(hashes)}")
    base_runs = {(r.split_hash, r.trial): r for r in runs if r.label == baseline}
    if not base_runs:
        raise ValueError(f"baseline {baseline!r} not among runs")

    rows = []
    for r in runs:
        base = base_runs.get((r.split_hash, r.trial))
        rows.append(dict(label=r.label, split_hash=r.split_hash, AP_A=r.report.ap_a, AP_B=r.report.ap_b,
                         rel_change_B=relative_change(r.report.ap_b, base.report.ap_b) if base else math.nan,
                         trials=1, std_AP_B=math.nan))
    labels = list(dict.fromkeys(r.label for r in runs))
    means = {}
    for label in labels:
        group = [r for r in runs if r.label == label]
        b = np.array([r.report.ap_b for r in group])
        means[label] = (float(np.mean([r.report.ap_a for r in group])), float(b.mean()),
                        float(b.std(ddof=1)) if len(b) > 1 else math.nan, len(group))
    for label in labels:
        ap_a, ap_b, std, n = means[label]
        split_hashes = {r.split_hash for r in runs if r.label == label}
        rows.append(dict(label=label, split_hash=split_hashes.pop() if len(split_hashes) == 1 else "mixed",
                         AP_A=ap_a, AP_B=ap_b, rel_change_B=relative_change(ap_b, means[baseline][1]),
                         trials=n, std_AP_B=std))
    return rows


def write_csv(rows: Sequence[dict], columns: Sequence[str], path=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def class_rows(label: str, report: EvalReport) -> list[dict]:
    return [dict(label=label, class_id=c, AP=report.per_class.get(c, math.nan)) for c in sorted(report.class_ap)]


def ablation_report(runs: Sequence[RunResult], baseline: str, path=None, class_path=None) -> list[dict]:
    rows = ablation_rows(runs, baseline)
    write_csv(rows, REPORT_COLUMNS, path)
    if class_path is not None:
        detail = [row for r in runs for row in class_rows(r.label, r.report)]
        write_csv(detail, CLASS_COLUMNS, class_path)
    return rows
