"""Temporal detection metrics: 1-D IoU/GIoU, NMS, AP and mAP over tIoU thresholds."""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ContractError

THUMOS_TIOUS = (0.3, 0.4, 0.5, 0.6, 0.7)
ANET_TIOUS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class ActionInstance:
    start: float
    end: float
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if not self.start < self.end:
            raise ContractError(f"instance needs start < end, got [{self.start}, {self.end})")
        if self.class_id < 0:
            raise ContractError("class_id must be non-negative")

    @property
    def length(self):
        return self.end - self.start


@dataclass
class EvalConfig:
    tiou_thresholds: tuple = THUMOS_TIOUS
    nms_tiou: float = 0.5
    score_thr: float = 0.05
    max_dets: int = 50

    def __post_init__(self):
        thr = tuple(float(t) for t in self.tiou_thresholds)
        if not thr or any(not 0 < t < 1 for t in thr) or list(thr) != sorted(thr):
            raise ConfigError("tiou_thresholds must be ascending values in (0, 1)")
        self.tiou_thresholds = thr
        if self.max_dets < 1:
            raise ConfigError("max_dets must be positive")


def _bounds(x):
    if isinstance(x, ActionInstance):
        return x.start, x.end
    s, e = x
    return float(s), float(e)


def tiou(a, b):
    """Intersection over union of two half-open intervals."""
    (s1, e1), (s2, e2) = _bounds(a), _bounds(b)
    if not (s1 < e1 and s2 < e2):
        raise ContractError("degenerate interval")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union


def giou_1d(a, b):
    (s1, e1), (s2, e2) = _bounds(a), _bounds(b)
    if not (s1 < e1 and s2 < e2):
        raise ContractError("degenerate interval")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    hull = max(e1, e2) - min(s1, s2)
    return inter / union - (hull - union) / hull


def giou_1d_tensor(start_a, end_a, start_b, end_b):
    """Differentiable elementwise GIoU for intervals given as tensors of equal shape."""
    inter = T.relu(T.minimum(end_a, end_b) - T.maximum(start_a, start_b))
    union = (end_a - start_a) + (end_b - start_b) - inter
    hull = T.maximum(end_a, end_b) - T.minimum(start_a, start_b)
    return inter / union - (hull - union) / hull


def pairwise_tiou(starts, ends, ref_start, ref_end):
    inter = np.clip(np.minimum(ends, ref_end) - np.maximum(starts, ref_start), 0.0, None)
    union = (ends - starts) + (ref_end - ref_start) - inter
    return inter / union


def nms(instances, tiou_thr):
    """Greedy per-class suppression of overlaps above ``tiou_thr``.

    Survivors come back sorted by descending score; equal scores keep input order.
    """
    order = sorted(range(len(instances)), key=lambda i: -instances[i].score)
    kept = []
    by_class = defaultdict(list)
    for i in order:
        inst = instances[i]
        if all(tiou(inst, k) <= tiou_thr for k in by_class[inst.class_id]):
            by_class[inst.class_id].append(inst)
            kept.append(inst)
    return kept


def _groups(items):
    """Normalise predictions/ground truth to ``{sequence_id: [ActionInstance, ...]}``."""
    if isinstance(items, Mapping):
        return {k: list(v) for k, v in items.items()}
    items = list(items)
    if items and isinstance(items[0], ActionInstance):
        return {0: items}
    if items and isinstance(items[0], tuple) and len(items[0]) == 2 and isinstance(items[0][1], ActionInstance):
        out = defaultdict(list)
        for sid, inst in items:
            out[sid].append(inst)
        return dict(out)
    return {i: list(v) for i, v in enumerate(items)}


def _pr_curve(preds, gts, tiou_thr):
    """TP flags for predictions ranked by score, plus the number of GT instances."""
    gt_by_seq = {sid: v for sid, v in gts.items()}
    matched = {sid: np.zeros(len(v), dtype=bool) for sid, v in gt_by_seq.items()}
    flat = [(sid, p) for sid, ps in preds.items() for p in ps]
    # ties resolved by content so the result does not depend on input order
    flat.sort(key=lambda sp: (-sp[1].score, str(sp[0]), sp[1].start, sp[1].end, sp[1].class_id))
    tp = np.zeros(len(flat), dtype=bool)
    for n, (sid, p) in enumerate(flat):
        best, best_j = -1.0, -1
        for j, g in enumerate(gt_by_seq.get(sid, ())):
            if g.class_id != p.class_id or matched[sid][j]:
                continue
            iou = tiou(p, g)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= tiou_thr:
            tp[n] = True
            matched[sid][best_j] = True
    n_gt = sum(len(v) for v in gt_by_seq.values())
    return tp, n_gt


def _all_point_ap(tp, n_gt):
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def average_precision(preds, gts, tiou_thr):
    """All-point interpolated AP over one pool of predictions.

    A prediction is a true positive when it reaches ``tiou_thr`` against a
    still-unmatched ground-truth instance of the same class (and sequence).
    Returns NaN when there is no ground truth.
    """
    tp, n_gt = _pr_curve(_groups(preds), _groups(gts), tiou_thr)
    return _all_point_ap(tp, n_gt)


def per_class_ap(preds, gts, tiou_thr):
    preds, gts = _groups(preds), _groups(gts)
    classes = sorted({g.class_id for v in gts.values() for g in v})
    out = {}
    for c in classes:
        p_c = {sid: [p for p in v if p.class_id == c] for sid, v in preds.items()}
        g_c = {sid: [g for g in v if g.class_id == c] for sid, v in gts.items()}
        out[c] = average_precision(p_c, g_c, tiou_thr)
    return out


def mean_map(preds, gts, cfg=None):
    """mAP at each threshold (mean over GT classes) and its mean across thresholds."""
    cfg = cfg or EvalConfig()
    per_thr = []
    per_class = {}
    for thr in cfg.tiou_thresholds:
        aps = per_class_ap(preds, gts, thr)
        per_class[thr] = aps
        per_thr.append(float(np.mean(list(aps.values()))) if aps else 0.0)
    return {
        "thresholds": list(cfg.tiou_thresholds),
        "per_threshold": per_thr,
        "average": float(np.mean(per_thr)),
        "per_class": per_class,
    }


def map_at(result, thr):
    """Pick the mAP at one threshold out of a ``mean_map`` result."""
    for t, v in zip(result["thresholds"], result["per_threshold"]):
        if abs(t - thr) < 1e-9:
            return v
    raise KeyError(f"threshold {thr} not evaluated")
