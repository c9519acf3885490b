"""Teacher-student alignment losses between a pruned model and the uncompressed one."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import DimensionError, MappingError, NumericError
from .metrics import giou_1d_tensor
from .tensor import Tensor

LOSS_TERMS = ("pc", "pr", "f", "cls", "reg")


class FeatureTrace(OrderedDict):
    """Block outputs from one forward pass, keyed by original block index."""


@dataclass(frozen=True)
class BlockMap:
    """``(student_position, teacher_index)`` pairs built from identity tags."""

    pairs: tuple

    def __post_init__(self):
        pairs = tuple((int(s), int(t)) for s, t in self.pairs)
        if [s for s, _ in pairs] != list(range(len(pairs))):
            raise ValueError("student positions must be 0..n-1 in order")
        if any(b <= a for (_, a), (_, b) in zip(pairs, pairs[1:])):
            raise ValueError("teacher indices must increase strictly with student position")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def from_tags(cls, student_tags, teacher_tags=None):
        if teacher_tags is not None:
            missing = [t for t in student_tags if t not in set(teacher_tags)]
            if missing:
                raise MappingError(f"student blocks {missing} have no teacher counterpart")
        return cls(tuple(enumerate(student_tags)))

    @property
    def teacher_indices(self):
        return [t for _, t in self.pairs]

    def __len__(self):
        return len(self.pairs)


def feature_alignment_loss(teacher_trace, student_trace, block_map=None):
    """Mean over mapped blocks of the per-block mean squared feature difference."""
    if block_map is None:
        block_map = BlockMap.from_tags(list(student_trace))
    if len(block_map) == 0:
        return Tensor(0.0)
    total = None
    for _, tag in block_map.pairs:
        if tag not in teacher_trace:
            raise MappingError(f"teacher trace has no block {tag}")
        if tag not in student_trace:
            raise MappingError(f"student trace has no block {tag}")
        t_feat, s_feat = teacher_trace[tag], student_trace[tag]
        if tuple(t_feat.shape) != tuple(s_feat.shape):
            raise DimensionError(f"block {tag}: teacher {t_feat.shape} vs student {s_feat.shape}")
        # teacher features are constants: no gradient flows back into the teacher
        diff = T.as_tensor(s_feat) - _constant(t_feat)
        term = T.square(diff).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(block_map))


def _constant(x):
    return Tensor(x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64))


def kl_alignment_loss(z_teacher, z_student):
    """Mean over steps of KL(softmax(z_teacher) || softmax(z_student))."""
    z_t = _constant(z_teacher)
    z_s = T.as_tensor(z_student)
    if z_t.shape != z_s.shape:
        raise DimensionError(f"logit shapes differ: {z_t.shape} vs {z_s.shape}")
    log_p = T.log_softmax(z_t, axis=-1).data
    p = np.exp(log_p)
    log_q = T.log_softmax(z_s, axis=-1)
    kl = (Tensor(p * log_p).sum(axis=-1) - (log_q * p).sum(axis=-1))
    return kl.mean()


def giou_alignment_loss(teacher_intervals, student_intervals, positive_mask):
    """``(1/N_p) * sum(1 - GIoU)`` over positive steps; 0 when ``N_p == 0``.

    Intervals are ``(start, end)`` pairs of equally shaped tensors/arrays
    decoded at the same steps.
    """
    mask = np.asarray(positive_mask, dtype=np.float64)
    n_pos = mask.sum()
    if n_pos == 0:
        return Tensor(0.0)
    ts, te = (_constant(v) for v in teacher_intervals)
    ss, se = (T.as_tensor(v) for v in student_intervals)
    g = giou_1d_tensor(ts, te, ss, se)
    return ((1.0 - g) * mask).sum() * (1.0 / n_pos)


DEFAULT_WEIGHTS = {k: 1.0 for k in LOSS_TERMS}


def total_loss(L_pc, L_pr, L_f, L_cls, L_reg, weights=None):
    """Weighted sum of the five terms; unit weights give the plain unweighted sum."""
    w = dict(DEFAULT_WEIGHTS)
    if weights:
        unknown = set(weights) - set(LOSS_TERMS)
        if unknown:
            raise KeyError(f"unknown loss weights {sorted(unknown)}")
        w.update(weights)
    terms = dict(zip(LOSS_TERMS, (L_pc, L_pr, L_f, L_cls, L_reg)))
    total = None
    for name, term in terms.items():
        value = term.item() if isinstance(term, Tensor) else float(term)
        if not math.isfinite(value):
            raise NumericError(f"loss term {name} is not finite ({value})")
        if w[name] == 0:
            continue
        part = T.as_tensor(term) * float(w[name])
        total = part if total is None else total + part
    return total if total is not None else Tensor(0.0)
