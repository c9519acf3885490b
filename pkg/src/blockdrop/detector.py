"""Synthetic 1-D action detection task, the anchor-free detector and its losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ConfigError
from .metrics import ActionInstance, giou_1d_tensor, nms
from .nn import LayerNorm, Linear, Module, BlockStack, TransformerBlock
from .tensor import Tensor


# ---------------------------------------------------------------------
# task
# ---------------------------------------------------------------------
@dataclass
class TaskConfig:
    num_seq: int = 1000
    T: int = 64
    d_in: int = 16
    num_classes: int = 3
    noise_sigma: float = 0.5
    pattern_scale: float = 0.8
    max_instances: int = 3
    min_len: int = 8
    max_len: int = 20
    val_fraction: float = 0.2
    seed: int = 0

    def validate(self):
        if self.T < 32:
            raise ConfigError("T must be at least 32")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.num_seq < 2:
            raise ConfigError("need at least 2 sequences")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.max_instances < 1:
            raise ConfigError("max_instances must be positive")
        if self.max_instances * (self.max_len + 1) > self.T:
            raise ConfigError("instances cannot fit without overlap")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        return self


@dataclass
class SyntheticSequence:
    features: np.ndarray
    instances: list
    seed: int = 0


def class_patterns(cfg):
    rng = np.random.default_rng([cfg.seed, 7919])
    return cfg.pattern_scale * rng.normal(size=(cfg.num_classes, cfg.d_in))


def _place_instances(rng, cfg):
    n = int(rng.integers(1, cfg.max_instances + 1))
    lengths = rng.integers(cfg.min_len, cfg.max_len + 1, size=n)
    slack = cfg.T - int(lengths.sum()) - (n - 1)
    # stars and bars: split the free timesteps into n+1 gaps
    cuts = np.sort(rng.integers(0, slack + 1, size=n))
    gaps = np.diff(np.concatenate([[0], cuts]))
    classes = rng.integers(0, cfg.num_classes, size=n)
    out, t = [], 0
    for gap, length, c in zip(gaps, lengths, classes):
        t += int(gap)
        out.append(ActionInstance(float(t), float(t + length), int(c)))
        t += int(length) + 1
    return out


def make_sequence(cfg, patterns, seed):
    rng = np.random.default_rng([cfg.seed, seed])
    instances = _place_instances(rng, cfg)
    x = cfg.noise_sigma * rng.normal(size=(cfg.T, cfg.d_in))
    for inst in instances:
        x[int(inst.start):int(inst.end)] += patterns[inst.class_id]
    return SyntheticSequence(x, instances, seed)


def generate_dataset(cfg):
    """Deterministic train/val split of synthetic sequences for ``cfg``."""
    cfg.validate()
    patterns = class_patterns(cfg)
    seqs = [make_sequence(cfg, patterns, i) for i in range(cfg.num_seq)]
    n_val = max(1, int(round(cfg.num_seq * cfg.val_fraction)))
    return seqs[:-n_val], seqs[-n_val:]


def stack_features(seqs):
    return np.stack([s.features for s in seqs])


@dataclass
class Split:
    """Stacked features ``[N, T, d_in]`` with their ground-truth instances."""

    X: np.ndarray
    instances: list
    _targets: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_sequences(cls, seqs):
        return cls(stack_features(seqs), [list(s.instances) for s in seqs])

    def __len__(self):
        return len(self.X)

    def targets(self, num_classes, stride):
        key = (num_classes, stride)
        if key not in self._targets:
            self._targets[key] = build_targets(self.instances, self.X.shape[1], num_classes, stride)
        return self._targets[key]


# ---------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------
def positions(T_len, stride=1):
    """Time coordinate of each head step (cell centre)."""
    return np.arange(T_len // stride) * stride + (stride - 1) / 2.0


def assign_labels(instances, T_len, num_classes, stride=1):
    """Per-step class target (``num_classes`` = background), offsets and positive mask."""
    pos = positions(T_len, stride)
    cls = np.full(len(pos), num_classes, dtype=np.int64)
    offsets = np.zeros((len(pos), 2))
    mask = np.zeros(len(pos), dtype=bool)
    best_len = np.full(len(pos), np.inf)
    for inst in instances:
        inside = (pos >= inst.start) & (pos < inst.end) & (inst.length < best_len)
        cls[inside] = inst.class_id
        offsets[inside, 0] = pos[inside] - inst.start
        offsets[inside, 1] = inst.end - pos[inside]
        best_len[inside] = inst.length
        mask |= inside
    return cls, offsets, mask


@dataclass
class Targets:
    cls: np.ndarray       # [N, L] int
    offsets: np.ndarray   # [N, L, 2]
    mask: np.ndarray      # [N, L] bool
    positions: np.ndarray  # [L]

    def subset(self, idx):
        return Targets(self.cls[idx], self.offsets[idx], self.mask[idx], self.positions)


def build_targets(instance_lists, T_len, num_classes, stride=1):
    parts = [assign_labels(insts, T_len, num_classes, stride) for insts in instance_lists]
    return Targets(np.stack([p[0] for p in parts]), np.stack([p[1] for p in parts]),
                   np.stack([p[2] for p in parts]), positions(T_len, stride))


# ---------------------------------------------------------------------
# model
# ---------------------------------------------------------------------
@dataclass
class ModelConfig:
    depth: int = 12
    width: int = 32
    heads: int = 2
    head_depth: int = 2
    pool: int = 8
    activation: str = "gelu"
    planted_blocks: list = field(default_factory=list)

    def validate(self):
        if self.depth < 1 or self.head_depth < 0:
            raise ConfigError("depth must be positive and head_depth non-negative")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        if self.pool < 1:
            raise ConfigError("pool must be positive")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError("activation must be 'gelu' or 'relu'")
        if len(set(self.planted_blocks)) != len(self.planted_blocks) or any(
                not 0 <= p < self.depth for p in self.planted_blocks):
            raise ConfigError("planted_blocks must be distinct indices below depth")
        if len(self.planted_blocks) >= self.depth:
            raise ConfigError("at least one trained block is required")
        return self


@dataclass
class HeadOutput:
    class_logits: Tensor  # [N, L, C+1]; last class is background
    offsets: Tensor       # [N, L, 2], non-negative distances to start/end

    def intervals(self, pos):
        """Decoded (start, end) tensors at head positions ``pos``."""
        return pos - self.offsets[..., 0], pos + self.offsets[..., 1]


class DetectorModel(Module):
    """Backbone block stack, temporal pooling, a small transformer head, two branches."""

    def __init__(self, task, cfg, rng=None, depth=None):
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        if task.T % cfg.pool:
            raise ConfigError("T must be divisible by pool")
        self.num_classes = task.num_classes
        self.pool = cfg.pool
        self.seq_len = task.T
        depth = cfg.depth if depth is None else depth
        self.backbone = BlockStack(task.d_in, cfg.width, depth, cfg.heads, task.T,
                                   activation=cfg.activation, rng=rng)
        self.head_blocks = [TransformerBlock(cfg.width, cfg.heads, rng=rng)
                            for _ in range(cfg.head_depth)]
        self.head_norm = LayerNorm(cfg.width)
        self.cls = Linear(cfg.width, task.num_classes + 1, rng)
        self.reg = Linear(cfg.width, 2, rng)

    def head_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("backbone.")]

    def __call__(self, x, trace=None, observer=None):
        x = T.as_tensor(x)
        if x.ndim == 2:
            x = x.reshape((1,) + x.shape)
        h = self.backbone(x, trace=trace, observer=observer)
        n, t, d = h.shape
        if self.pool > 1:
            h = h.reshape(n, t // self.pool, self.pool, d).mean(axis=2)
        for block in self.head_blocks:
            h = block(h)
        h = self.head_norm(h)
        offsets = T.softplus(self.reg(h)) * float(self.pool)
        return HeadOutput(self.cls(h), offsets)

    def positions(self, T_len=None):
        return positions(T_len or self.seq_len, self.pool)


# ---------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------
def _one_hot(cls, n_classes):
    out = np.zeros(cls.shape + (n_classes,))
    np.put_along_axis(out, cls[..., None], 1.0, axis=-1)
    return out


def classification_loss(logits, cls, focal=False, gamma=2.0):
    """Mean softmax cross-entropy over every step (optionally focal-weighted)."""
    onehot = _one_hot(cls, logits.shape[-1])
    logp = T.log_softmax(logits, axis=-1)
    if focal:
        rest = 1.0 - T.exp(logp)
        if gamma == 2.0:
            weight = T.square(rest)
        else:
            weight = T.exp(T.log(T.maximum(rest, T.Tensor(1e-300))) * gamma)
        per_step = -(logp * weight * onehot).sum(axis=-1)
    else:
        per_step = -(logp * onehot).sum(axis=-1)
    return per_step.mean()


def regression_loss(head_out, targets):
    """Mean ``1 - GIoU`` over positive steps; 0 when there are none."""
    mask = targets.mask.astype(np.float64)
    n_pos = mask.sum()
    if n_pos == 0:
        return Tensor(0.0)
    pos = np.broadcast_to(targets.positions, mask.shape)
    ps, pe = head_out.intervals(pos)
    ts = pos - targets.offsets[..., 0]
    te = pos + targets.offsets[..., 1]
    # keep the GIoU well-defined at non-positive steps
    safe_ts = np.where(mask > 0, ts, pos - 1.0)
    safe_te = np.where(mask > 0, te, pos + 1.0)
    g = giou_1d_tensor(ps, pe, T.Tensor(safe_ts), T.Tensor(safe_te))
    return ((1.0 - g) * mask).sum() * (1.0 / n_pos)


def tad_loss(head_out, targets, focal=False):
    """Task losses ``(L_cls, L_reg)``."""
    return classification_loss(head_out.class_logits, targets.cls, focal), regression_loss(head_out, targets)


# ---------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------
def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decode_predictions(class_logits, offsets, T_len, stride=1, score_thr=0.05,
                       nms_tiou=0.5, max_dets=50):
    """Turn one sequence's head output into scored, NMS-filtered instances.

    ``class_logits`` is ``[L, C+1]`` and ``offsets`` ``[L, 2]`` (arrays or tensors).
    """
    logits = class_logits.data if isinstance(class_logits, Tensor) else np.asarray(class_logits)
    offs = offsets.data if isinstance(offsets, Tensor) else np.asarray(offsets)
    probs = _softmax_np(logits)[:, :-1]
    pos = positions(T_len, stride)
    cls = probs.argmax(axis=1)
    score = probs[np.arange(len(cls)), cls]
    start = np.clip(pos - offs[:, 0], 0.0, T_len)
    end = np.clip(pos + offs[:, 1], 0.0, T_len)
    keep = (score >= score_thr) & (end > start)
    cands = [ActionInstance(float(start[i]), float(end[i]), int(cls[i]), float(score[i]))
             for i in np.flatnonzero(keep)]
    return nms(cands, nms_tiou)[:max_dets]


def predict_instances(model, X, eval_cfg, batch_size=32):
    """Decoded predictions for every sequence in ``X`` ([N, T, d_in])."""
    out = []
    with T.no_grad():
        for i in range(0, len(X), batch_size):
            head = model(X[i:i + batch_size])
            for logits, offs in zip(head.class_logits.data, head.offsets.data):
                out.append(decode_predictions(logits, offs, X.shape[1], model.pool,
                                              eval_cfg.score_thr, eval_cfg.nms_tiou,
                                              eval_cfg.max_dets))
    return out

