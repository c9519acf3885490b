"""Block selection, LoRA-based recovery and the progressive block-drop loop."""

from __future__ import annotations

import copy
import enum
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .align import (BlockMap, FeatureTrace, LOSS_TERMS, feature_alignment_loss,
                    giou_alignment_loss, kl_alignment_loss, total_loss)
from .detector import predict_instances, tad_loss
from .exceptions import ConfigError, ContractError
from .metrics import EvalConfig, map_at, mean_map
from .nn import LORA_TARGETS, drop_block, insert_lora, merge_lora
from .optim import run_optimisation
from .perf import count_macs

log = logging.getLogger(__name__)


class MetricKind(str, enum.Enum):
    TRAIN_MAP = "TRAIN_MAP"
    TRAIN_LOSS = "TRAIN_LOSS"
    BLOCK_IO_MSE = "BLOCK_IO_MSE"


@dataclass
class CandidateScore:
    block: int
    metric_kind: str
    raw_value: float
    importance: float


@dataclass
class RecoverConfig:
    lr: float = 3e-3
    steps: int = 150
    batch_size: int = 16
    rank_ratio: float = 0.25
    targets: tuple = LORA_TARGETS
    freeze_head: bool = False
    full_ft: bool = False
    weights: dict = field(default_factory=lambda: {k: 1.0 for k in LOSS_TERMS})
    focal: bool = False
    clip_norm: float = 1.0
    seed: int = 0


@dataclass
class CompressConfig:
    metric_kind: str = MetricKind.TRAIN_MAP.value
    epsilon: float = 0.0
    max_drops: int = 3
    recover: RecoverConfig = field(default_factory=RecoverConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    report_tiou: float = 0.5
    lr_overrides: dict = field(default_factory=dict)


@dataclass
class DropReport:
    iteration: int
    metric_kind: str
    candidates: list
    chosen_block: int
    drop_order: list
    pre_map: float
    post_map: float
    backbone_macs: int
    macs_ratio: float
    recovery_seconds: float
    loss_curve: list
    accepted: bool = True

    def to_dict(self):
        d = asdict(self)
        d["candidates"] = [asdict(c) for c in self.candidates]
        return d


def format_drop_order(order):
    return "[" + ",".join(str(i) for i in order) + "]"


# ---------------------------------------------------------------------
# teacher cache
# ---------------------------------------------------------------------
class TeacherOutputs:
    """Frozen teacher activations on the training split, computed once."""

    def __init__(self, teacher, split, batch_size=64):
        self.model = teacher
        feats, logits, offsets = {}, [], []
        with T.no_grad():
            for i in range(0, len(split), batch_size):
                trace = FeatureTrace()
                out = teacher(split.X[i:i + batch_size], trace=trace)
                for tag, f in trace.items():
                    feats.setdefault(tag, []).append(f.data)
                logits.append(out.class_logits.data)
                offsets.append(out.offsets.data)
        self.features = {tag: np.concatenate(v) for tag, v in feats.items()}
        self.logits = np.concatenate(logits)
        self.offsets = np.concatenate(offsets)
        self.positions = teacher.positions(split.X.shape[1])
        self._train_map = None
        self._split = split

    def intervals(self, idx):
        o = self.offsets[idx]
        return self.positions - o[..., 0], self.positions + o[..., 1]

    def train_map(self, eval_cfg):
        if self._train_map is None:
            self._train_map = evaluate_map(self.model, self._split, eval_cfg)
        return self._train_map


# ---------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------
def evaluate_map(model, split, eval_cfg):
    preds = predict_instances(model, split.X, eval_cfg)
    return mean_map(preds, split.instances, eval_cfg)


def alignment_losses(model, teacher, split, idx, weights, focal=False):
    """All five loss terms for ``model`` on training sequences ``idx``."""
    targets = split.targets(model.num_classes, model.pool).subset(idx)
    need_f = weights.get("f", 1.0) != 0
    trace = FeatureTrace() if need_f else None
    out = model(split.X[idx], trace=trace)
    L_cls, L_reg = tad_loss(out, targets, focal)
    zero = T.Tensor(0.0)
    L_f = zero
    if need_f:
        t_trace = {tag: teacher.features[tag][idx] for tag in trace}
        L_f = feature_alignment_loss(t_trace, trace, BlockMap.from_tags(model.backbone.tags))
    L_pc = kl_alignment_loss(teacher.logits[idx], out.class_logits) if weights.get("pc", 1.0) else zero
    L_pr = zero
    if weights.get("pr", 1.0):
        L_pr = giou_alignment_loss(teacher.intervals(idx), out.intervals(targets.positions),
                                   targets.mask)
    return {"pc": L_pc, "pr": L_pr, "f": L_f, "cls": L_cls, "reg": L_reg}


def _total(terms, weights):
    return total_loss(terms["pc"], terms["pr"], terms["f"], terms["cls"], terms["reg"], weights)


# ---------------------------------------------------------------------
# block selection
# ---------------------------------------------------------------------
def enumerate_subnets(model):
    """One subnet per surviving block; untouched blocks are shared with ``model``."""
    if model.backbone.depth < 2:
        raise ContractError("need at least 2 blocks to enumerate subnets")
    return [(tag, drop_block(model, tag)) for tag in model.backbone.tags]


def block_io_mse(model, X, batch_size=64):
    """Mean squared difference between each block's input and output, per tag."""
    stack = model.backbone
    sums = {tag: 0.0 for tag in stack.tags}
    count = 0
    with T.no_grad():
        for i in range(0, len(X), batch_size):
            xb = T.as_tensor(X[i:i + batch_size])
            h = stack.embed(xb) + stack.pos[: xb.shape[-2]]
            for tag, block in zip(stack.tags, stack.blocks):
                out = block(h)
                sums[tag] += float(((out.data - h.data) ** 2).mean()) * len(xb.data)
                h = out
            count += len(xb.data)
    return {tag: s / count for tag, s in sums.items()}


def evaluate_subnets(subnets, train, metric_kind, teacher, eval_cfg=None, parent=None,
                     weights=None, batch_size=64):
    """Score every candidate subnet; higher importance means safer to drop."""
    kind = MetricKind(metric_kind)
    eval_cfg = eval_cfg or EvalConfig()
    scores = []
    if kind is MetricKind.BLOCK_IO_MSE:
        if parent is None:
            raise ContractError("BLOCK_IO_MSE needs the parent model")
        mse = block_io_mse(parent, train.X, batch_size)
        for tag, _ in subnets:
            scores.append(CandidateScore(tag, kind.value, mse[tag], -mse[tag]))
        return scores
    if kind is MetricKind.TRAIN_MAP:
        ref = teacher.train_map(eval_cfg)["average"]
        for tag, sub in subnets:
            gap = ref - evaluate_map(sub, train, eval_cfg)["average"]
            scores.append(CandidateScore(tag, kind.value, gap, -gap))
        return scores
    weights = weights or {k: 1.0 for k in LOSS_TERMS}
    for tag, sub in subnets:
        total, n = 0.0, 0
        with T.no_grad():
            for i in range(0, len(train), batch_size):
                idx = np.arange(i, min(i + batch_size, len(train)))
                total += _total(alignment_losses(sub, teacher, train, idx, weights), weights).item() * len(idx)
                n += len(idx)
        scores.append(CandidateScore(tag, kind.value, total / n, -total / n))
    return scores


def select_block(scores):
    """Highest importance wins; ties go to the lowest original index."""
    best = max(scores, key=lambda s: (s.importance, -s.block))
    return best.block


# ---------------------------------------------------------------------
# recovery
# ---------------------------------------------------------------------
def recover(subnet, teacher, train, cfg=None, lr=None):
    """LoRA (or full) fine-tune against the teacher, then merge adapters.

    Returns ``(model, loss_curve)``; the input subnet is not modified.
    """
    cfg = cfg or RecoverConfig()
    rng = np.random.default_rng([cfg.seed, 1])
    model = copy.deepcopy(subnet)
    if cfg.full_ft:
        model.backbone.set_trainable(True)
    else:
        insert_lora(model, cfg.rank_ratio, cfg.targets, rng=rng)
    for p in model.head_parameters():
        p.requires_grad = not cfg.freeze_head

    def loss_fn(idx):
        return _total(alignment_losses(model, teacher, train, idx, cfg.weights, cfg.focal), cfg.weights)

    trainable = [p for p in model.parameters() if p.requires_grad]
    curve = []
    if cfg.steps > 0 and trainable:
        curve = run_optimisation(trainable, loss_fn, len(train), cfg.steps,
                                 cfg.lr if lr is None else lr, cfg.batch_size, rng,
                                 clip_norm=cfg.clip_norm)
    if not cfg.full_ft:
        merge_lora(model)
    model.set_trainable(True)
    return model, curve


# ---------------------------------------------------------------------
# drop loops
# ---------------------------------------------------------------------
def progressive_drop(m0, train, val, cfg=None, teacher=None, on_iteration=None):
    """Repeatedly drop the most dispensable block and recover.

    Stops once post-recovery val mAP falls below ``mAP(M0) - epsilon`` (that
    iteration is reported but its model discarded) or after ``max_drops``.
    Returns ``(final_model, reports)``.
    """
    cfg = cfg or CompressConfig()
    teacher = teacher or TeacherOutputs(m0, train)
    base_map = map_at(evaluate_map(m0, val, cfg.eval), cfg.report_tiou)
    base_macs = count_macs(m0).backbone_total
    current, reports, order = m0, [], []
    for it in range(1, cfg.max_drops + 1):
        if current.backbone.depth < 2:
            break
        subnets = enumerate_subnets(current)
        scores = evaluate_subnets(subnets, train, cfg.metric_kind, teacher, cfg.eval,
                                  parent=current, weights=cfg.recover.weights)
        chosen = select_block(scores)
        subnet = dict(subnets)[chosen]
        pre = map_at(evaluate_map(subnet, val, cfg.eval), cfg.report_tiou)
        t0 = time.perf_counter()
        recovered, curve = recover(subnet, teacher, train, cfg.recover,
                                   lr=cfg.lr_overrides.get(it, cfg.lr_overrides.get(str(it))))
        elapsed = time.perf_counter() - t0
        post = map_at(evaluate_map(recovered, val, cfg.eval), cfg.report_tiou)
        macs = count_macs(recovered).backbone_total
        accepted = post >= base_map - cfg.epsilon
        report = DropReport(it, MetricKind(cfg.metric_kind).value, scores, chosen,
                            order + [chosen], pre, post, macs, macs / base_macs, elapsed,
                            [float(v) for v in curve], accepted)
        reports.append(report)
        log.info("iteration %d: drop %d pre=%.4f post=%.4f base=%.4f", it, chosen, pre, post, base_map)
        if on_iteration is not None:
            on_iteration(report, recovered)
        if not accepted:
            break
        current, order = recovered, order + [chosen]
    return current, reports


def simultaneous_drop(model, block_indices, teacher, train, cfg=None):
    """Remove all listed blocks at once, then run a single recovery phase."""
    if len(set(block_indices)) != len(block_indices):
        raise ValueError("block indices must be distinct")
    recovered, _ = recover(drop_blocks(model, block_indices), teacher, train, cfg)
    return recovered


def replay_drop(m0, order, teacher, train, val, cfg=None):
    """Progressive drop along a fixed ``order`` (no selection); used by ablations.

    Returns ``(final_model, post_maps)`` with one val mAP per iteration.
    """
    cfg = cfg or CompressConfig()
    current, posts = m0, []
    for it, block in enumerate(order, 1):
        current, _ = recover(drop_block(current, block), teacher, train, cfg.recover,
                             lr=cfg.lr_overrides.get(it))
        posts.append(map_at(evaluate_map(current, val, cfg.eval), cfg.report_tiou))
    return current, posts


def drop_blocks(model, block_indices):
    """Remove every listed block without any recovery."""
    for idx in block_indices:
        model = drop_block(model, idx)
    return model


# ---------------------------------------------------------------------
# width pruning baseline
# ---------------------------------------------------------------------
def _prune_block_ffn(block, n_remove):
    norms = np.linalg.norm(block.ffn_in.weight.data, axis=0)
    keep = np.sort(np.argsort(norms, kind="stable")[n_remove:])
    block.ffn_in.weight = T.Tensor(block.ffn_in.weight.data[:, keep], requires_grad=True)
    block.ffn_in.bias = T.Tensor(block.ffn_in.bias.data[keep], requires_grad=True)
    block.ffn_out.weight = T.Tensor(block.ffn_out.weight.data[keep, :], requires_grad=True)


def width_prune_baseline(model, target_macs_ratio):
    """Uniformly remove the lowest-norm FFN hidden channels until backbone MACs <= ratio.

    Attention widths are left alone.
    """
    if not 0 < target_macs_ratio <= 1:
        raise ConfigError("target_macs_ratio must lie in (0, 1]")
    if target_macs_ratio == 1:
        return copy.deepcopy(model)
    base = count_macs(model).backbone_total
    blocks = model.backbone.blocks
    T_len = model.seq_len
    # each removed hidden channel saves T*d MACs in ffn_in and in ffn_out
    per_channel = sum(2 * T_len * b.width for b in blocks)
    min_hidden = min(b.hidden for b in blocks)
    n_remove = math.ceil((base - target_macs_ratio * base) / per_channel)
    if n_remove >= min_hidden:
        raise ConfigError(f"ratio {target_macs_ratio} is unreachable by FFN pruning alone")
    pruned = copy.deepcopy(model)
    for block in pruned.backbone.blocks:
        _prune_block_ffn(block, n_remove)
    return pruned


def drop_order_string(reports):
    accepted = [r.chosen_block for r in reports if r.accepted]
    return format_drop_order(accepted)
