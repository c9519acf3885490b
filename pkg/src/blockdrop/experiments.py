"""Shared pipeline steps and the ablation suites behind ``blockdrop ablate``.

Every suite returns a ``SuiteResult``: one comparison table (``columns`` and
``rows``) plus per-seed details. Tables are averaged over ``ablate.seeds``.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .compress import (TeacherOutputs, drop_blocks, evaluate_map, progressive_drop, recover,
                       replay_drop, simultaneous_drop)
from .detector import Split, generate_dataset
from .estimators import TemporalActionDetector
from .io import dump_json, write_csv
from .metrics import map_at
from .nn import insert_lora
from .perf import activation_sparsity, count_macs, swap_activation

log = logging.getLogger(__name__)

SUITES = ("metrics", "alignment", "lora", "sim_vs_prog", "sparsity")
METRIC_LABELS = {"TRAIN_LOSS": "Train Loss", "TRAIN_MAP": "mAP", "BLOCK_IO_MSE": "MSE"}
ALIGNMENT_LEVELS = {
    "none": {"f": 0.0, "pc": 0.0, "pr": 0.0},
    "feature": {"f": 1.0, "pc": 0.0, "pr": 0.0},
    "prediction": {"f": 0.0, "pc": 1.0, "pr": 1.0},
    "both": {"f": 1.0, "pc": 1.0, "pr": 1.0},
}


# ---------------------------------------------------------------------
# pipeline pieces
# ---------------------------------------------------------------------
def make_splits(cfg):
    train, val = generate_dataset(cfg.task_config())
    return Split.from_sequences(train), Split.from_sequences(val)


def make_detector(cfg):
    m, t, e = cfg.model, cfg.train, cfg.eval
    return TemporalActionDetector(
        depth=m.depth, width=m.width, heads=m.heads, head_depth=m.head_depth, pool=m.pool,
        activation=m.activation, planted_blocks=tuple(m.planted_blocks),
        num_classes=cfg.task_config().num_classes, lr=t.lr, steps=t.steps,
        batch_size=t.batch_size, warmup=t.warmup, focal=t.focal,
        tiou_thresholds=tuple(e.tiou_thresholds), nms_tiou=e.nms_tiou, score_thr=e.score_thr,
        max_dets=e.max_dets, score_tiou=e.report_tiou, random_state=cfg.seed)


def metrics_summary(model, split, eval_cfg):
    """JSON-ready mAP summary (per threshold, average, per class)."""
    res = evaluate_map(model, split, eval_cfg)
    return {
        "tiou_thresholds": list(res["thresholds"]),
        "map": {f"{t:g}": float(v) for t, v in zip(res["thresholds"], res["per_threshold"])},
        "average_map": float(res["average"]),
        "per_class": {f"{t:g}": {str(c): float(ap) for c, ap in sorted(res["per_class"][t].items())}
                      for t in res["thresholds"]},
    }


@dataclass
class Workbench:
    """One seed's data, baseline and teacher cache, shared by every suite."""

    cfg: object
    train: Split
    val: Split
    model: object
    teacher: TeacherOutputs = None
    _order: list = field(default=None, repr=False)
    _base: float = field(default=None, repr=False)

    @classmethod
    def build(cls, cfg, model=None):
        train, val = make_splits(cfg)
        if model is None:
            model = make_detector(cfg).fit(train.X, train.instances).model_
        return cls(cfg, train, val, model, TeacherOutputs(model, train))

    @property
    def eval_cfg(self):
        return self.cfg.eval_config()

    def score(self, model):
        return map_at(evaluate_map(model, self.val, self.eval_cfg), self.cfg.eval.report_tiou)

    def row(self, model):
        res = evaluate_map(model, self.val, self.eval_cfg)
        out = {f"mAP@{t:g}": float(v) for t, v in zip(res["thresholds"], res["per_threshold"])}
        out["avg"] = float(res["average"])
        return out

    @property
    def base_map(self):
        if self._base is None:
            self._base = self.score(self.model)
        return self._base

    def compress_config(self, **overrides):
        cc = self.cfg.compress_config()
        for k, v in overrides.items():
            setattr(cc, k, v)
        return cc

    def progressive(self, **overrides):
        return progressive_drop(self.model, self.train, self.val, self.compress_config(**overrides),
                                self.teacher)

    def drop_order(self):
        """Order found by a forced progressive run of ``ablate.drops`` iterations."""
        if self._order is None:
            _, reports = self.progressive(epsilon=float("inf"), max_drops=self.cfg.ablate.drops)
            self._order = [r.chosen_block for r in reports]
        return list(self._order)

    def recover_config(self, **overrides):
        rc = copy.deepcopy(self.cfg.recover_config())
        for k, v in overrides.items():
            setattr(rc, k, v)
        return rc

    def replay(self, order=None, **recover_overrides):
        cc = self.compress_config()
        cc.recover = self.recover_config(**recover_overrides)
        order = self.drop_order() if order is None else order
        return replay_drop(self.model, order, self.teacher, self.train, self.val, cc)


@dataclass
class SuiteResult:
    suite: str
    columns: list
    rows: list
    per_seed: dict = field(default_factory=dict)

    def to_dict(self):
        return {"suite": self.suite, "columns": self.columns, "rows": self.rows,
                "per_seed": self.per_seed}

    def write(self, directory, stem=None):
        stem = stem or f"ablate_{self.suite}"
        dump_json(self.to_dict(), f"{directory}/{stem}.json")
        write_csv(f"{directory}/{stem}.csv", self.columns,
                  ([row.get(c, "") for c in self.columns] for row in self.rows))


def _mean_rows(label_key, labels, per_seed_rows, extra_cols=()):
    """Average numeric columns of matching rows over seeds."""
    out = []
    for label in labels:
        rows = [r[label] for r in per_seed_rows]
        row = {label_key: label}
        for k, v in rows[0].items():
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                vals = [r[k] for r in rows]
                same_int = all(isinstance(x, int) for x in vals) and len(set(vals)) == 1
                row[k] = vals[0] if same_int else float(np.mean(vals))
            elif len(rows) == 1 or k in extra_cols:
                row[k] = v
        out.append(row)
    return out


def _columns(label_key, rows, extra=()):
    map_cols = [c for c in rows[0] if c.startswith("mAP@")]
    return [label_key, *extra, *map_cols, "avg"]


# ---------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------
def suite_metrics(benches):
    """Drop metric comparison: one progressive run per selection metric."""
    per_seed = {}
    for wb in benches:
        rows = {}
        for kind in ("TRAIN_LOSS", "TRAIN_MAP", "BLOCK_IO_MSE"):
            model, reports = wb.progressive(metric_kind=kind)
            row = wb.row(model)
            row["drop_order"] = [r.chosen_block for r in reports if r.accepted]
            row["macs_ratio"] = count_macs(model).backbone_total / count_macs(wb.model).backbone_total
            rows[METRIC_LABELS[kind]] = row
        per_seed[wb.cfg.seed] = rows
    labels = list(METRIC_LABELS.values())
    rows = _mean_rows("drop_metric", labels, list(per_seed.values()))
    return SuiteResult("metrics", _columns("drop_metric", rows, ("macs_ratio",)), rows, per_seed)


def suite_alignment(benches):
    """Alignment level comparison on a fixed drop order per seed."""
    per_seed = {}
    for wb in benches:
        rows = {}
        for level, w in ALIGNMENT_LEVELS.items():
            weights = dict(wb.recover_config().weights)
            weights.update(w)
            model, _ = wb.replay(weights=weights)
            row = wb.row(model)
            row.update(feature=w["f"] > 0, prediction=w["pc"] > 0, drop_order=wb.drop_order())
            rows[level] = row
        per_seed[wb.cfg.seed] = rows
    rows = _mean_rows("alignment", list(ALIGNMENT_LEVELS), list(per_seed.values()),
                      extra_cols=("feature", "prediction"))
    return SuiteResult("alignment", _columns("alignment", rows, ("feature", "prediction")), rows,
                       per_seed)


def _trainable_count(wb, full_ft):
    probe = copy.deepcopy(wb.model)
    if full_ft:
        return probe.num_parameters()
    cfg = wb.recover_config()
    insert_lora(probe, cfg.rank_ratio, cfg.targets)
    head = sum(p.size for p in probe.head_parameters())
    return sum(p.size for p in probe.backbone.parameters() if p.requires_grad) + head


def suite_lora(benches):
    """LoRA recovery against full fine-tuning on the same drop order."""
    per_seed = {}
    for wb in benches:
        rows = {}
        for label, full in (("LoRA", False), ("Full FT", True)):
            model, _ = wb.replay(full_ft=full)
            row = wb.row(model)
            row["trainable_params"] = _trainable_count(wb, full)
            rows[label] = row
        per_seed[wb.cfg.seed] = rows
    rows = _mean_rows("method", ["LoRA", "Full FT"], list(per_seed.values()))
    return SuiteResult("lora", _columns("method", rows, ("trainable_params",)), rows, per_seed)


def sim_vs_prog(wb):
    """Progressive, simultaneous and unrecovered models for one seed's drop set."""
    order = wb.drop_order()
    prog, _ = wb.replay(order)
    sim = simultaneous_drop(wb.model, order, wb.teacher, wb.train, wb.recover_config())
    unrec = drop_blocks(wb.model, order)
    return {"Baseline": wb.model, "Progressive": prog, "Simultaneous": sim, "No recovery": unrec}


def suite_sim_vs_prog(benches):
    per_seed = {}
    for wb in benches:
        rows = {}
        for label, model in sim_vs_prog(wb).items():
            row = wb.row(model)
            row["dropped"] = [] if label == "Baseline" else wb.drop_order()
            rows[label] = row
        per_seed[wb.cfg.seed] = rows
    labels = ["Baseline", "Progressive", "Simultaneous", "No recovery"]
    rows = _mean_rows("method", labels, list(per_seed.values()))
    return SuiteResult("sim_vs_prog", _columns("method", rows), rows, per_seed)


def sparsity_pipeline(wb):
    """GELU baseline, ReLU swap and ReLU swap + recovery, with sparsity and mAP."""
    ab = wb.cfg.ablate
    swapped = swap_activation(wb.model, "relu")
    rc = wb.recover_config(steps=ab.sparsity_steps, full_ft=ab.sparsity_full_ft)
    recovered, _ = recover(swapped, wb.teacher, wb.train, rc)
    return {"GELU": wb.model, "ReLU": swapped, "ReLU + recovery": recovered}


def suite_sparsity(benches):
    per_seed = {}
    for wb in benches:
        rows = {}
        for label, model in sparsity_pipeline(wb).items():
            row = wb.row(model)
            row["sparsity"] = activation_sparsity(model, wb.val.X)
            rows[label] = row
        per_seed[wb.cfg.seed] = rows
    rows = _mean_rows("activation", ["GELU", "ReLU", "ReLU + recovery"], list(per_seed.values()))
    return SuiteResult("sparsity", _columns("activation", rows, ("sparsity",)), rows, per_seed)


SUITE_FUNCS = {"metrics": suite_metrics, "alignment": suite_alignment, "lora": suite_lora,
               "sim_vs_prog": suite_sim_vs_prog, "sparsity": suite_sparsity}


def run_suite(name, benches):
    if name not in SUITE_FUNCS:
        raise KeyError(name)
    log.info("running suite %s over %d seed(s)", name, len(benches))
    return SUITE_FUNCS[name](benches)
