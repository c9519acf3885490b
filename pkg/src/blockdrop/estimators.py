"""Scikit-learn style wrappers around the detector and the compression loop."""

from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .compress import (CompressConfig, RecoverConfig, TeacherOutputs, evaluate_subnets,
                       enumerate_subnets, format_drop_order, progressive_drop)
from .detector import (DetectorModel, ModelConfig, Split, TaskConfig, predict_instances,
                       tad_loss)
from .metrics import THUMOS_TIOUS, EvalConfig, map_at, mean_map
from .nn import plant_identity_blocks
from .optim import run_optimisation
from .validation import check_instances, check_sequences, infer_num_classes


def train_detector(model, split, steps, lr, batch_size=16, seed=0, warmup=20, focal=False):
    """Fit every parameter of ``model`` on ``split`` with the task losses."""
    targets = split.targets(model.num_classes, model.pool)

    def loss_fn(idx):
        L_cls, L_reg = tad_loss(model(split.X[idx]), targets.subset(idx), focal)
        return L_cls + L_reg

    model.set_trainable(True)
    return run_optimisation(model.parameters(), loss_fn, len(split), steps, lr, batch_size,
                            np.random.default_rng([seed, 2]), warmup=warmup)


class TemporalActionDetector(BaseEstimator):
    """Transformer temporal action detector with a droppable backbone.

    ``fit`` takes sequences ``X`` of shape ``[N, T, d_in]`` and, per sequence,
    a list of ground-truth ``(start, end, class_id)`` instances. ``predict``
    returns scored ``ActionInstance`` lists; ``score`` is mAP at ``score_tiou``.
    """

    def __init__(self, depth=12, width=32, heads=2, head_depth=2, pool=8, activation="gelu",
                 planted_blocks=(), num_classes=None, lr=3e-3, steps=2400, batch_size=16,
                 warmup=20, focal=False, tiou_thresholds=THUMOS_TIOUS, nms_tiou=0.5,
                 score_thr=0.05, max_dets=50, score_tiou=0.5, random_state=0):
        self.depth = depth
        self.width = width
        self.heads = heads
        self.head_depth = head_depth
        self.pool = pool
        self.activation = activation
        self.planted_blocks = planted_blocks
        self.num_classes = num_classes
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.warmup = warmup
        self.focal = focal
        self.tiou_thresholds = tiou_thresholds
        self.nms_tiou = nms_tiou
        self.score_thr = score_thr
        self.max_dets = max_dets
        self.score_tiou = score_tiou
        self.random_state = random_state

    def _model_config(self):
        return ModelConfig(self.depth, self.width, self.heads, self.head_depth, self.pool,
                           self.activation, list(self.planted_blocks))

    def eval_config(self):
        return EvalConfig(tuple(self.tiou_thresholds), self.nms_tiou, self.score_thr, self.max_dets)

    def fit(self, X, y):
        X = check_sequences(X)
        y = check_instances(y, len(X), self.num_classes)
        n_classes = self.num_classes or infer_num_classes(y)
        task = TaskConfig(num_seq=len(X), T=X.shape[1], d_in=X.shape[2], num_classes=n_classes)
        cfg = self._model_config().validate()
        rng = np.random.default_rng([self.random_state, 3])
        model = DetectorModel(task, cfg, rng, depth=cfg.depth - len(cfg.planted_blocks))
        self.loss_curve_ = train_detector(model, Split(X, y), self.steps, self.lr, self.batch_size,
                                          self.random_state, self.warmup, self.focal)
        if cfg.planted_blocks:
            plant_identity_blocks(model, cfg.planted_blocks, np.random.default_rng([self.random_state, 4]))
        self._set_model(model)
        return self

    def _set_model(self, model):
        self.model_ = model
        self.n_features_in_ = model.backbone.embed.weight.shape[0]
        self.seq_len_ = model.seq_len
        self.classes_ = np.arange(model.num_classes)

    @classmethod
    def from_model(cls, model, **params):
        """Wrap an already trained ``DetectorModel``."""
        est = cls(**params)
        est._set_model(model)
        return est

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_sequences(X, self.seq_len_, self.n_features_in_)
        return predict_instances(self.model_, X, self.eval_config())

    def evaluate(self, X, y):
        """Full ``mean_map`` result over the configured thresholds."""
        preds = self.predict(X)
        return mean_map(preds, check_instances(y, len(preds)), self.eval_config())

    def score(self, X, y):
        return map_at(self.evaluate(X, y), self.score_tiou)


class BlockDropCompressor(BaseEstimator):
    """Progressive block drop of a fitted ``TemporalActionDetector``.

    Each iteration scores every single-block-removed subnet on the training
    data, keeps the best one and recovers it with LoRA adapters aligned to the
    uncompressed model. ``estimator_`` holds the compressed detector and
    ``reports_`` the per-iteration logs.
    """

    def __init__(self, estimator=None, metric="TRAIN_MAP", epsilon=0.0, max_drops=3,
                 rank_ratio=0.25, lr=3e-3, recovery_steps=150, batch_size=16,
                 freeze_head=False, full_ft=False, loss_weights=None, random_state=0):
        self.estimator = estimator
        self.metric = metric
        self.epsilon = epsilon
        self.max_drops = max_drops
        self.rank_ratio = rank_ratio
        self.lr = lr
        self.recovery_steps = recovery_steps
        self.batch_size = batch_size
        self.freeze_head = freeze_head
        self.full_ft = full_ft
        self.loss_weights = loss_weights
        self.random_state = random_state

    def compress_config(self):
        weights = {"pc": 1.0, "pr": 1.0, "f": 1.0, "cls": 1.0, "reg": 1.0}
        weights.update(self.loss_weights or {})
        rec = RecoverConfig(lr=self.lr, steps=self.recovery_steps, batch_size=self.batch_size,
                            rank_ratio=self.rank_ratio, freeze_head=self.freeze_head,
                            full_ft=self.full_ft, weights=weights, seed=self.random_state)
        eval_cfg = self.estimator.eval_config() if self.estimator is not None else EvalConfig()
        return CompressConfig(self.metric, self.epsilon, self.max_drops, rec, eval_cfg,
                              getattr(self.estimator, "score_tiou", 0.5))

    def _splits(self, X, y, X_val, y_val):
        check_is_fitted(self.estimator, "model_")
        est = self.estimator
        X = check_sequences(X, est.seq_len_, est.n_features_in_)
        train = Split(X, check_instances(y, len(X)))
        if X_val is None:
            return train, train
        X_val = check_sequences(X_val, est.seq_len_, est.n_features_in_)
        return train, Split(X_val, check_instances(y_val, len(X_val)))

    def fit(self, X, y, X_val=None, y_val=None):
        train, val = self._splits(X, y, X_val, y_val)
        m0 = self.estimator.model_
        self.teacher_ = TeacherOutputs(m0, train)
        model, reports = progressive_drop(m0, train, val, self.compress_config(), self.teacher_)
        est = copy.copy(self.estimator)
        est._set_model(model)
        self.estimator_ = est
        self.reports_ = reports
        self.drop_order_ = [r.chosen_block for r in reports if r.accepted]
        return self

    def score_candidates(self, X, y):
        """Importance of every block of the uncompressed model (no dropping)."""
        train, _ = self._splits(X, y, None, None)
        m0 = self.estimator.model_
        teacher = TeacherOutputs(m0, train)
        cfg = self.compress_config()
        return evaluate_subnets(enumerate_subnets(m0), train, self.metric, teacher, cfg.eval,
                                parent=m0, weights=cfg.recover.weights)

    @property
    def drop_order_string_(self):
        check_is_fitted(self, "drop_order_")
        return format_drop_order(self.drop_order_)

    def predict(self, X):
        check_is_fitted(self, "estimator_")
        return self.estimator_.predict(X)

    def score(self, X, y):
        check_is_fitted(self, "estimator_")
        return self.estimator_.score(X, y)
