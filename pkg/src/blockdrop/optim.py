"""Adam and a minibatch optimisation loop shared by baseline training and recovery."""

from __future__ import annotations

import math

import numpy as np

from .exceptions import TrainingError

DIVERGENCE_LIMIT = 1e6


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def cosine_lr(base, step, steps, warmup=0):
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(1, steps - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))


def run_optimisation(params, loss_fn, n_items, steps, lr, batch_size, rng,
                     clip_norm=1.0, warmup=0, schedule="cosine"):
    """Minimise ``loss_fn(batch_indices)`` with Adam over shuffled minibatches.

    Returns the per-step loss curve. Raises ``TrainingError`` on a non-finite or
    exploding loss.
    """
    opt = Adam(params, lr=lr)
    curve = []
    order = np.array([], dtype=np.int64)
    for step in range(steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(n_items)])
        idx, order = np.sort(order[:batch_size]), order[batch_size:]
        loss = loss_fn(idx)
        value = loss.item()
        if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
            raise TrainingError(f"loss diverged ({value}) at step {step}", step=step)
        opt.zero_grad()
        loss.backward()
        if clip_norm:
            clip_grad_norm(opt.params, clip_norm)
        step_lr = cosine_lr(lr, step, steps, warmup) if schedule == "cosine" else lr
        opt.step(step_lr)
        curve.append(value)
    opt.zero_grad()
    return curve
