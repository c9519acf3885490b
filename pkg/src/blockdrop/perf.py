"""MACs accounting, forward latency benchmarking and activation sparsity.

MACs convention: a linear map ``T x d_in -> d_out`` costs ``T*d_in*d_out``;
attention adds ``T^2*d`` for the scores and ``T^2*d`` for mixing values.
Normalisations, activations, softmax and pooling cost nothing.
"""

from __future__ import annotations

import copy
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ACTIVATIONS


@dataclass
class MacsBreakdown:
    """Per-layer MACs.

    ``backbone_total`` covers only the droppable transformer blocks;
    ``head_total`` is everything else (input/output projections of the
    stack, pooling head, classification and regression branches).
    """

    layers: list = field(default_factory=list)
    backbone_total: int = 0
    head_total: int = 0

    @property
    def grand_total(self):
        return self.backbone_total + self.head_total

    @property
    def backbone_fraction(self):
        return self.backbone_total / self.grand_total if self.grand_total else 0.0

    def add(self, name, macs, backbone):
        self.layers.append((name, int(macs)))
        if backbone:
            self.backbone_total += int(macs)
        else:
            self.head_total += int(macs)

    def to_dict(self):
        return {
            "layers": [list(x) for x in self.layers],
            "backbone_total": self.backbone_total,
            "head_total": self.head_total,
            "grand_total": self.grand_total,
            "backbone_fraction": self.backbone_fraction,
        }


def linear_macs(T_len, d_in, d_out):
    return T_len * d_in * d_out


def block_macs(block, T_len, prefix, out, backbone):
    d, hidden = block.width, block.hidden
    out.add(prefix + ".qkv", 3 * linear_macs(T_len, d, d), backbone)
    out.add(prefix + ".scores", T_len * T_len * d, backbone)
    out.add(prefix + ".mix", T_len * T_len * d, backbone)
    out.add(prefix + ".out", linear_macs(T_len, d, d), backbone)
    for name, a in block.adapters.items():
        out.add(f"{prefix}.lora_{name}", 2 * linear_macs(T_len, d, a.rank), backbone)
    out.add(prefix + ".ffn_in", linear_macs(T_len, d, hidden), backbone)
    out.add(prefix + ".ffn_out", linear_macs(T_len, hidden, d), backbone)


def count_macs(model, input_shape=None):
    """Analytic MACs of one forward pass on a ``(T, d_in)`` input."""
    stack = model.backbone
    T_len = input_shape[0] if input_shape else model.seq_len
    d_in = stack.embed.weight.shape[0]
    d = stack.width
    out = MacsBreakdown()
    out.add("backbone.embed", linear_macs(T_len, d_in, d), False)
    for tag, block in zip(stack.tags, stack.blocks):
        block_macs(block, T_len, f"backbone.block{tag}", out, True)
    out.add("backbone.unembed", linear_macs(T_len, d, d), False)
    L = T_len // model.pool
    for i, block in enumerate(model.head_blocks):
        block_macs(block, L, f"head.block{i}", out, False)
    out.add("head.cls", linear_macs(L, d, model.cls.weight.shape[1]), False)
    out.add("head.reg", linear_macs(L, d, 2), False)
    return out


def _set_dtype(model, dtype):
    for p in model.parameters():
        p.data = p.data.astype(dtype)


def latency_bench(model, input_shape=None, warmup=5, reps=30, threads=1, precision="float32", seed=0):
    """Forward-only wall-clock latency at batch 1; returns mean/std in milliseconds."""
    if reps < 10:
        raise ValueError("reps must be at least 10")
    T_len, d_in = input_shape or (model.seq_len, model.backbone.embed.weight.shape[0])
    dtype = np.dtype(precision)
    bench_model = copy.deepcopy(model)
    _set_dtype(bench_model, dtype)
    x = T.Tensor(np.random.default_rng(seed).normal(size=(1, T_len, d_in)), dtype=dtype)

    from threadpoolctl import threadpool_limits

    times = []
    with threadpool_limits(limits=threads), T.no_grad():
        for _ in range(warmup):
            bench_model(x)
        for _ in range(reps):
            t0 = time.perf_counter()
            bench_model(x)
            times.append((time.perf_counter() - t0) * 1e3)
    return {
        "mean_ms": statistics.fmean(times),
        "std_ms": statistics.stdev(times),
        "reps": reps,
        "threads": threads,
        "precision": dtype.name,
    }


def bench_record(model, model_id, input_shape=None, **kw):
    res = latency_bench(model, input_shape, **kw)
    macs = count_macs(model, input_shape)
    return {"model_id": model_id, "macs": macs.grand_total, "backbone_macs": macs.backbone_total,
            "mean_ms": res["mean_ms"], "std_ms": res["std_ms"], "threads": res["threads"],
            "reps": res["reps"]}


def activation_sparsity(model, X, batch_size=32):
    """Fraction of exactly-zero entries in backbone FFN activations over ``X``."""
    counts = [0, 0]

    def observe(a):
        counts[0] += int(np.count_nonzero(a.data == 0.0))
        counts[1] += a.data.size

    with T.no_grad():
        for i in range(0, len(X), batch_size):
            model(X[i:i + batch_size], observer=observe)
    return counts[0] / counts[1] if counts[1] else 0.0


def swap_activation(model, target):
    """Copy of ``model`` with every backbone FFN activation set to ``target``."""
    if target not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}")
    clone = copy.deepcopy(model)
    for block in clone.backbone.blocks:
        block.activation = target
    return clone
