"""Independent reference implementations used by the tests.

Nothing here imports the code under test beyond ``Tensor`` plumbing: the
finite-difference checker perturbs raw arrays, and the metric oracles are
written from their textbook definitions in plain Python.
"""

import itertools

import numpy as np

from blockdrop.tensor import Tensor


# ---------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------
def numeric_grad(f, params, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p.data[i]
            p.data[i] = old + h
            up = f().item()
            p.data[i] = old - h
            down = f().item()
            p.data[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def autodiff_grad(f, params):
    for p in params:
        p.grad = None
        p.requires_grad = True
    f().backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def max_rel_error(f, params, h=1e-5):
    """Largest norm-wise relative error ``|a-n|_inf / max(|a|_inf, |n|_inf)`` over params."""
    worst = 0.0
    for a, n in zip(autodiff_grad(f, params), numeric_grad(f, params, h)):
        scale = max(np.abs(a).max(), np.abs(n).max(), 1e-10)
        worst = max(worst, float(np.abs(a - n).max() / scale))
    return worst


def leaf(rng, *shape, low=None):
    data = rng.normal(size=shape)
    if low is not None:
        data = np.abs(data) + low
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------
# interval metrics
# ---------------------------------------------------------------------
def ref_tiou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def ref_giou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    hull = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union - (hull - union) / hull


def ref_nms(dets, thr):
    """Exhaustive greedy NMS: ``dets`` are (start, end, cls, score) tuples.

    Repeatedly takes the highest remaining score (earliest input position on
    ties), then discards every same-class survivor overlapping it by > thr.
    """
    remaining = list(enumerate(dets))
    kept = []
    while remaining:
        best = max(remaining, key=lambda x: (x[1][3], -x[0]))
        kept.append(best)
        remaining = [r for r in remaining if r is not best and not (
            r[1][2] == best[1][2] and ref_tiou(r[1][:2], best[1][:2]) > thr)]
    return [d for _, d in kept]


def ref_ap(preds, gts, thr):
    """Single-class AP from an explicit PR curve with the precision envelope.

    ``preds``: (seq, start, end, score); ``gts``: (seq, start, end).
    Greedy by score; each prediction takes the best-overlapping unmatched GT
    in its sequence when that overlap reaches ``thr``.
    """
    if not gts:
        return float("nan")
    order = sorted(range(len(preds)), key=lambda i: -preds[i][3])
    used = set()
    tps = []
    for i in order:
        seq, s, e, _ = preds[i]
        best, best_j = -1.0, None
        for j, (gs, a, b) in enumerate(gts):
            if gs != seq or j in used:
                continue
            o = ref_tiou((s, e), (a, b))
            if o > best:
                best, best_j = o, j
        if best_j is not None and best >= thr:
            used.add(best_j)
            tps.append(1)
        else:
            tps.append(0)
    recall, precision = [0.0], [1.0]
    tp = 0
    for k, t in enumerate(tps, 1):
        tp += t
        recall.append(tp / len(gts))
        precision.append(tp / k)
    # envelope: precision at recall r is the max precision at any recall >= r
    ap = 0.0
    for k in range(1, len(recall)):
        if recall[k] > recall[k - 1]:
            ap += (recall[k] - recall[k - 1]) * max(precision[k:])
    return ap


def brute_force_subsets(n):
    return [c for r in range(n + 1) for c in itertools.combinations(range(n), r)]
