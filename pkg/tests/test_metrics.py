import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockdrop.exceptions import ContractError
from blockdrop.metrics import (THUMOS_TIOUS, ActionInstance, EvalConfig, average_precision,
                               giou_1d, map_at, mean_map, nms, per_class_ap, tiou)

from oracles import ref_ap, ref_giou, ref_nms, ref_tiou

I = ActionInstance


def test_tiou_examples():
    assert tiou((0, 10), (0, 10)) == 1.0
    assert tiou((0, 1), (2, 3)) == 0.0
    assert tiou((0, 10), (5, 15)) == pytest.approx(1 / 3, abs=1e-15)
    with pytest.raises(ContractError):
        tiou((1, 1), (0, 2))


def test_giou_examples():
    assert giou_1d((0, 1), (0, 1)) == 1.0
    assert giou_1d((0, 1), (2, 3)) == pytest.approx(-1 / 3, abs=1e-15)
    assert giou_1d((0, 1), (1, 2)) == 0.0
    with pytest.raises(ContractError):
        giou_1d((2, 1), (0, 2))


interval = st.tuples(st.integers(0, 40), st.integers(1, 20)).map(lambda p: (p[0], p[0] + p[1]))


@settings(max_examples=200, deadline=None)
@given(interval, interval)
def test_iou_properties(a, b):
    t, g = tiou(a, b), giou_1d(a, b)
    assert t == tiou(b, a) and g == giou_1d(b, a)
    assert t == ref_tiou(a, b) and g == ref_giou(a, b)
    assert g <= t + 1e-15 and -1 < g <= 1 and 0 <= t <= 1
    assert (t == 1.0) == (a == b) == (g == 1.0)


def test_nms_examples():
    assert nms([], 0.5) == []
    kept = nms([I(0, 5, 0, 0.8), I(0, 5, 0, 0.9)], 0.5)
    assert kept == [I(0, 5, 0, 0.9)]
    # other classes never suppress
    assert len(nms([I(0, 5, 0, 0.8), I(0, 5, 1, 0.9)], 0.5)) == 2


def _random_dets(rng, n, n_classes=3, grid=True):
    out = []
    for _ in range(n):
        s = rng.randint(0, 30)
        e = s + rng.randint(1, 12)
        score = rng.randint(1, 5) / 5 if grid else rng.random()
        out.append((float(s), float(e), rng.randrange(n_classes), score))
    return out


def test_nms_matches_exhaustive_reference():
    rng = random.Random(0)
    for _ in range(1000):
        dets = _random_dets(rng, rng.randint(0, 12))
        thr = rng.choice([0.3, 0.5, 0.7])
        got = [(i.start, i.end, i.class_id, i.score) for i in nms([I(*d) for d in dets], thr)]
        assert got == ref_nms(dets, thr)
    dets = _random_dets(rng, 50)
    got = [(i.start, i.end, i.class_id, i.score) for i in nms([I(*d) for d in dets], 0.5)]
    assert got == ref_nms(dets, 0.5)


def test_ap_examples():
    gt = [I(0, 10, 0)]
    assert average_precision([I(0, 10, 0, 0.9)], gt, 0.5) == 1.0
    assert average_precision([], gt, 0.5) == 0.0
    gts = [I(0, 10, 0), I(20, 30, 0)]
    preds = [I(0, 10, 0, 0.9), I(40, 50, 0, 0.8), I(20, 30, 0, 0.7)]
    assert average_precision(preds, gts, 0.5) == pytest.approx(5 / 6, abs=1e-15)
    assert math.isnan(average_precision(preds, [], 0.5))


def test_ap_matches_hand_pr_curve_oracle():
    rng = random.Random(1)
    for _ in range(1000):
        n_seq = rng.randint(1, 3)
        gts = [(rng.randrange(n_seq), *_random_dets(rng, 1, 1)[0][:2]) for _ in range(rng.randint(1, 5))]
        preds = []
        for _ in range(rng.randint(0, 8)):
            s, e, _, score = _random_dets(rng, 1, 1, grid=False)[0]
            preds.append((rng.randrange(n_seq), s, e, score))
        thr = rng.choice(THUMOS_TIOUS)
        P = [(sid, I(s, e, 0, sc)) for sid, s, e, sc in preds]
        G = [(sid, I(s, e, 0)) for sid, s, e in gts]
        assert abs(average_precision(P, G, thr) - ref_ap(preds, gts, thr)) < 1e-12


def _dataset(rng, n_seq=5, n_classes=3):
    gts, preds = [], []
    for _ in range(n_seq):
        g = [I(s, e, c) for s, e, c, _ in _random_dets(rng, rng.randint(1, 3), n_classes)]
        p = [I(s, e, c, sc) for s, e, c, sc in _random_dets(rng, rng.randint(0, 6), n_classes, False)]
        p += [I(x.start, x.end, x.class_id, rng.random()) for x in g if rng.random() < 0.6]
        gts.append(g)
        preds.append(p)
    return preds, gts


def test_ap_order_and_monotone_score_invariance():
    rng = random.Random(2)
    for _ in range(50):
        preds, gts = _dataset(rng)
        base = mean_map(preds, gts)
        shuffled = [rng.sample(p, len(p)) for p in preds]
        assert mean_map(shuffled, gts)["per_threshold"] == base["per_threshold"]
        rescaled = [[I(x.start, x.end, x.class_id, x.score ** 3 / 7) for x in p] for p in preds]
        assert mean_map(rescaled, gts)["per_threshold"] == base["per_threshold"]


def test_mean_map_perfect_and_thumos_middle():
    rng = random.Random(3)
    _, gts = _dataset(rng)
    res = mean_map([[I(g.start, g.end, g.class_id, 1.0) for g in seq] for seq in gts], gts)
    assert res["per_threshold"] == [1.0] * 5 and res["average"] == 1.0
    cfg = EvalConfig()
    assert cfg.tiou_thresholds[len(cfg.tiou_thresholds) // 2] == 0.5
    assert map_at(res, 0.5) == 1.0


def test_mean_map_class_additivity():
    rng = random.Random(4)
    pa, ga = _dataset(rng, n_classes=2)
    pb, gb = _dataset(rng, n_classes=2)
    shift = lambda seqs: [[I(x.start, x.end, x.class_id + 2, x.score) for x in s] for s in seqs]
    pb, gb = shift(pb), shift(gb)
    union_p, union_g = pa + pb, ga + gb
    for thr in THUMOS_TIOUS:
        aps = {**per_class_ap(pa, ga, thr), **per_class_ap(pb, gb, thr)}
        full = mean_map(union_p, union_g, EvalConfig((thr,)))["per_threshold"][0]
        assert full == pytest.approx(np.mean(list(aps.values())), abs=1e-12)


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig((0.5, 0.3))
    with pytest.raises(ValueError):
        EvalConfig((0.0, 0.5))


def test_instance_contract():
    with pytest.raises(ContractError):
        I(3, 3, 0)
