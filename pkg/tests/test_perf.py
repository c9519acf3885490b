import numpy as np
import pytest

from blockdrop.config import default_config
from blockdrop.detector import DetectorModel
from blockdrop.nn import drop_block
from blockdrop.perf import (activation_sparsity, bench_record, count_macs, latency_bench,
                            linear_macs, swap_activation)

from conftest import tiny_model


def _default_model():
    cfg = default_config()
    return DetectorModel(cfg.task_config(), cfg.model, np.random.default_rng(0))


def test_linear_macs_hand_value():
    assert linear_macs(8, 4, 2) == 64


def test_block_macs_hand_value():
    model = tiny_model(depth=1, width=8)
    T_len, d, hidden = 32, 8, model.backbone.blocks[0].hidden
    expect = 4 * T_len * d * d + 2 * T_len * T_len * d + 2 * T_len * d * hidden
    assert count_macs(model).backbone_total == expect


def test_drop_scales_backbone_exactly():
    model = tiny_model(depth=12)
    base = count_macs(model)
    sub = model
    for k in range(1, 4):
        sub = drop_block(sub, sub.backbone.tags[0])
        macs = count_macs(sub)
        assert macs.backbone_total * 12 == base.backbone_total * (12 - k)
        assert macs.head_total == base.head_total
    assert count_macs(sub).backbone_total / base.backbone_total == 0.75
    assert count_macs(sub).grand_total / base.grand_total > 0.75


def test_breakdown_additive():
    macs = count_macs(tiny_model(depth=3))
    assert sum(v for _, v in macs.layers) == macs.grand_total
    back = sum(v for n, v in macs.layers if n.startswith("backbone.block"))
    assert back == macs.backbone_total
    d = macs.to_dict()
    assert d["grand_total"] == d["backbone_total"] + d["head_total"]


def test_default_backbone_fraction():
    assert count_macs(_default_model()).backbone_fraction > 0.9


def test_latency_record_and_validation():
    model = tiny_model(depth=2)
    rec = bench_record(model, "m0", reps=10, warmup=1)
    assert set(rec) == {"model_id", "macs", "backbone_macs", "mean_ms", "std_ms", "threads", "reps"}
    assert rec["mean_ms"] > 0 and rec["reps"] == 10
    assert latency_bench(model, reps=10, warmup=0)["precision"] == "float32"
    assert latency_bench(model, reps=10, warmup=0, precision="float64")["precision"] == "float64"
    with pytest.raises(ValueError):
        latency_bench(model, reps=9)


def test_empty_backbone_is_faster():
    full = tiny_model(depth=6, width=16)
    empty = tiny_model(depth=6, width=16)
    empty.backbone.blocks = []
    empty.backbone.tags = []
    assert count_macs(empty).backbone_total == 0
    t_full = latency_bench(full, reps=20, warmup=2)["mean_ms"]
    t_empty = latency_bench(empty, reps=20, warmup=2)["mean_ms"]
    assert t_empty < t_full


def test_gelu_sparsity_near_zero(tiny_splits):
    train, _ = tiny_splits
    assert activation_sparsity(tiny_model(depth=2), train.X) < 0.01


def test_relu_all_negative_is_fully_sparse(tiny_splits):
    train, _ = tiny_splits
    model = swap_activation(tiny_model(depth=2), "relu")
    for b in model.backbone.blocks:
        b.ffn_in.weight.data[:] = 0
        b.ffn_in.bias.data[:] = -1.0
    assert activation_sparsity(model, train.X) == 1.0


def test_swap_activation(rng):
    model = tiny_model(depth=2)
    x = rng.normal(size=(2, 32, 6))
    back = swap_activation(swap_activation(model, "relu"), "gelu")
    assert np.array_equal(back(x).class_logits.data, model(x).class_logits.data)
    same = swap_activation(model, "gelu")
    assert np.array_equal(same(x).class_logits.data, model(x).class_logits.data)
    relu = swap_activation(model, "relu")
    assert not np.array_equal(relu(x).class_logits.data, model(x).class_logits.data)
    assert all(b.activation == "gelu" for b in model.backbone.blocks)
    with pytest.raises(ValueError):
        swap_activation(model, "tanh")
