import json

import pytest

from blockdrop.compress import width_prune_baseline
from blockdrop.config import default_config, load_config, parse_config
from blockdrop.detector import Split, generate_dataset
from blockdrop.exceptions import ConfigError
from blockdrop.io import (load_checkpoint, load_dataset, read_predictions, save_checkpoint,
                          save_dataset, strip_timing, write_predictions)
from blockdrop.metrics import ActionInstance as I
from blockdrop.nn import drop_block, insert_lora
from blockdrop.perf import swap_activation

from conftest import tiny_model, tiny_task


def _bit_equal(a, b, x):
    oa, ob = a(x), b(x)
    return (oa.class_logits.data.tobytes() == ob.class_logits.data.tobytes()
            and oa.offsets.data.tobytes() == ob.offsets.data.tobytes())


@pytest.mark.parametrize("variant", ["plain", "dropped", "pruned", "relu"])
def test_checkpoint_round_trip_bit_exact(tmp_path, rng, variant):
    model = tiny_model(depth=4, width=8)
    if variant == "dropped":
        model = drop_block(drop_block(model, 1), 3)
    elif variant == "pruned":
        model = width_prune_baseline(model, 0.8)
    elif variant == "relu":
        model = swap_activation(model, "relu")
    save_checkpoint(model, tmp_path / "ck", config={"note": variant})
    loaded, manifest = load_checkpoint(tmp_path / "ck")
    assert loaded.backbone.tags == model.backbone.tags
    assert manifest["config"] == {"note": variant}
    assert _bit_equal(model, loaded, rng.normal(size=(2, 32, 6)))


def test_checkpoint_rejects_unmerged_and_missing(tmp_path):
    model = tiny_model(depth=2)
    insert_lora(model)
    with pytest.raises(ConfigError):
        save_checkpoint(model, tmp_path / "ck")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "nothing")


def test_checkpoint_bytes_deterministic(tmp_path):
    model = tiny_model(depth=2)
    save_checkpoint(model, tmp_path / "a")
    save_checkpoint(model, tmp_path / "b")
    for name in ("manifest.json", "weights.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_dataset_round_trip(tmp_path):
    task = tiny_task(num_seq=20)
    train, val = generate_dataset(task)
    splits = {"train": Split.from_sequences(train), "val": Split.from_sequences(val)}
    save_dataset(tmp_path / "d", splits, task)
    loaded, manifest = load_dataset(tmp_path / "d")
    for name, split in splits.items():
        assert loaded[name].X.tobytes() == split.X.tobytes()
        assert loaded[name].instances == split.instances
    assert manifest["task"]["num_seq"] == 20


def test_predictions_round_trip(tmp_path):
    preds = [[I(0.5, 3.25, 1, 0.9), I(4.0, 8.0, 0, 1 / 3)], [], [I(1.0, 2.0, 0, 0.1)]]
    path = tmp_path / "p.csv"
    write_predictions(path, preds)
    assert read_predictions(path) == preds
    assert read_predictions(path, n_sequences=4) == preds + [[]]
    with pytest.raises(ConfigError):
        read_predictions(path, n_sequences=2)
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        read_predictions(path)


def test_strip_timing():
    assert strip_timing({"a": 1, "timing": {"x": 2}}) == {"a": 1}


def test_config_defaults_and_round_trip():
    cfg = default_config()
    assert parse_config(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.compress_config().recover.weights == {k: 1.0 for k in ("cls", "reg", "f", "pc", "pr")}


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"train": {"lr": "fast"}},
    {"train": {"steps": 1.5}},
    {"train": {"steps": True}},
    {"task": {"seed": 3}},
    {"task": {"T": 20}},
    {"compress": {"metric_kind": "RANDOM"}},
    {"compress": {"loss_weights": {"zz": 1.0}}},
    {"model": {"depth": 0}},
    {"bench": {"reps": 5}},
])
def test_config_rejects(data):
    with pytest.raises(ConfigError):
        parse_config(data)


def test_config_int_accepted_for_float():
    assert parse_config({"train": {"lr": 1}}).train.lr == 1.0


def test_load_config_seed_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 4, "task": {"num_seq": 50}}))
    assert load_config(path).seed == 4
    cfg = load_config(path, seed=9)
    assert cfg.seed == 9 and cfg.task_config().seed == 9
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)
