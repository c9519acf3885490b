"""On-disk formats: checkpoints, datasets, prediction dumps and drop reports.

Checkpoints and datasets share one layout: ``manifest.json`` listing every
array (name, shape, dtype, byte offset) plus a single raw little-endian
float64 blob. Everything else (identity tags, configs, instances) lives in
the manifest.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .detector import DetectorModel, ModelConfig, Split, TaskConfig
from .exceptions import ConfigError
from .metrics import ActionInstance
from .tensor import Tensor

MANIFEST = "manifest.json"
BLOB = "weights.bin"
DATA_BLOB = "features.bin"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def dump_json(obj, path):
    """Deterministic JSON: sorted keys, fixed indent, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------
# manifest + blob
# ---------------------------------------------------------------------
def write_arrays(directory, arrays, blob_name, meta):
    """Write ``{name: array}`` into one blob and return the manifest dict."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / blob_name, "wb") as fh:
        for name, arr in arrays.items():
            buf = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
            entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": _DTYPE.str,
                            "offset": offset})
            fh.write(buf)
            offset += len(buf)
    manifest = dict(meta, format_version=FORMAT_VERSION, blob=blob_name, tensors=entries)
    dump_json(manifest, directory / MANIFEST)
    return manifest


def read_arrays(directory, names=None):
    """Return ``(manifest, {name: array})``; ``names`` limits what is read."""
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise ConfigError(f"no {MANIFEST} in {directory}")
    manifest = load_json(path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported format version {manifest.get('format_version')}")
    arrays = {}
    with open(directory / manifest["blob"], "rb") as fh:
        for entry in manifest["tensors"]:
            if names is not None and entry["name"] not in names:
                continue
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"], dtype=np.int64))
            fh.seek(entry["offset"])
            data = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
            arrays[entry["name"]] = data.astype(np.float64).reshape(entry["shape"])
    return manifest, arrays


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------
def model_spec(model):
    """Architecture description sufficient to rebuild ``model``."""
    stack = model.backbone
    head = model.head_blocks[0] if model.head_blocks else None
    return {
        "seq_len": model.seq_len,
        "d_in": stack.embed.weight.shape[0],
        "num_classes": model.num_classes,
        "width": stack.width,
        "heads": (stack.blocks[0] if stack.blocks else head).heads,
        "head_depth": len(model.head_blocks),
        "pool": model.pool,
        "tags": list(stack.tags),
        "activations": [b.activation for b in stack.blocks],
        "hidden": [b.hidden for b in stack.blocks],
    }


def save_checkpoint(model, directory, config=None, extra=None):
    """Persist ``model`` (adapters must already be merged)."""
    if any(b.adapters for b in model.backbone.blocks):
        raise ConfigError("merge LoRA adapters before saving a checkpoint")
    meta = {"kind": "checkpoint", "model": model_spec(model), "config": config or {}}
    if extra:
        meta["extra"] = extra
    return write_arrays(directory, model.state_dict(), BLOB, meta)


def _resize(block, hidden):
    if block.hidden == hidden:
        return
    d = block.width
    block.ffn_in.weight = Tensor(np.zeros((d, hidden)), requires_grad=True)
    block.ffn_in.bias = Tensor(np.zeros(hidden), requires_grad=True)
    block.ffn_out.weight = Tensor(np.zeros((hidden, d)), requires_grad=True)


def load_checkpoint(directory):
    """Return ``(model, manifest)``; outputs match the saved model bit for bit."""
    manifest, arrays = read_arrays(directory)
    if manifest.get("kind") != "checkpoint":
        raise ConfigError(f"{directory} is not a checkpoint")
    spec = manifest["model"]
    task = TaskConfig(num_seq=2, T=spec["seq_len"], d_in=spec["d_in"],
                      num_classes=spec["num_classes"])
    cfg = ModelConfig(depth=max(1, len(spec["tags"])), width=spec["width"], heads=spec["heads"],
                      head_depth=spec["head_depth"], pool=spec["pool"])
    model = DetectorModel(task, cfg, np.random.default_rng(0))
    stack = model.backbone
    stack.tags = list(spec["tags"])
    for block, act, hidden in zip(stack.blocks, spec["activations"], spec["hidden"]):
        block.activation = act
        _resize(block, hidden)
    model.load_state_dict(arrays)
    return model, manifest


# ---------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------
def _instances_to_json(instances):
    return [[[i.start, i.end, i.class_id] for i in seq] for seq in instances]


def _instances_from_json(rows):
    return [[ActionInstance(float(s), float(e), int(c)) for s, e, c in seq] for seq in rows]


def save_dataset(directory, splits, task=None):
    """Persist named ``Split`` objects (e.g. ``{"train": ..., "val": ...}``)."""
    arrays = {f"{name}/X": split.X for name, split in splits.items()}
    meta = {"kind": "dataset", "task": dict(vars(task)) if task is not None else {},
            "instances": {name: _instances_to_json(split.instances) for name, split in splits.items()}}
    return write_arrays(directory, arrays, DATA_BLOB, meta)


def load_dataset(directory):
    """Return ``({name: Split}, manifest)``."""
    manifest, arrays = read_arrays(directory)
    if manifest.get("kind") != "dataset":
        raise ConfigError(f"{directory} is not a dataset")
    splits = {name: Split(arrays[f"{name}/X"], _instances_from_json(rows))
              for name, rows in manifest["instances"].items()}
    return splits, manifest


# ---------------------------------------------------------------------
# CSV dumps
# ---------------------------------------------------------------------
PREDICTION_FIELDS = ("sequence_id", "start", "end", "class_id", "score")
REPORT_FIELDS = ("iteration", "chosen_block", "metric", "pre_map", "post_map", "macs", "macs_ratio")


def write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_predictions(path, predictions):
    """One row per detection; ``predictions`` is a list (per sequence) of instance lists."""
    rows = ((sid, p.start, p.end, p.class_id, p.score)
            for sid, seq in enumerate(predictions) for p in seq)
    write_csv(path, PREDICTION_FIELDS, rows)


def read_predictions(path, n_sequences=None):
    """Inverse of ``write_predictions``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PREDICTION_FIELDS:
            raise ConfigError(f"{path}: expected header {','.join(PREDICTION_FIELDS)}")
        rows = [(int(r["sequence_id"]), ActionInstance(float(r["start"]), float(r["end"]),
                                                       int(r["class_id"]), float(r["score"])))
                for r in reader]
    n = n_sequences if n_sequences is not None else (max((s for s, _ in rows), default=-1) + 1)
    out = [[] for _ in range(n)]
    for sid, inst in rows:
        if not 0 <= sid < n:
            raise ConfigError(f"{path}: sequence_id {sid} out of range")
        out[sid].append(inst)
    return out


def write_reports(directory, reports, base_map, extra=None):
    """``report.json`` (full logs, wall-clock under ``timing``) and flat ``report.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    its = []
    for r in reports:
        d = r.to_dict()
        d.pop("recovery_seconds")
        its.append(d)
    doc = {"base_map": base_map, "iterations": its,
           "drop_order": [r.chosen_block for r in reports if r.accepted],
           "timing": {"recovery_seconds": [r.recovery_seconds for r in reports]}}
    if extra:
        doc.update(extra)
    dump_json(doc, directory / "report.json")
    write_csv(directory / "report.csv", REPORT_FIELDS,
              ((r.iteration, r.chosen_block, r.metric_kind, r.pre_map, r.post_map,
                r.backbone_macs, r.macs_ratio) for r in reports))
    return doc


def strip_timing(doc):
    """Drop wall-clock fields so two runs can be compared byte for byte."""
    return {k: v for k, v in doc.items() if k != "timing"}


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
