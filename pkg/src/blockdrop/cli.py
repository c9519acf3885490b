"""``blockdrop`` command-line entry point.

Subcommands: ``train``, ``compress``, ``evaluate``, ``bench``, ``ablate``.
Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
Logs go to standard error; results only to files under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import experiments as ex
from .compress import evaluate_map, progressive_drop
from .config import RunConfig, load_config, parse_config
from .detector import predict_instances
from .exceptions import ConfigError, NumericError, TrainingError
from .io import (dump_json, ensure_dir, load_checkpoint, load_dataset, read_predictions,
                 save_checkpoint, save_dataset, write_predictions, write_reports)
from .metrics import map_at, mean_map
from .perf import bench_record, count_macs

log = logging.getLogger("blockdrop")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------
def _config(args):
    if args.config:
        return load_config(args.config, args.seed)
    cfg = RunConfig().validate()
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _arch(cfg):
    """The checkpoint-relevant part of a config."""
    d = cfg.to_dict()
    return {"seed": d["seed"], "task": cfg.task_config().__dict__, "model": d["model"]}


def _check_matches(cfg, manifest):
    saved = manifest.get("config", {})
    want = _arch(cfg)
    for key in ("task", "model"):
        if key in saved and saved[key] != _json_roundtrip(want[key]):
            raise ConfigError(f"checkpoint {key} config does not match --config")


def _json_roundtrip(obj):
    return json.loads(json.dumps(obj))


def _load_ckpt(path):
    if not path:
        raise UsageError("--ckpt is required")
    return load_checkpoint(path)


def _config_for_ckpt(args, manifest):
    """``--config`` if given, otherwise the config recorded in the checkpoint."""
    if args.config:
        cfg = load_config(args.config, args.seed)
        _check_matches(cfg, manifest)
        return cfg
    saved = manifest.get("config", {}).get("run")
    if saved is None:
        raise UsageError("checkpoint has no embedded config; pass --config")
    cfg = parse_config(saved)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


# ---------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------
def cmd_train(args):
    cfg = _config(args)
    out = ensure_dir(args.out)
    t0 = time.perf_counter()
    train, val = ex.make_splits(cfg)
    est = ex.make_detector(cfg).fit(train.X, train.instances)
    model = est.model_
    config_doc = dict(_arch(cfg), run=cfg.to_dict())
    save_checkpoint(model, out / "checkpoint", config=config_doc)
    save_dataset(out / "data", {"train": train, "val": val}, cfg.task_config())
    dump_json(cfg.to_dict(), out / "config.json")
    metrics = {"split": "val", **ex.metrics_summary(model, val, cfg.eval_config()),
               "final_train_loss": float(est.loss_curve_[-1]) if len(est.loss_curve_) else None,
               "backbone_macs": count_macs(model).backbone_total,
               "timing": {"train_seconds": time.perf_counter() - t0}}
    dump_json(metrics, out / "metrics.json")
    log.info("val mAP@%g = %.4f", cfg.eval.report_tiou, metrics["map"][f"{cfg.eval.report_tiou:g}"])
    return EXIT_OK


def cmd_compress(args):
    model, manifest = _load_ckpt(args.ckpt)
    cfg = _config_for_ckpt(args, manifest)
    out = ensure_dir(args.out)
    train, val = ex.make_splits(cfg)
    config_doc = dict(_arch(cfg), run=cfg.to_dict())

    def on_iteration(report, recovered):
        save_checkpoint(recovered, out / f"iter{report.iteration}", config=config_doc,
                        extra={"drop_order": report.drop_order, "accepted": report.accepted})

    final, reports = progressive_drop(model, train, val, cfg.compress_config(),
                                      on_iteration=on_iteration)
    save_checkpoint(final, out / "checkpoint", config=config_doc,
                    extra={"drop_order": [r.chosen_block for r in reports if r.accepted]})
    base = map_at(evaluate_map(model, val, cfg.eval_config()), cfg.eval.report_tiou)
    write_reports(out, reports, base,
                  extra={"final": ex.metrics_summary(final, val, cfg.eval_config()),
                         "base_backbone_macs": count_macs(model).backbone_total})
    log.info("drop order %s", [r.chosen_block for r in reports if r.accepted])
    return EXIT_OK


def _eval_split(args, manifest):
    if args.data:
        splits, _ = load_dataset(args.data)
        if args.split not in splits:
            raise UsageError(f"dataset has no split {args.split!r} (has {sorted(splits)})")
        return splits[args.split]
    cfg = _config_for_ckpt(args, manifest)
    train, val = ex.make_splits(cfg)
    return {"train": train, "val": val}[args.split]


def cmd_evaluate(args):
    out = ensure_dir(args.out)
    if args.predictions:
        if not args.data:
            raise UsageError("--predictions needs --data")
        split = _eval_split(args, {})
        preds = read_predictions(args.predictions, len(split))
        cfg = load_config(args.config, args.seed) if args.config else RunConfig().validate()
    else:
        model, manifest = _load_ckpt(args.ckpt)
        split = _eval_split(args, manifest)
        cfg = _config_for_ckpt(args, manifest) if (args.config or "run" in manifest.get(
            "config", {})) else RunConfig().validate()
        preds = predict_instances(model, split.X, cfg.eval_config())
        write_predictions(out / "predictions.csv", preds)
    res = mean_map(preds, split.instances, cfg.eval_config())
    doc = {"split": args.split, "tiou_thresholds": res["thresholds"],
           "map": {f"{t:g}": v for t, v in zip(res["thresholds"], res["per_threshold"])},
           "average_map": res["average"]}
    dump_json(doc, out / "metrics.json")
    return EXIT_OK


def cmd_bench(args):
    model, manifest = _load_ckpt(args.ckpt)
    cfg = _config_for_ckpt(args, manifest) if (args.config or "run" in manifest.get(
        "config", {})) else RunConfig().validate()
    shape = None
    if args.shape:
        try:
            shape = tuple(int(v) for v in args.shape.split(","))
        except ValueError:
            raise UsageError("--shape must look like T,d_in") from None
        if len(shape) != 2 or shape[1] != model.backbone.embed.weight.shape[0] or shape[0] > model.seq_len:
            raise UsageError(f"--shape {args.shape} does not fit the model")
    reps = args.reps or cfg.bench.reps
    record = bench_record(model, args.model_id or Path(args.ckpt).name, shape,
                          warmup=cfg.bench.warmup, reps=reps, threads=args.threads,
                          precision=cfg.bench.precision, seed=cfg.seed)
    dump_json(record, ensure_dir(args.out) / "bench.json")
    return EXIT_OK


def cmd_ablate(args):
    if args.suite not in ex.SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(ex.SUITES)}")
    out = ensure_dir(args.out)
    if args.ckpt:
        model, manifest = load_checkpoint(args.ckpt)
        cfg = _config_for_ckpt(args, manifest)
        benches = [ex.Workbench.build(cfg, model)]
    else:
        cfg = _config(args)
        seeds = [args.seed] if args.seed is not None else cfg.ablate.seeds
        benches = [ex.Workbench.build(cfg.with_seed(s)) for s in seeds]
    result = ex.run_suite(args.suite, benches)
    result.write(out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "compress": cmd_compress, "evaluate": cmd_evaluate,
            "bench": cmd_bench, "ablate": cmd_ablate}


# ---------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--ckpt", help="checkpoint directory")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP thread limit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="blockdrop",
                                     description="Progressive block drop for temporal action detectors.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the baseline detector")
    sub.add_parser("compress", parents=[common], help="progressive block drop of a checkpoint")
    p = sub.add_parser("evaluate", parents=[common], help="mAP of a checkpoint or prediction CSV")
    p.add_argument("--data", help="dataset directory written by train")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--predictions", help="prediction CSV to score instead of running a model")
    p = sub.add_parser("bench", parents=[common], help="MACs and forward latency")
    p.add_argument("--shape", help="input shape T,d_in (default: the training shape)")
    p.add_argument("--reps", type=int)
    p.add_argument("--model-id")
    p = sub.add_parser("ablate", parents=[common], help="run an ablation suite")
    p.add_argument("suite", help="one of: " + ", ".join(ex.SUITES))
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be positive")
    from threadpoolctl import threadpool_limits

    limit = threadpool_limits(limits=args.threads)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, FileNotFoundError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (TrainingError, NumericError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    finally:
        limit.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
