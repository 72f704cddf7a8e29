"""Command-line experiment runner.

    permprune calibrate --config exp.cfg
    permprune train     --config exp.cfg [--seed N] [--out DIR] [--format json|csv]
    permprune prune     --checkpoint DIR/checkpoint.json [--out DIR]
    permprune eval      --checkpoint DIR/checkpoint.json
    permprune verify

Exit codes: 0 success, 1 verification or runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, ExperimentConfig, describe, parse_config
from .linalg import ShapeError
from .permnet import WEIGHT_NAMES
from .sparsity import retained_saliency, saliency
from .toymodel import gen_task, planted_model
from .trainer import (
    TrainingError,
    calibrate_act_norms,
    evaluate,
    hard_perms,
    inference_prune,
    init_costs,
    magnitude_specs,
    nm_violations,
    train_loop,
)
from .verify import run_suites

log = logging.getLogger("permprune")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

REPORT_FIELDS = ("epoch", "eps", "loss_total", "loss_task", "loss_distill", "eval_loss", "eval_acc",
                 "retained_saliency", "seconds")


class UsageError(Exception):
    pass


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise UsageError("--config is required")
    try:
        data = Path(args.config).read_bytes()
    except OSError as err:
        raise UsageError(f"cannot read config {args.config}: {err}") from None
    cfg = parse_config(data, seed=args.seed)
    overrides = {"out_dir": args.out, "report_format": getattr(args, "format", None)}
    return cfg.with_overrides(**overrides)


def _specs(cfg: ExperimentConfig, model, train):
    if cfg.saliency == "wanda":
        return calibrate_act_norms(model, train.x)
    return magnitude_specs(model)


def report_bytes(rows: list[dict], fmt: str) -> bytes:
    if fmt == "json":
        return ckpt.dumps_json({"records": [{k: r[k] for k in REPORT_FIELDS} for r in rows]})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for r in rows:
        writer.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in REPORT_FIELDS])
    return buf.getvalue().encode()


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    model = planted_model(cfg.task())
    train, _ = gen_task(cfg.task(), model)
    specs = calibrate_act_norms(model, train.x)
    out = Path(cfg.out_dir)
    payload = {
        f"b{b}.{name}": [float(v) for v in s[name].act_norms]
        for b, s in enumerate(specs) for name in WEIGHT_NAMES
    }
    ckpt.atomic_write(out / "calibration.json", ckpt.dumps_json({"act_norms": payload,
                                                                 "config_digest": cfg.digest()}))
    print(f"wrote {out / 'calibration.json'} ({len(payload)} layers, {len(train)} samples)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    task = cfg.task()
    model = planted_model(task)
    train, evals = gen_task(task, model)
    specs = _specs(cfg, model, train)
    tcfg = cfg.train_config()
    params, report = train_loop(model, train, evals, tcfg, specs, timed=cfg.report_wall_time)
    out = Path(cfg.out_dir)
    fmt = cfg.report_format
    ckpt.atomic_write(out / f"report.{fmt}", report_bytes(report.as_rows(), fmt))
    ckpt.save(ckpt.training_checkpoint(params, hard_perms(params, model), cfg), out / "checkpoint")
    first, last = report.records[0], report.records[-1]
    print(f"epoch 0 eval_loss {first.eval_loss:.5f} acc {first.eval_acc:.4f} -> "
          f"epoch {last.epoch} eval_loss {last.eval_loss:.5f} acc {last.eval_acc:.4f}")
    print(f"wrote {out / ('report.' + fmt)} and {out / 'checkpoint.bin'}")
    return EXIT_OK


def _load_checkpoint(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    bundle = ckpt.load(args.checkpoint)
    if bundle.meta.get("kind") != "cost_checkpoint":
        raise ckpt.CheckpointError("not a cost checkpoint")
    stored = "".join(f"{k} = {v}\n" for k, v in bundle.meta["config"].items())
    cfg = parse_config(stored) if not args.config else _load_config(args)
    if args.config is None and args.out:
        cfg = cfg.with_overrides(out_dir=args.out)
    model = planted_model(cfg.task())
    expected = init_costs(model, cfg.groups)
    if set(expected) != set(bundle.arrays):
        raise ShapeError(f"checkpoint cost matrices {sorted(bundle.arrays)} do not match the model "
                         f"({sorted(expected)})")
    for k, v in expected.items():
        if bundle.arrays[k].shape != v.shape:
            raise ShapeError(f"cost matrix {k} has shape {bundle.arrays[k].shape}, model needs {v.shape}")
    return bundle, cfg, model


def cmd_prune(args) -> int:
    bundle, cfg, model = _load_checkpoint(args)
    train, _ = gen_task(cfg.task(), model)
    specs = _specs(cfg, model, train)
    tcfg = cfg.train_config()
    result = inference_prune(bundle.arrays, model, tcfg, specs)
    bad = nm_violations(result, tcfg.pattern)
    if bad:
        print(f"N:M violation: {bad[0]}", file=sys.stderr)
        return EXIT_FAIL
    arrays, summary = {}, {}
    for b, (blk, pblk, masks, pmasks) in enumerate(zip(result.model.blocks, result.permuted.blocks,
                                                        result.masks, result.permuted_masks)):
        for name in WEIGHT_NAMES:
            arrays[f"b{b}.{name}.weight"] = getattr(blk, name)
            arrays[f"b{b}.{name}.mask"] = masks[name].astype(np.float64)
            arrays[f"b{b}.{name}.deployed_weight"] = getattr(pblk, name)
            arrays[f"b{b}.{name}.deployed_mask"] = pmasks[name].astype(np.float64)
    for b, blk in enumerate(model.blocks):
        for name, w in blk.weights().items():
            summary[f"b{b}.{name}"] = retained_saliency(saliency(w, specs[b][name]), result.masks[b][name])
    meta = {
        "kind": "pruned_model",
        "pattern": str(tcfg.pattern),
        "config_digest": cfg.digest(),
        "perms": {k: [int(i) for i in v] for k, v in sorted(result.perms.items())},
        "retained_saliency": {"layers": summary, "total": result.retained},
    }
    out = Path(args.out or cfg.out_dir)
    ckpt.save(ckpt.Bundle(arrays, meta), out / "pruned")
    for key, value in summary.items():
        print(f"{key:14s} retained saliency {value:.6f}")
    print(f"{'total':14s} retained saliency {result.retained:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle, cfg, model = _load_checkpoint(args)
    train, evals = gen_task(cfg.task(), model)
    specs = _specs(cfg, model, train)
    tcfg = cfg.train_config()
    learned = inference_prune(bundle.arrays, model, tcfg, specs)
    baseline = inference_prune(init_costs(model, cfg.groups), model, tcfg, specs)
    rows = {}
    for label, m in (("dense", model), ("baseline", baseline.model), ("learned", learned.model)):
        loss, acc = evaluate(m, evals)
        rows[label] = {"eval_loss": loss, "eval_acc": acc}
    rows["baseline"]["retained_saliency"] = baseline.retained
    rows["learned"]["retained_saliency"] = learned.retained
    print(json.dumps(rows, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suites(inject_fault=args.inject_fault)
    failed = None
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.seconds:.2f}s)")
        if not r.passed and failed is None:
            failed = r
    if failed is not None:
        print(json.dumps({"suite": failed.name, "counterexample": failed.counterexample}, sort_keys=True))
        return EXIT_FAIL
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(describe())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="permprune", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--format", choices=("json", "csv"), help="report format")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint manifest or stem")

    common(sub.add_parser("calibrate", help="collect Wanda activation norms"))
    common(sub.add_parser("train", help="learn permutation cost matrices"))
    common(sub.add_parser("prune", help="apply learned permutations and N:M masks"), checkpoint=True)
    common(sub.add_parser("eval", help="held-out metrics for a checkpoint"), checkpoint=True)
    v = sub.add_parser("verify", help="run the invariant suites")
    v.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    sub.add_parser("config", help="print a documented default config")
    return parser


COMMANDS = {"calibrate": cmd_calibrate, "train": cmd_train, "prune": cmd_prune, "eval": cmd_eval,
            "verify": cmd_verify, "config": cmd_config}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        for line in err.diagnostics:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ckpt.CheckpointError, ShapeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    except (TrainingError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
