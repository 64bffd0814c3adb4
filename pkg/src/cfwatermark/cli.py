"""Command-line entry point: ``cfwatermark <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, explain, extract, harness, nnmodel, verify
from . import watermark as wm
from .harness import ConfigError, ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ctx = harness.setup(replace(cfg, B=1))
    out = _out(args)
    nnmodel.save(ctx.model, out / "model.json")
    acc = float(np.mean(nnmodel.predict_label(ctx.model, ctx.test.X) == ctx.test.y))
    harness.write_json({"test_accuracy": acc, "n_train": len(ctx.train), "n_test": len(ctx.test),
                        "warnings": ctx.train.warnings}, out / "train_summary.json")
    print(json.dumps({"model": str(out / "model.json"), "test_accuracy": acc}))
    return EXIT_OK


def _setup_with_model(args):
    cfg = _load_config(args)
    ctx = harness.setup(cfg) if not args.model else None
    if ctx is None:
        train, test = harness.load_dataset(cfg)
        ctx = harness.Context(cfg, train, test, nnmodel.load(args.model), dataio.immutable_mask(train),
                              dataio.bootstrap(test, cfg.B, cfg.M, cfg.seed))
    return cfg, ctx


def cmd_explain(args) -> int:
    cfg, ctx = _setup_with_model(args)
    n = len(ctx.test) if args.rows is None else min(args.rows, len(ctx.test))
    batch = explain.generate(ctx.model, ctx.test.X[:n], cfg.explainer, ctx.mask)
    out = _out(args)
    batch.to_csv(out / "cfs.csv")
    summary = {"n": n, "validity": explain.validity(batch, ctx.model), "proximity": explain.proximity(batch)}
    harness.write_json(summary, out / "cf_summary.json")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_watermark(args) -> int:
    cfg, ctx = _setup_with_model(args)
    row_ids, x_cf, target, _ = explain.load_cf_csv(args.cfs)
    if x_cf.shape[1] != ctx.model.n_features:
        raise ConfigError(f"CF file has {x_cf.shape[1]} features, model expects {ctx.model.n_features}")
    svc = ctx.service()
    x_src = ctx.test.X[row_ids]
    theta = svc.watermark_batch(x_src, x_cf, target, ("cli",))
    out = _out(args)
    theta.save(out / "theta.json", out / "trace.jsonl")
    x_wm = wm.apply(theta, x_cf)
    batch = explain.CfBatch(x_src, x_wm, target, np.ones(len(target), dtype=bool), row_ids=row_ids)
    batch.to_csv(out / "cfs_watermarked.csv")
    summary = harness.cf_quality(ctx.model, x_src, x_cf, x_wm, target)
    harness.write_json(summary, out / "watermark_summary.json")
    print(json.dumps(harness._clean(summary)))
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg, ctx = _setup_with_model(args)
    if not 0 <= args.subset < cfg.B:
        raise ConfigError(f"subset {args.subset} outside the {cfg.B} bootstrap subsets")
    rows = ctx.test.X[ctx.pool.subsets[args.subset]]
    svc = ctx.service()
    tr = extract.run_attack(args.kind, svc.session((args.subset,) if args.kind == "mrce"
                                                   else (args.subset, args.kind)), rows, cfg.M, cfg.attacker)
    out = _out(args)
    tr.save(out / f"transcript_{args.kind}_{args.subset:03d}.json")
    print(json.dumps({"kind": tr.kind, "positive": tr.positive, "queries": tr.log.to_dict()}))
    return EXIT_OK


def _read_probs(path, column=None) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ConfigError(f"{path} is empty")
        j = header.index(column) if column else 0
        vals = []
        for lineno, row in enumerate(reader, start=2):
            try:
                vals.append(float(row[j]))
            except (ValueError, IndexError):
                raise ConfigError(f"{path}: row {lineno} has no numeric value in column {j}") from None
    return np.array(vals)


def cmd_verify(args) -> int:
    p_wm = _read_probs(args.watermarked, args.column)
    p_unwm = _read_probs(args.unwatermarked, args.column)
    try:
        res = verify.paired_t_test(verify.PairedSample(p_wm, p_unwm), args.tau, args.alpha)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    doc = harness._clean(res.to_dict())
    if args.out:
        harness.write_json(doc, _out(args) / "verification.json")
    print(json.dumps(doc))
    return EXIT_OK


def _finish(report: harness.Report, args) -> int:
    paths = harness.emit_report(report, _out(args))
    print(json.dumps({"f1": harness._clean(report.f1), "confusion": report.confusion,
                      "failures": len(report.failures), **paths}))
    return EXIT_PARTIAL if report.partial else EXIT_OK


def cmd_evaluate(args) -> int:
    return _finish(harness.run_evaluation(_load_config(args), args.workers), args)


def cmd_robustness(args) -> int:
    return _finish(harness.run_robustness(_load_config(args), args.workers), args)


def _table(rows, args, name) -> int:
    out = _out(args)
    harness.write_json(rows, out / f"{name}.json")
    flat = [{k: v for k, v in r.items() if not isinstance(v, dict)} for r in rows]
    with open(out / f"{name}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(flat[0]))
        w.writeheader()
        w.writerows(flat)
    print(json.dumps(harness._clean(flat)))
    return EXIT_PARTIAL if any(r.get("failures") for r in rows) else EXIT_OK


def cmd_ablate_losses(args) -> int:
    return _table(harness.run_ablation_losses(_load_config(args), args.workers), args, "ablation_losses")


def cmd_ablate_reg(args) -> int:
    values = [float(v) for v in args.values.split(",")] if args.values else None
    return _table(harness.run_ablation_regularization(_load_config(args), values, args.workers), args,
                  "ablation_regularization")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--workers", type=int, default=1, help="parallel bootstrap workers")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cfwatermark",
                                description="Watermark counterfactual explanations and detect extracted models.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train the proprietary model")
    s = sub.add_parser("explain", parents=[common], help="generate CFs for test rows")
    s.add_argument("--model", help="trained model JSON (default: train from config)")
    s.add_argument("--rows", type=int, help="explain only the first N test rows")
    s = sub.add_parser("watermark", parents=[common], help="embed a watermark into a CF CSV")
    s.add_argument("--model")
    s.add_argument("--cfs", required=True, help="CSV written by the explain command")
    s = sub.add_parser("attack", parents=[common], help="run one extraction attack on a bootstrap subset")
    s.add_argument("--model")
    s.add_argument("--kind", choices=extract.ATTACKS, required=True)
    s.add_argument("--subset", type=int, default=0)
    s = sub.add_parser("verify", parents=[common], help="paired t-test on two probability CSVs")
    s.add_argument("watermarked", help="CSV of suspect probabilities on watermarked CFs")
    s.add_argument("unwatermarked", help="CSV of suspect probabilities on unwatermarked CFs")
    s.add_argument("--column", help="column name (default: first column)")
    s.add_argument("--tau", type=float, default=verify.DEFAULT_TAU)
    s.add_argument("--alpha", type=float, default=verify.DEFAULT_ALPHA)
    sub.add_parser("evaluate", parents=[common], help="full bootstrap detection experiment")
    sub.add_parser("ablate-losses", parents=[common], help="poison/validity loss-form grid")
    s = sub.add_parser("ablate-reg", parents=[common], help="sweep the regularization weight")
    s.add_argument("--values", help="comma-separated weights (default: from config)")
    sub.add_parser("robustness", parents=[common], help="fine-tuning and pruning sweeps")
    return p


COMMANDS = {"train": cmd_train, "explain": cmd_explain, "watermark": cmd_watermark, "attack": cmd_attack,
            "verify": cmd_verify, "evaluate": cmd_evaluate, "ablate-losses": cmd_ablate_losses,
            "ablate-reg": cmd_ablate_reg, "robustness": cmd_robustness}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify" and args.out == "runs":
        args.out = None
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
