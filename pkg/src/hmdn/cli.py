"""Command-line entry point: ``hmdn <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import data as data_mod
from .config import load_config
from .embedding import embed_batch
from .exceptions import HMDNError, NumericalError
from .experiments import ABLATION_MODELS, format_table, run_ablation, sweep_depth
from .model import HMDNModel, check_gradients
from .quantizer import QuantizerConfig, UsageStats
from .training import MetricsLog, Trainer, evaluate, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _add_model_overrides(p):
    p.add_argument("--backbone", choices=["moe", "dw", "dnn"])
    p.add_argument("--gate-input", choices=["hierarchical_sD", "raw_xb"])
    p.add_argument("--mode", choices=["implicit", "explicit"])
    p.add_argument("--depth", type=int)
    p.add_argument("--codebook-size", type=int)
    p.add_argument("--no-quantizer", action="store_true", help="disable the residual quantizer")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)


def _apply_overrides(cfg, args):
    model, train = cfg.model, cfg.training
    q = model.quantizer
    if getattr(args, "no_quantizer", False):
        q = None
        model = replace(model, gate_input="raw_xb")
    else:
        upd = {k: v for k, v in (("mode", args.mode), ("depth", args.depth),
                                 ("codebook_size", args.codebook_size)) if v is not None}
        if upd:
            q = replace(q or QuantizerConfig(), **upd)
    model = replace(model, quantizer=q)
    if args.backbone:
        model = replace(model, backbone=args.backbone)
    if args.gate_input:
        model = replace(model, gate_input=args.gate_input)
    upd = {k: v for k, v in (("alpha", args.alpha), ("lr", args.lr), ("epochs", args.epochs),
                             ("batch_size", args.batch_size), ("seed", args.seed)) if v is not None}
    train = replace(train, **upd)
    return replace(cfg, model=model.validate(), training=train.validate())


def _load_data(cfg):
    """Return ``(schema, train, test, dictionaries)`` per the data section."""
    if cfg.train_path:
        schema = cfg.schema
        if schema is None and cfg.schema_path:
            schema = data_mod.load_schema(cfg.schema_path)
        if schema is None:
            raise HMDNError("CSV data needs a schema section or data.schema path")
        train, dicts = data_mod.load_csv(schema, cfg.train_path)
        test = data_mod.load_csv(schema, cfg.test_path, dicts)[0] if cfg.test_path else None
        return schema, train, test, dicts
    schema, train, test = data_mod.generate_synthetic(cfg.synthetic or data_mod.SyntheticConfig())
    return schema, train, test, None


def cmd_gen_data(args):
    cfg = load_config(args.config)
    syn = cfg.synthetic or data_mod.SyntheticConfig()
    if args.n_examples is not None:
        syn = replace(syn, n_examples=args.n_examples, test_size=min(syn.test_size, args.n_examples - 1))
    if args.seed is not None:
        syn = replace(syn, seed=args.seed)
    schema, train, test = data_mod.generate_synthetic(syn)
    os.makedirs(args.out, exist_ok=True)
    data_mod.write_csv(schema, train, os.path.join(args.out, "train.csv"))
    data_mod.write_csv(schema, test, os.path.join(args.out, "test.csv"))
    data_mod.save_schema(schema, os.path.join(args.out, "schema.json"))
    report = data_mod.partition_report(train, schema)
    names = [f.name for f in schema.distribution_features]
    print("\t".join(names + ["count"]))
    for key, count in report.items():
        print("\t".join([str(k - 1) for k in key] + [str(count)]))
    print(f"# partitions={len(report)} train={len(train)} test={len(test)}")
    return EXIT_OK


def cmd_train(args):
    cfg = _apply_overrides(load_config(args.config), args)
    schema, train, test, dicts = _load_data(cfg)
    model = HMDNModel(schema, cfg.model, seed=cfg.training.seed)
    log = MetricsLog(stream=sys.stdout, path=args.metrics_file)
    try:
        Trainer(model, cfg.training).fit(train, log=log, eval_data=test)
    finally:
        log.close()
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint, extra={"dictionaries": dicts, "training": cfg.training.__dict__})
    return EXIT_OK


def _eval_data(args, model):
    if args.data:
        dicts = getattr(model, "checkpoint_extra", {}).get("dictionaries")
        return data_mod.load_csv(model.schema, args.data, dicts)[0]
    cfg = load_config(args.config)
    return _load_data(cfg)[2]


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    m = evaluate(model, _eval_data(args, model))
    log = MetricsLog(stream=sys.stdout)
    for rec in m.records("eval"):
        log.emit(*rec)
    return EXIT_OK


def cmd_inspect_codebooks(args):
    model = load_checkpoint(args.checkpoint)
    if model.quantizer is None:
        print("model has no quantizer")
        return EXIT_INVALID
    test = _eval_data(args, model)
    q = model.quantizer
    stats = UsageStats.empty(q.depth, q.config.codebook_size)
    x_b = embed_batch(model.schema, model.tables, test)[1]
    stats.update(q.quantize(x_b).codes)
    print("level\tentropy\tmax_entropy\tdead_codes\tmean_row_norm")
    for d, row in enumerate(stats.summary()):
        norm = float(np.linalg.norm(q.codebooks[d], axis=1).mean())
        print(f"{row['level']}\t{row['entropy']:.6f}\t{np.log(q.config.codebook_size):.6f}\t"
              f"{row['dead_codes']}\t{norm:.6f}")
    if args.histograms:
        for row in stats.summary():
            print(json.dumps({"level": row["level"], "histogram": row["histogram"]}))
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _apply_overrides(load_config(args.config), args)
    schema, train, _, _ = _load_data(cfg)
    batch = train.take(np.arange(min(args.batch, len(train))))
    model = HMDNModel(schema, cfg.model, seed=cfg.training.seed)
    if model.quantizer is not None:
        model.quantizer.init_codebooks(embed_batch(schema, model.tables, batch)[1], model.train_rng())
    report = check_gradients(model, batch, alpha=cfg.training.alpha, step=args.step,
                             tolerance=args.tolerance, max_coords=args.max_coords,
                             freeze_codes=args.freeze_codes == "on", seed=cfg.training.seed)
    print(report.format())
    print(f"# tolerance={args.tolerance} excluded={report.n_excluded} "
          f"result={'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _parse_int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise HMDNError(f"expected a comma-separated list of integers, got {text!r}") from None


def cmd_sweep_depth(args):
    cfg = _apply_overrides(load_config(args.config), args)
    schema, train, test, _ = _load_data(cfg)
    rows = sweep_depth(schema, train, test, cfg.model, cfg.training, _parse_int_list(args.depths), args.seeds)
    print(format_table(rows, ["depth", "auc_mean", "auc_min", "auc_max", "seconds"]))
    return EXIT_OK


def cmd_ablation(args):
    cfg = _apply_overrides(load_config(args.config), args)
    schema, train, test, _ = _load_data(cfg)
    models = None if not args.models else [m.strip() for m in args.models.split(",")]
    runs, table = run_ablation(schema, train, test, cfg.model, cfg.training, args.seeds, models)
    print(format_table(runs, ["model", "seed", "auc", "logloss"]))
    print()
    print(format_table(table, ["model", "auc_mean", "auc_min", "auc_max", "rela_impr"]))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hmdn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/test CSVs and a schema file")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--n-examples", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--metrics-file")
    _add_model_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="CSV file; defaults to the config's test split")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on a small batch")
    p.add_argument("--config")
    p.add_argument("--freeze-codes", choices=["on", "off"], default="on")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--max-coords", type=int, default=20)
    _add_model_overrides(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-depth", help="AUC over quantizer depths")
    p.add_argument("--config")
    p.add_argument("--depths", required=True, help="comma-separated, e.g. 1,3,6,9,12")
    p.add_argument("--seeds", type=int, default=3)
    _add_model_overrides(p)
    p.set_defaults(func=cmd_sweep_depth)

    p = sub.add_parser("ablation", help="compare backbones and extraction modes")
    p.add_argument("--config")
    p.add_argument("--models", help=f"comma-separated subset of {','.join(ABLATION_MODELS)}")
    p.add_argument("--seeds", type=int, default=3)
    _add_model_overrides(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("inspect-codebooks", help="codebook usage statistics from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--histograms", action="store_true")
    p.set_defaults(func=cmd_inspect_codebooks)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse uses 2 for usage errors; 2 is reserved for numerical failure
        return EXIT_OK if e.code in (0, None) else EXIT_INVALID
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HMDNError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
