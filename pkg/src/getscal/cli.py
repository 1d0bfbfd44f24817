"""Command line entry point: ``getscal <command> [options]``.

Commands
    gen-sbm    write a stochastic block model graph as a dataset directory
    train      train and checkpoint the classifier for one seed
    calibrate  run the full protocol for one seed
    sweep      run every seed in the config and summarize
    report     print the summary table of an existing results.csv
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, data as dataio, pipeline
from .models import evaluate_classifier

log = logging.getLogger("getscal")


def _common(parser: argparse.ArgumentParser, top: bool):
    # The same flags are accepted before and after the subcommand; SUPPRESS keeps
    # the subparser from clobbering a value that was given before it.
    default = None if top else argparse.SUPPRESS
    parser.add_argument("--config", metavar="PATH", default=default, help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=default, help="seed for single-run commands")
    parser.add_argument("--out", metavar="DIR", default=default,
                        help="output directory (overrides the config's 'output')")
    parser.add_argument("--force", action="store_true", default=False if top else argparse.SUPPRESS,
                        help="overwrite existing outputs")
    parser.add_argument("-v", "--verbose", action="count", default=0 if top else argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="getscal", description="Graph calibration experiments.")
    _common(p, top=True)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-sbm", help="generate a stochastic block model dataset")
    _common(g, top=False)
    g.add_argument("--blocks", type=int, help="number of blocks (classes)")
    g.add_argument("--nodes-per-block", type=int)
    g.add_argument("--p-in", type=float, help="within-block edge probability")
    g.add_argument("--p-out", type=float, help="between-block edge probability")
    g.add_argument("--features", type=int, help="feature dimension")
    g.add_argument("--signal", type=float, help="class signal added to the features")

    t = sub.add_parser("train", help="train and checkpoint the classifier for one seed")
    _common(t, top=False)

    c = sub.add_parser("calibrate", help="train, calibrate and evaluate one seed")
    _common(c, top=False)
    c.add_argument("--classifier", metavar="CKPT",
                   help="reuse a classifier checkpoint from 'train' instead of retraining")

    s = sub.add_parser("sweep", help="run all configured seeds and summarize")
    _common(s, top=False)
    s.add_argument("--jobs", type=int, default=1, help="seeds to run in parallel (default 1)")

    r = sub.add_parser("report", help="summarize an existing results.csv")
    _common(r, top=False)
    r.add_argument("results", nargs="?", help="results.csv or a directory holding one")
    return p


def _config(args) -> pipeline.ExperimentConfig:
    if not args.config:
        raise pipeline.ConfigError(f"'{args.command}' needs --config PATH")
    return pipeline.load_config(args.config)


def _out_dir(args, cfg=None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None:
        return Path(cfg.output)
    raise pipeline.ConfigError(f"'{args.command}' needs --out DIR")


def _guard(path: Path, force: bool):
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def cmd_gen_sbm(args) -> int:
    opts = {}
    if args.config:
        cfg = pipeline.load_config(args.config)
        opts.update(cfg.sbm or {})
    names = {"blocks": "num_blocks", "nodes_per_block": "nodes_per_block", "p_in": "p_in",
             "p_out": "p_out", "features": "feature_dim", "signal": "feature_signal"}
    for flag, key in names.items():
        if getattr(args, flag) is not None:
            opts[key] = getattr(args, flag)
    if args.seed is not None:
        opts["seed"] = args.seed
    out = _out_dir(args)
    _guard(out / "meta.json", args.force)
    g = dataio.generate_sbm(dataio.SbmConfig(**opts))
    dataio.save_dataset(g, out, force=args.force)
    print(f"wrote {g.name}: {g.num_nodes} nodes, {g.num_edges} edges, {g.num_classes} classes -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    ckpt = out / f"classifier_{seed}.json"
    _guard(ckpt, args.force)
    ctx = pipeline.prepare(cfg, seed)
    result = pipeline.train_stage(cfg, ctx, seed)
    checkpoint.save_checkpoint(result.net, ckpt)
    acc = evaluate_classifier(result.logits, ctx.graph.labels, ctx.splits.test)
    print(f"seed {seed}: best epoch {result.best_epoch}/{result.epochs_run}, "
          f"val NLL {result.best_val_nll:.4f}, test accuracy {100 * acc:.2f}% -> {ckpt}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    results = out / f"results_seed{seed}.csv"
    _guard(results, args.force)
    out.mkdir(parents=True, exist_ok=True)
    logits = None
    if args.classifier:
        net = checkpoint.load_checkpoint(args.classifier)
        ctx = pipeline.prepare(cfg, seed)
        logits = net(ctx.adj, ctx.graph.features).data
    run = pipeline.run_pipeline(cfg, seed, out, classifier_logits=logits)
    pipeline.write_results(results, run.rows)
    print(pipeline.render_table(pipeline.summarize(run.rows, cfg.calibrators)))
    for name, msg in run.failures.items():
        print(f"calibrator {name} failed: {msg}", file=sys.stderr)
    return 1 if run.failures else 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    out = _out_dir(args, cfg)
    _guard(out / "results.csv", args.force)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    rows, table = pipeline.sweep_seeds(cfg, out, jobs=max(1, args.jobs))
    text = pipeline.render_table(table)
    (out / "summary.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    expected = len(cfg.seeds) * len(cfg.calibrators)
    if len(rows) != expected:
        print(f"{expected - len(rows)} calibrator runs failed; see {out / 'failures.csv'}", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    target = Path(args.results) if args.results else (Path(args.out) if args.out else None)
    if target is None and args.config:
        target = Path(pipeline.load_config(args.config).output)
    if target is None:
        raise pipeline.ConfigError("'report' needs a results path, --out DIR or --config PATH")
    if target.is_dir():
        target = target / "results.csv"
    print(pipeline.report(target))
    return 0


COMMANDS = {"gen-sbm": cmd_gen_sbm, "train": cmd_train, "calibrate": cmd_calibrate,
            "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else
                        logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return COMMANDS[args.command](args)
    except (pipeline.ConfigError, dataio.DatasetFormatError, checkpoint.CheckpointError,
            FileExistsError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
