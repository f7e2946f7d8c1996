"""Command-line entry point: ``vdt <command> [flags]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import diagnostics, toydata
from .checkpoint import load_checkpoint
from .errors import VDTError
from .evaluator import (PROTOCOL_ALIASES, PROTOCOLS, evaluate_all, resolve_protocol,
                        save_embeddings, write_reports)
from .model import ModelConfig, extract_features, paper_scale_config
from .trainer import TrainConfig, format_sweep_table, load_config_file, sweep_lambda, train

log = logging.getLogger("vdt")

DEFAULT_LAMBDAS = "1e-4,1e-3,1e-2,1e-1,1,10"
ABLATIONS = {
    "subtraction": {"disable_subtraction": True},
    "orthogonal": {"disable_orthogonal": True},
    "both": {"disable_subtraction": True, "disable_orthogonal": True},
}


def _dataset(root, split):
    """``root/split`` if it holds a manifest, else ``root`` itself."""
    root = Path(root)
    if (root / split / toydata.MANIFEST_NAME).exists():
        root = root / split
    return toydata.load_manifest(root)


def _explicit(argv, parser, dest):
    """Whether the flag writing ``dest`` appeared on the command line of the subcommand."""
    for action in parser._actions:
        if action.dest == dest:
            return any(a == opt or a.startswith(opt + "=")
                       for a in argv for opt in action.option_strings)
    return False


def _configs(args, argv, parser):
    """Model and train configs: dataclass defaults < --config file < explicit flags."""
    model_kw, train_kw = load_config_file(args.config) if args.config else ({}, {})
    flag_map = {"seed": "seed", "lam": "lam", "epochs": "epochs", "lr": "lr_initial"}
    for dest, key in flag_map.items():
        if hasattr(args, dest) and (key not in train_kw or _explicit(argv, parser, dest)):
            train_kw[key] = getattr(args, dest)
    if getattr(args, "mode", None) == "baseline":
        train_kw["baseline_vit"] = True
    if getattr(args, "ablate", None):
        train_kw.update(ABLATIONS[args.ablate])
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(args, argv, parser):
    kwargs = dict(seed=args.seed, images_per_id_per_view=args.images_per_id,
                  view_bias_strength=args.view_bias, occlusion_prob=args.occlusion_prob)
    train_set, test_set = toydata.generate_splits(args.out, args.num_ids, args.num_ids, **kwargs)
    print(f"wrote {len(train_set)} train / {len(test_set)} test images to {args.out}")
    print(f"digest {toydata.directory_digest(args.out)}")
    return 0


def cmd_train(args, argv, parser):
    model_config, train_config = _configs(args, argv, parser)
    dataset = _dataset(args.data, "train")
    result = train(model_config, train_config, dataset, out_dir=args.out)
    final = result.log.records[-1]
    print(f"trained {len(result.log.records)} steps; final total loss {final['total']:.4f}")
    print(f"checkpoint {result.checkpoint_path}")
    return 0


def _protocols(name):
    return PROTOCOLS if name is None else (resolve_protocol(name),)


def cmd_eval(args, argv, parser):
    params, _ = load_checkpoint(args.checkpoint)
    dataset = _dataset(args.data, "test")
    feats = extract_features(dataset.images(), params)
    reports = evaluate_all(dataset.samples, dataset.samples, feats, feats,
                           protocols=_protocols(args.protocol), metric=args.metric)
    for name, r in reports.items():
        print(f"{name:17s} rank1 {r.rank1:.4f}  mAP {r.mAP:.4f}  mINP {r.mINP:.4f}"
              f"  ({r.num_queries} queries)")
    if args.out:
        write_reports(args.out, reports if args.protocol is None else next(iter(reports.values())))
    return 0


def cmd_gradcheck(args, argv, parser):
    if args.micro:
        config = diagnostics.MICRO_CONFIG
    else:
        model_kw = load_config_file(args.config)[0] if args.config else {}
        config = ModelConfig(**model_kw)
    entries = None if args.max_entries <= 0 else args.max_entries
    err = diagnostics.full_loss_gradcheck(config, seed=args.seed, h=args.h, lam=args.lam,
                                          max_entries_per_param=entries)
    print(f"max relative error {err:.3e}")
    return 0 if err <= args.tol else 1


def cmd_bench(args, argv, parser):
    config = paper_scale_config() if args.scale == "paper" else ModelConfig()
    result = diagnostics.bench_forward(config, repeats=args.repeats, seed=args.seed)
    print(f"vdt       {result['vdt'] * 1e3:9.2f} ms/image")
    print(f"baseline  {result['baseline_vit'] * 1e3:9.2f} ms/image")
    print(f"ratio     {result['ratio']:.4f}")
    return 0


def cmd_sweep_lambda(args, argv, parser):
    model_config, train_config = _configs(args, argv, parser)
    values = [float(v) for v in args.lambdas.split(",") if v.strip()]
    rows = sweep_lambda(values, model_config, train_config, _dataset(args.data, "train"),
                        _dataset(args.data, "test"), protocols=_protocols(args.protocol))
    table = format_sweep_table(rows)
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(table)
    return 0


def cmd_export_embeddings(args, argv, parser):
    params, _ = load_checkpoint(args.checkpoint)
    dataset = _dataset(args.data, "test")
    feats = extract_features(dataset.images(), params)
    save_embeddings(args.out, feats, dataset.samples)
    print(f"wrote {feats.shape[0]}x{feats.shape[1]} embeddings to {args.out}")
    return 0


# -- parser -----------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset root (or split directory)")
    p.add_argument("--config", help="key = value config file; explicit flags override it")
    p.add_argument("--seed", type=int, default=TrainConfig.seed, help="training seed")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs, help="passes over the identities")
    p.add_argument("--lr", type=float, default=TrainConfig.lr_initial, help="initial learning rate")
    p.add_argument("--lambda", dest="lam", type=float, default=TrainConfig.lam,
                   help="weight of the view terms")
    p.add_argument("--mode", choices=("vdt", "baseline"), default="vdt", help="model family")
    p.add_argument("--ablate", choices=tuple(ABLATIONS), default=None,
                   help="switch off subtraction, the orthogonal loss, or both")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="vdt", formatter_class=fmt,
                                     description="View-decoupled transformer toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", formatter_class=fmt, help="render the synthetic dataset")
    p.add_argument("--out", required=True, help="output root; train/ and test/ are created")
    p.add_argument("--num-ids", type=int, default=64, help="identities per split")
    p.add_argument("--images-per-id", type=int, default=4, help="images per view per identity")
    p.add_argument("--view-bias", type=float, default=0.8, help="aerial transform strength")
    p.add_argument("--occlusion-prob", type=float, default=0.1, help="chance of an occluding block")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(func=cmd_gen_data, subparser=p)

    p = sub.add_parser("train", formatter_class=fmt, help="train a model")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="run directory for log and checkpoint")
    p.set_defaults(func=cmd_train, subparser=p)

    protocol_choices = tuple(PROTOCOL_ALIASES)
    p = sub.add_parser("eval", formatter_class=fmt, help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--data", required=True, help="dataset root (or split directory)")
    p.add_argument("--protocol", choices=protocol_choices, default=None,
                   help="one protocol; all of them when omitted")
    p.add_argument("--metric", choices=("euclidean", "cosine"), default="euclidean",
                   help="retrieval distance")
    p.add_argument("--out", help="write the report(s) as JSON")
    p.add_argument("--seed", type=int, default=0, help="unused; evaluation is deterministic")
    p.set_defaults(func=cmd_eval, subparser=p)

    p = sub.add_parser("gradcheck", formatter_class=fmt,
                       help="finite-difference check of the total-loss gradient")
    p.add_argument("--config", help="model config file (defaults to the desk config)")
    p.add_argument("--micro", action="store_true", help="use the two-block d=16 micro model")
    p.add_argument("--seed", type=int, default=0, help="seed for weights and micro-batch")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="weight of the view terms")
    p.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--max-entries", type=int, default=6,
                   help="probed entries per parameter; 0 probes every entry")
    p.add_argument("--tol", type=float, default=1e-4, help="exit nonzero above this error")
    p.set_defaults(func=cmd_gradcheck, subparser=p)

    p = sub.add_parser("bench", formatter_class=fmt,
                       help="single-image forward latency, vdt vs baseline")
    p.add_argument("--scale", choices=("paper", "desk"), default="paper", help="model shapes")
    p.add_argument("--repeats", type=int, default=7, help="timed runs per mode; the median is kept")
    p.add_argument("--seed", type=int, default=0, help="seed for weights and input")
    p.set_defaults(func=cmd_bench, subparser=p)

    p = sub.add_parser("sweep-lambda", formatter_class=fmt, help="train one model per lambda")
    _add_train_flags(p)
    p.add_argument("--lambdas", default=DEFAULT_LAMBDAS, help="comma-separated values")
    p.add_argument("--protocol", choices=protocol_choices, default=None,
                   help="one protocol; all of them when omitted")
    p.add_argument("--out", help="write the table as TSV")
    p.set_defaults(func=cmd_sweep_lambda, subparser=p)

    p = sub.add_parser("export-embeddings", formatter_class=fmt,
                       help="write meta-token features as an EMB1 block")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--data", required=True, help="dataset root (or split directory)")
    p.add_argument("--out", required=True, help="embedding file; a .tsv sidecar is added")
    p.add_argument("--seed", type=int, default=0, help="unused; export is deterministic")
    p.set_defaults(func=cmd_export_embeddings, subparser=p)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args, argv, args.subparser)
    except (VDTError, FileNotFoundError) as exc:
        print(f"vdt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
