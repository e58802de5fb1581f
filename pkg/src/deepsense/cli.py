"""Command-line driver.

Subcommands: gen, train, eval, roc-compare, transfer-unsup, finetune-sweep,
inspect.  Exit codes: 0 ok, 2 config error, 3 runtime/numeric error.
"""

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import config_hash, load_config
from .errors import ConfigError, DeepSenseError
from .harness import run_experiment, run_roc_compare, run_finetune_sweep, run_transfer_unsup, _write_csv, _base_meta
from .signals import build_dataset, derive_seed, load_dataset, save_dataset


def _add_common(p: argparse.ArgumentParser, needs_config=True):
    if needs_config:
        p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--out", help="output directory (overrides [experiment] out_dir)")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--threads", type=int, help="worker threads (default: env DEEPSENSE_THREADS or 1)")
    p.add_argument("--full-scale", action="store_true", help="paper-scale sizes instead of desk scale")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")


def _resolve(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.full_scale:
        cfg = cfg.full_scale()
    if getattr(args, "no_figures", False):
        cfg = replace(cfg, figures=False)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("DEEPSENSE_THREADS", "1"))
    if threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {threads}")
    return cfg, threads


def _require_kind(cfg, kind: str):
    if cfg.kind != kind:
        raise ConfigError(f"config declares kind={cfg.kind!r} but the subcommand expects {kind!r}")


def cmd_gen(args) -> int:
    from .harness import _TAG_TEST_DATA, _TAG_TRAIN_DATA, _scenario_tag

    cfg, _ = _resolve(args)
    out = Path(args.out or cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    jobs = [
        ("source_train", cfg.source, _TAG_TRAIN_DATA, cfg.train_size),
        ("source_test", cfg.source, _TAG_TEST_DATA, cfg.test_size),
    ]
    if cfg.target is not None:
        jobs += [
            ("target_train", cfg.target, _TAG_TRAIN_DATA, cfg.train_size),
            ("target_test", cfg.target, _TAG_TEST_DATA, cfg.test_size),
        ]
    for name, scenario, tag, size in jobs:
        ds = build_dataset(scenario.with_seed(derive_seed(cfg.seed, tag, _scenario_tag(scenario))), size)
        path = out / f"{name}.dsds"
        save_dataset(ds, path)
        print(f"wrote {path} ({len(ds)} examples, N={ds.n_samples}, {ds.n_positive} occupied)")
    return 0


def cmd_train(args) -> int:
    from .network import save_weights, train

    cfg, _ = _resolve(args)
    ds = load_dataset(args.data)
    result = train(ds, replace(cfg.train_cfg, seed=derive_seed(cfg.seed, 5)))
    out = Path(args.weights_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(result.weights, out)
    losses = ", ".join(f"{x:.4f}" for x in result.epoch_losses)
    print(f"wrote {out}; epoch losses: {losses}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from .detectors import roc_auc, roc_from_scores
    from .harness import _write_roc_csv
    from .metrics import pd_at_pfa
    from .network import load_weights, predict_scores

    cfg, _ = _resolve(args)
    ds = load_dataset(args.data)
    weights = load_weights(args.weights)
    scores = predict_scores(ds, weights)
    s = np.array([p for p, _ in scores])
    y = np.array([lab for _, lab in scores])
    roc = roc_from_scores(s[y == 0], s[y == 1])
    out = Path(args.out or cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    meta = _base_meta(cfg)
    _write_roc_csv(out / "roc_cnn.csv", roc, "cnn", meta)
    _write_csv(
        out / "metrics.csv",
        "arm,auc,pd_at_pfa,pfa_star",
        [("cnn", roc_auc(roc), pd_at_pfa(roc, cfg.pfa_star), cfg.pfa_star)],
        meta,
    )
    print(f"auc={roc_auc(roc):.4f} pd@{cfg.pfa_star:g}={pd_at_pfa(roc, cfg.pfa_star):.4f} -> {out}")
    return 0


def _cmd_experiment(args, kind, runner) -> int:
    cfg, threads = _resolve(args)
    _require_kind(cfg, kind)
    out = args.out or cfg.out_dir
    if out is None:
        raise ConfigError("no output directory: set [experiment] out_dir or pass --out")
    report = runner(cfg, out, threads=threads)
    print(f"config_hash={config_hash(cfg)}")
    for arm, vals in sorted(report.metrics.items()):
        desc = " ".join(f"{k}={v:.4f}" for k, v in vals.items())
        print(f"{arm}: {desc}")
    print(f"wrote {len(report.files) + 1} files to {out}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    magic = path.read_bytes()[:4]
    if magic == b"DSDS":
        ds = load_dataset(path)
        print(f"dataset: N={ds.n_samples}, {len(ds)} examples, {ds.n_positive} occupied")
    elif magic == b"DSNW":
        from .network import load_weights

        w = load_weights(path)
        print(f"checkpoint: N={w.spec.n_samples}")
        for name, arr in w.arrays.items():
            print(f"  {name}: {'x'.join(map(str, arr.shape))}")
    elif magic == b"DSTC":
        from .transfer import load_tca

        model = load_tca(path)
        n, d = model.landmarks.shape
        clf = "trained" if model.latent_classifier is not None else "untrained"
        print(f"projection model: kernel={model.kernel}, m={model.m}, {n} landmarks of dim {d}, classifier {clf}")
    else:
        print(f"unrecognized magic {magic!r}", file=sys.stderr)
        return 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepsense", description="Spectrum-sensing workbench")
    parser.add_argument("--version", action="version", version=f"deepsense {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the experiment's datasets as .dsds files")
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the CNN on a dataset file")
    _add_common(p)
    p.add_argument("--data", required=True, help="training dataset (.dsds)")
    p.add_argument("--weights-out", required=True, help="checkpoint to write (.dsnw)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset and emit its ROC")
    _add_common(p)
    p.add_argument("--data", required=True, help="evaluation dataset (.dsds)")
    p.add_argument("--weights", required=True, help="checkpoint to score (.dsnw)")
    p.set_defaults(func=cmd_eval)

    for kind, runner in (
        ("roc-compare", run_roc_compare),
        ("transfer-unsup", run_transfer_unsup),
        ("finetune-sweep", run_finetune_sweep),
    ):
        p = sub.add_parser(kind, help=f"run the {kind.replace('-', '_')} experiment")
        _add_common(p)
        p.set_defaults(func=lambda a, k=kind.replace("-", "_"), r=runner: _cmd_experiment(a, k, r))

    p = sub.add_parser("inspect", help="print the header of a dataset/checkpoint/model file")
    p.add_argument("--path", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DeepSenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
