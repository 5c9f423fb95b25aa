"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Log lines go to stderr; machine-readable output goes to files and stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, selftest
from .attack import (
    ITERATIVE_OPTIMIZERS,
    FGSM,
    IterationsOnly,
    LossTarget,
    RmseTarget,
    fgsm as run_fgsm,
)
from .config import load_config
from .errors import ConfigError, TransferBenchError

log = logging.getLogger("transferbench")


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", required=config_required, help="YAML config path")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config field via dotted path (repeatable)",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--out-dir", default=None, help="override the output directory")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transferbench",
        description="l-inf attack transferability benchmark: train small models, "
        "run optimizer-driven attacks, and measure how perturbation RMSE "
        "drives black-box transfer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from the zoo config")
    _add_common(p)
    p.add_argument("--model", required=True, help="model name from zoo.surrogate/zoo.victims")

    p = sub.add_parser("zoo", help="train the full surrogate+victim zoo")
    _add_common(p)
    p.add_argument("--force", action="store_true", help="retrain even if checkpoints match")

    p = sub.add_parser("attack", help="run one attack over the eval set and print stats")
    _add_common(p)
    p.add_argument("--attack", dest="attack_kind", required=True,
                   choices=list(ITERATIVE_OPTIMIZERS) + [FGSM])
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--stop", choices=["loss", "rmse", "iters"], default="loss")

    p = sub.add_parser("experiment", help="run the benchmark protocols")
    _add_common(p)
    p.add_argument("--which", choices=["fixed-loss", "gamma", "fixed-rmse", "all"], default="all")
    p.add_argument("--force", action="store_true", help="retrain the zoo first")

    p = sub.add_parser("report", help="re-emit CSV/JSON/figure from a saved report")
    p.add_argument("--report", required=True, help="path to a saved <name>.json report")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--formats", default="csv,json,png")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")

    p = sub.add_parser("selftest", help="run the built-in correctness oracles")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")
    return parser


def _setup_logging(args) -> None:
    level = logging.INFO
    if getattr(args, "quiet", False):
        level = logging.WARNING
    elif getattr(args, "verbose", 0) >= 1:
        level = logging.DEBUG
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(message)s")


def _load(args):
    cfg = load_config(args.config, overrides=args.overrides, seed=args.seed)
    if args.out_dir:
        from dataclasses import replace

        cfg = replace(cfg, out_dir=args.out_dir)
    return cfg


def _cmd_train(args) -> int:
    cfg = _load(args)
    from .nnet import save_model, train_model

    dataset = harness.build_dataset(cfg)
    for entry in harness._zoo_plan(cfg):
        spec = entry["model"]
        if spec.name != args.model:
            continue
        arch = spec.arch(dataset.shape, dataset.num_classes)
        if entry["adv"]:
            raise ConfigError(f"--model {args.model}: use 'zoo' to build the adversarial victim")
        net = train_model(dataset, arch, cfg.zoo.train, entry["seed"], name=spec.name)
        path = Path(cfg.out_dir) / "models" / f"{spec.name}.tbnet"
        save_model(net, path)
        log.info("trained %s: clean accuracy %.3f -> %s", spec.name, net.clean_accuracy, path)
        print(json.dumps({"model": spec.name, "clean_accuracy": net.clean_accuracy,
                          "checkpoint": str(path)}))
        return 0
    raise ConfigError(f"--model {args.model!r}: no such model in the zoo config")


def _cmd_zoo(args) -> int:
    cfg = _load(args)
    dataset = harness.build_dataset(cfg)
    surrogate, victims = harness.build_model_zoo(cfg, dataset, force=args.force)
    print(json.dumps({
        "surrogate": {"name": surrogate.name, "clean_accuracy": surrogate.clean_accuracy},
        "victims": [{"name": v.name, "clean_accuracy": v.clean_accuracy} for v in victims],
    }, indent=2))
    return 0


def _cmd_attack(args) -> int:
    cfg = _load(args)
    ctx = harness.build_context(cfg)
    acfg = cfg.attack
    if args.stop == "loss":
        rule = LossTarget(acfg.loss_tau)
    elif args.stop == "rmse":
        rule = RmseTarget(acfg.rmse_target_255)
    else:
        rule = IterationsOnly()
    if args.attack_kind == FGSM:
        results = [run_fgsm(ctx.surrogate, s, acfg.epsilon_255) for s in ctx.eval_set.samples]
    else:
        attack_cfg = acfg.build(args.attack_kind, rule, gamma=args.gamma)
        results = harness.run_attacks(ctx.surrogate, ctx.eval_set.samples, attack_cfg)
    stats = {
        "attack": args.attack_kind,
        "gamma": args.gamma,
        "samples": len(results),
        "mean_rmse_255": float(np.mean([r.stats.rmse_255 for r in results])),
        "mean_linf_255": float(np.mean([r.stats.linf_255 for r in results])),
        "mean_l1_255": float(np.mean([r.stats.l1_255 for r in results])),
        "mean_l0_frac": float(np.mean([r.stats.l0_frac for r in results])),
        "mean_iters": float(np.mean([r.iterations for r in results])),
        "surrogate_fooled_rate": float(np.mean([r.surrogate_fooled for r in results])),
    }
    print(json.dumps(stats, indent=2))
    return 0


def _cmd_experiment(args) -> int:
    cfg = _load(args)
    ctx = harness.build_context(cfg, force=args.force)
    out_dir = Path(cfg.out_dir) / "reports"
    formats = cfg.experiments.formats
    which = args.which

    fixed_loss = None
    if which in ("fixed-loss", "all", "fixed-rmse"):
        fixed_loss = harness.experiment_fixed_loss(ctx)
        if which != "fixed-rmse":
            harness.emit_report(fixed_loss, out_dir, formats)
    if which in ("gamma", "all"):
        harness.emit_report(harness.experiment_gamma(ctx), out_dir, formats)
    if which in ("fixed-rmse", "all"):
        harness.emit_report(harness.experiment_fixed_rmse(ctx, fixed_loss), out_dir, formats)
    print(json.dumps({"out_dir": str(out_dir), "which": which}))
    return 0


def _cmd_report(args) -> int:
    report = harness.load_report(args.report)
    formats = tuple(f for f in args.formats.split(",") if f)
    for fmt in formats:
        if fmt not in ("csv", "json", "png"):
            raise ConfigError(f"--formats: unknown format {fmt!r}")
    paths = harness.emit_report(report, args.out_dir, formats)
    print(json.dumps({"written": [str(p) for p in paths]}))
    return 0


def _cmd_selftest(args) -> int:
    ok = selftest.run_selftest()
    print(json.dumps({"selftest": "pass" if ok else "fail"}))
    return 0 if ok else 1


_COMMANDS = {
    "train": _cmd_train,
    "zoo": _cmd_zoo,
    "attack": _cmd_attack,
    "experiment": _cmd_experiment,
    "report": _cmd_report,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except TransferBenchError as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("i/o error: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
