"""Command-line entry point for granage."""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from src.config import RunConfig, load_run_config, parse_overrides, settings
from src.data.dataset import (
    ArrayAgeDataset,
    AugmentConfig,
    DatasetSplits,
    ManifestAgeDataset,
    load_manifest,
)
from src.data.synthetic import export_synthetic, synth_arrays
from src.evaluation.ablation import (
    DEFAULT_LADDER,
    format_ablation_table,
    run_ablation,
    write_ablation_csv,
)
from src.evaluation.metrics import evaluate
from src.exceptions import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, ConfigError, GranageError, exit_code_for
from src.losses.multi_loss import LossConfig
from src.models.age_granularity_net import POLICIES, build_model
from src.models.backbones import BACKBONES, MIN_INPUT_SIZE
from src.training.trainer import load_checkpoint, train
from src.verification.checks import FAMILIES, run_checks

logger = logging.getLogger("granage")


class UsageError(ConfigError):
    """Bad command-line usage."""


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_splits(cfg: RunConfig) -> DatasetSplits:
    """
    Datasets described by a run config.

    Manifests are used when ``train_manifest`` is set; otherwise synthetic
    splits are generated from ``seed``, ``seed + 1`` and ``seed + 2``.
    """
    kwargs = dict(mean=cfg.norm_mean, std=cfg.norm_std)
    train_aug = cfg.augment_config()
    if cfg.train_manifest:
        if not cfg.val_manifest:
            raise ConfigError(["val_manifest: required when train_manifest is set"])

        def from_manifest(path: str, augment: AugmentConfig) -> ManifestAgeDataset:
            root = cfg.images_root or str(Path(path).parent)
            return ManifestAgeDataset(load_manifest(path, root), cfg.input_size, augment_config=augment, **kwargs)

        off = AugmentConfig(enabled=False)
        test = from_manifest(cfg.test_manifest, off) if cfg.test_manifest else None
        return DatasetSplits(from_manifest(cfg.train_manifest, train_aug), from_manifest(cfg.val_manifest, off), test)

    def synthetic(n: int, seed: int, augment: AugmentConfig) -> ArrayAgeDataset:
        images, ages = synth_arrays(n, seed, cfg.input_size)
        return ArrayAgeDataset(images, ages, cfg.input_size, augment_config=augment, **kwargs)

    off = AugmentConfig(enabled=False)
    return DatasetSplits(
        synthetic(cfg.synthetic_train, cfg.seed, train_aug),
        synthetic(cfg.synthetic_val, cfg.seed + 1, off),
        synthetic(cfg.synthetic_test, cfg.seed + 2, off),
    )


def _config(args) -> RunConfig:
    return load_run_config(args.config, parse_overrides(args.set or []))


def cmd_synth(args) -> int:
    """Write a synthetic image directory and manifest."""
    if args.n < 1:
        raise UsageError([f"--n must be >= 1, got {args.n}"])
    manifest = export_synthetic(args.out, args.n, args.seed, args.size)
    print(f"wrote {args.n} images and {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    """Train one model as configured."""
    cfg = _config(args)
    out = cfg.resolved_output_dir()
    splits = build_splits(cfg)
    model = build_model(cfg.model_spec(), cfg.seed)
    resume = None
    if args.resume:
        resume = out / "last.ckpt" if args.resume == "last" else Path(args.resume)
    model, history = train(model, splits.train, splits.val, cfg.train_config(), output_dir=out, resume_from=resume)
    final = history.records[-1]
    print(f"epochs {len(history)}  final train loss {final.train_loss:.4f}  final validation loss {final.val_loss:.4f}")
    print(f"history: {out / 'history.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    """Score a checkpoint on the test split (validation if there is none)."""
    cfg = _config(args)
    out = cfg.resolved_output_dir()
    policy = args.policy or cfg.policy
    model, _ = load_checkpoint(args.checkpoint)
    if model.spec.input_size != cfg.input_size:
        cfg = cfg.model_copy(update={"input_size": model.spec.input_size})
    splits = build_splits(cfg)
    report = evaluate(model, splits.eval_split, policy, per_branch=args.per_branch)
    path = out / f"eval_{policy}.csv"
    report.write_csv(path)
    print(f"MAE {report.mae:.4f} over {report.sample_count} samples (policy {policy})")
    for branch, value in (report.per_branch_mae or {}).items():
        print(f"  {branch:<12} {value:.4f}")
    print(f"report: {path}")
    return EXIT_OK


def parse_ladder(tokens: Optional[Sequence[str]], lam: float) -> List[LossConfig]:
    if tokens is None:
        return [replace(row, lam=lam) for row in DEFAULT_LADDER]
    if not tokens:
        raise UsageError(["--ladder needs at least one combination"])
    try:
        return [LossConfig.parse(token, lam) for token in tokens]
    except GranageError as e:
        raise UsageError([str(e)]) from e


def cmd_ablate(args) -> int:
    """Run the loss-combination ladder and print the report table."""
    cfg = _config(args)
    ladder = parse_ladder(args.ladder, cfg.loss_lambda)
    out = cfg.resolved_output_dir()
    backbones = [b.strip() for b in args.backbones.split(",")] if args.backbones else [cfg.backbone]
    unknown = [b for b in backbones if b not in BACKBONES]
    if unknown:
        raise UsageError([f"unknown backbones {unknown}; choose from {sorted(BACKBONES)}"])
    too_small = [b for b in backbones if cfg.input_size < MIN_INPUT_SIZE[b]]
    if too_small:
        raise UsageError([f"input_size {cfg.input_size} is too small for {too_small}"])
    rows = []
    splits = build_splits(cfg)
    for backbone in backbones:
        spec = cfg.model_copy(update={"backbone": backbone}).model_spec()
        rows += run_ablation(
            cfg.train_config(),
            ladder,
            splits,
            model_spec=spec,
            output_dir=out / backbone,
            parallel=args.parallel,
            policy=cfg.policy,
        )
    csv_path = write_ablation_csv(rows, out / "ablation.csv")
    print(format_ablation_table(rows), end="")
    print(f"report: {csv_path}")
    failed = [r for r in rows if r.failed]
    for row in failed:
        print(f"failed {row.backbone} {row.loss_combination.name}: {row.error}", file=sys.stderr)
    return EXIT_RUNTIME if len(failed) == len(rows) else EXIT_OK


def cmd_verify(args) -> int:
    """Run invariant families and report pass/fail for each."""
    results = run_checks(args.families)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status}  {result.family:<12} {result.detail} ({result.seconds:.2f}s)")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="granage", description="Multi-granularity age estimation framework")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def with_config(p):
        p.add_argument("--config", help="YAML/JSON run config (flat keys)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    with_config(p)
    p.add_argument("--resume", nargs="?", const="last", help="checkpoint to resume (default: <out>/last.ckpt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--per-branch", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the loss-combination ladder")
    with_config(p)
    p.add_argument("--ladder", nargs="*", help="combinations such as 100 100+20 100+20+10+5+mse")
    p.add_argument("--backbones", help="comma-separated backbones (default: config backbone)")
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run invariant checks")
    p.add_argument("--families", nargs="+", choices=sorted(FAMILIES))
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=settings.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if settings.num_threads:
        torch.set_num_threads(settings.num_threads)
    args = build_parser().parse_args(argv)
    logger.debug("Running %s", args.command)
    try:
        return args.func(args)
    except ConfigError as e:
        for message in e.messages:
            print(f"config error: {message}", file=sys.stderr)
        return exit_code_for(e)
    except GranageError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:
        logger.exception("%s failed", args.command)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
