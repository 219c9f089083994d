"""Command-line entry point.

    lnsbnn pretrain|finetune|eval|export|selftest --config FILE [--from CKPT] [--out DIR] [--seed N]
    lnsbnn make-corpus DIR

Every training command writes into the output directory::

    ckpt/        last.ckpt after each epoch, final.ckpt at the end
    export/      model.lnsb from ``export``
    metrics.csv  one train row and one test row per epoch
    config.echo  the resolved configuration
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, parse_config
from .data import Dataset, IdxFormatError, load_idx
from .export import export_binary, load_exported
from .fileformat import CHECKPOINT_MAGIC, EXPORT_MAGIC, FormatError
from .metrics import write_metrics
from .model import MODEL_SPECS, InferenceModel
from .train import Checkpoint, DivergenceError, evaluate_model, finetune, pretrain_baseline

logger = logging.getLogger("lnsbnn")

COMMANDS = ("pretrain", "finetune", "eval", "export", "selftest")


class CommandError(RuntimeError):
    """Failure reported to the user with exit status 1."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lnsbnn", description="Binary CNN training with mapped binary weights.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name != "selftest", help="experiment config file")
        p.add_argument("--from", dest="source", type=Path, help="checkpoint (or exported model for eval)")
        p.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="overrides train.seed")
        p.add_argument("-q", "--quiet", action="store_true", help="only print warnings and results")
    corpus = sub.add_parser("make-corpus", help="write the synthetic 12x12 digits corpus as IDX files")
    corpus.add_argument("out", type=Path)
    corpus.add_argument("--train", type=int, default=6000)
    corpus.add_argument("--test", type=int, default=1000)
    corpus.add_argument("--seed", type=int, default=0)
    return parser


def _load_split(cfg: ExperimentConfig, split: str) -> Dataset:
    images, labels = cfg[f"data.{split}_images"], cfg[f"data.{split}_labels"]
    if images is None or labels is None:
        raise CommandError(f"config sets no data.{split}_images / data.{split}_labels")
    try:
        data = load_idx(images, labels, cfg["data.mean"], cfg["data.std"], split)
    except (OSError, IdxFormatError, ValueError) as e:
        raise CommandError(f"cannot load {split} data: {e}") from None
    return data.subset(cfg[f"data.{split}_limit"])


def _load_checkpoint(path: Path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except FileNotFoundError:
        raise CommandError(f"checkpoint not found: {path}") from None
    except (OSError, FormatError, KeyError, ValueError) as e:
        raise CommandError(f"cannot read checkpoint {path}: {e}") from None


def _load_model(path: Path) -> InferenceModel:
    """Inference model from either an exported file or a checkpoint."""
    try:
        with open(path, "rb") as f:
            magic = f.read(4)
    except OSError as e:
        raise CommandError(f"cannot open {path}: {e}") from None
    if magic == EXPORT_MAGIC:
        try:
            return load_exported(path)
        except (FormatError, KeyError, ValueError) as e:
            raise CommandError(f"cannot read exported model {path}: {e}") from None
    if magic == CHECKPOINT_MAGIC:
        return _load_checkpoint(path).inference_model()
    raise CommandError(f"{path} is neither a checkpoint nor an exported model")


def _prepare_out(out: Path, cfg: ExperimentConfig) -> None:
    (out / "ckpt").mkdir(parents=True, exist_ok=True)
    (out / "export").mkdir(exist_ok=True)
    (out / "config.echo").write_text(cfg.echo(), encoding="utf-8")


def _epoch_writer(out: Path):
    def on_epoch(ck: Checkpoint, records) -> None:
        for r in records:
            write_metrics(r, out / "metrics.csv")
        ck.save(out / "ckpt" / "last.ckpt")
    return on_epoch


def _train(command: str, cfg: ExperimentConfig, source: Path | None, out: Path) -> int:
    train, test = _load_split(cfg, "train"), _load_split(cfg, "test")
    tcfg = cfg.train_config()
    _prepare_out(out, cfg)
    try:
        if command == "pretrain":
            if source is not None:
                start = _load_checkpoint(source)
            else:
                width = cfg["model.width"]
                start = MODEL_SPECS[cfg["model.name"]](
                    train.images.shape[1:], train.num_classes, width, cfg["model.scale_mode"])
            ck = pretrain_baseline(start, train, tcfg, test, _epoch_writer(out))
        else:
            ck = finetune(_load_checkpoint(source), train, tcfg, cfg["finetune.mode"], test, _epoch_writer(out))
    except DivergenceError as e:
        e.checkpoint.save(out / "ckpt" / "last_good.ckpt")
        raise CommandError(f"{e}; last good state saved to {out / 'ckpt' / 'last_good.ckpt'}") from None
    except (KeyError, ValueError) as e:
        raise CommandError(str(e)) from None
    ck.save(out / "ckpt" / "final.ckpt")
    acc, _ = evaluate_model(ck.inference_model(), test)
    print(f"{command} done: epoch {ck.epoch}, test accuracy {acc:.4f}, checkpoint {out / 'ckpt' / 'final.ckpt'}")
    return 0


def run_command(command: str, cfg: ExperimentConfig | None, source: Path | None = None,
                out: Path | None = None) -> int:
    """Execute one subcommand; returns the process exit status."""
    if command == "selftest":
        from .selftest import run_selftest
        return 0 if run_selftest() else 1
    out = Path(out) if out is not None else cfg.out_dir
    if command in ("pretrain", "finetune"):
        return _train(command, cfg, source, out)
    if command == "eval":
        model = _load_model(source)
        acc, nll = evaluate_model(model, _load_split(cfg, "test"))
        print(f"accuracy {acc:.6g} loss {nll:.6g}")
        return 0
    if command == "export":
        ck = _load_checkpoint(source)
        target = out / "export" / "model.lnsb"
        target.parent.mkdir(parents=True, exist_ok=True)
        size = export_binary(ck, target)
        print(f"exported {target} ({size} bytes)")
        return 0
    raise CommandError(f"unknown command {command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "make-corpus":
        from .corpus import make_digits_corpus
        paths = make_digits_corpus(args.out, args.train, args.test, seed=args.seed)
        for p in paths.values():
            print(p)
        return 0
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    if args.command in ("finetune", "eval", "export") and args.source is None:
        parser.error(f"{args.command} requires --from <checkpoint>")
    try:
        cfg = None
        if args.config is not None:
            cfg = parse_config(args.config)
            if args.seed is not None:
                cfg = cfg.with_overrides(train__seed=args.seed)
        return run_command(args.command, cfg, args.source, args.out)
    except (ConfigError, CommandError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
