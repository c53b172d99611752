import argparse
import asyncio
import logging
from typing import Any, Callable, Dict, List, Optional

from app.config.run_config import load_run_config, parse_assignments
from app.config.settings import Settings
from app.errors import UsageError
from app.models.run import RunConfig

logger = logging.getLogger(__name__)

# flag destination -> dotted RunConfig key
RUN_FLAGS = {
    "scheme": "scheme",
    "preset": "preset",
    "dataset": "dataset",
    "data_dir": "data_dir",
    "output_dir": "output_dir",
    "run_name": "run_name",
    "fraction": "fraction",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "seed": "seed",
    "dtype": "dtype",
    "val_limit": "val_limit",
    "train_limit": "train_limit",
    "log_every": "log_every",
    "lr": "optimizer.lr",
    "weight_decay": "optimizer.weight_decay",
    "optimizer_mode": "optimizer.mode",
    "shared_update": "optimizer.shared_update",
    "alpha": "weights.alpha",
    "beta": "weights.beta",
    "temperature": "weights.temperature",
    "agent": "arch.agent_variant",
    "downsample": "arch.downsample",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (a --config file overrides these)")
    g.add_argument("--config", help="file of `key = value` lines with dotted keys")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any RunConfig field")
    g.add_argument("--scheme", choices=["scratch-vit", "scratch-agent", "joint", "shared"])
    g.add_argument("--preset", help="architecture preset: tiny-desk, vit-s, vit-b")
    g.add_argument("--dataset", choices=["cifar10", "cifar100"])
    g.add_argument("--data-dir")
    g.add_argument("--output-dir")
    g.add_argument("--run-name")
    g.add_argument("--fraction", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--dtype", choices=["float32", "float64"])
    g.add_argument("--val-limit", type=int)
    g.add_argument("--train-limit", type=int)
    g.add_argument("--log-every", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--optimizer-mode", choices=["adamw", "sgd"])
    g.add_argument("--shared-update", choices=["aligned", "mean", "vit-only"])
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--temperature", type=float)
    g.add_argument("--agent", choices=["base", "res-like"])
    g.add_argument("--downsample", choices=["avg-pool", "strided-conv"])
    g.add_argument("--no-augment", action="store_true", help="disable crop and flip")


def run_config_from_args(args: argparse.Namespace, settings: Settings) -> RunConfig:
    flags: Dict[str, Any] = {"dtype": settings.dtype}
    # preset first so explicit arch flags land on top of it
    if args.preset:
        flags["preset"] = args.preset
    for dest, key in RUN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None and dest != "preset":
            flags[key] = value
    if getattr(args, "no_augment", False):
        flags["augment.crop"] = False
        flags["augment.flip"] = False
    flags.update(parse_assignments(args.set))
    cfg = load_run_config(flags, args.config)
    if cfg.dataset == "cifar100" and cfg.arch.classes == 10:
        cfg = load_run_config({"arch.classes": 100}, base=cfg)
    return cfg


def _floats(text: Optional[str]) -> List[float]:
    if not text:
        return []
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got '{text}'")


# -- verbs -----------------------------------------------------------------------------------

def cmd_train(args, settings: Settings) -> int:
    from app.services.trainer_service import train

    summary = train(run_config_from_args(args, settings), settings, resume=args.resume)
    print(f"{summary.run_name}: ViT {summary.final_val_acc_vit} agent {summary.final_val_acc_agent} "
          f"(best epoch {summary.best_epoch})")
    return 0


def cmd_ablate(args, settings: Settings) -> int:
    from app.services.trainer_service import ablate

    if not args.toggle:
        raise UsageError("ablate needs at least one --toggle")
    for summary in ablate(run_config_from_args(args, settings), args.toggle, settings):
        print(f"{summary.run_name} [{', '.join(summary.toggles)}]: ViT {summary.final_val_acc_vit} "
              f"agent {summary.final_val_acc_agent}")
    return 0


def cmd_sweep(args, settings: Settings) -> int:
    from app.services.sweep_service import sweep

    path = sweep(run_config_from_args(args, settings), settings, _floats(args.alphas), _floats(args.betas),
                 _floats(args.temperatures), name=args.name)
    print(path)
    return 0


def cmd_curves(args, settings: Settings) -> int:
    from app.services.curves_service import export_curves

    csv_path, svg_path = export_curves(args.paths, args.out, title=args.title)
    print(f"{csv_path}\n{svg_path}")
    return 0


def _side(text: str) -> tuple:
    parts = text.lower().split("x")
    try:
        shape = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"feature shape must look like 4x4, got '{text}'")
    if len(shape) == 1:
        shape = shape * 2
    if len(shape) != 2:
        raise UsageError(f"feature shape must look like 4x4, got '{text}'")
    return shape


def cmd_inspect_phi(args, settings: Settings) -> int:
    from app.services.inspect_service import inspect_phi

    print(inspect_phi(args.out, _side(args.feature), heads=args.heads, kernel=args.kernel))
    return 0


def cmd_inspect_attention(args, settings: Settings) -> int:
    from app.services.inspect_service import inspect_attention

    written = inspect_attention(args.checkpoint, args.out, settings, image_index=args.image)
    print(f"{len(written)} attention matrices in {args.out}")
    return 0


def cmd_check(args, settings: Settings) -> int:
    from app.services.check_service import format_results, run_checks

    results = run_checks(args.suite, seed=args.seed)
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_params(args, settings: Settings) -> int:
    from app.services.inspect_service import format_parameter_report, parameter_report

    print(format_parameter_report(parameter_report(args.preset or None, classes=args.classes)))
    return 0


def cmd_download(args, settings: Settings) -> int:
    from app.services.dataset_service import download_cifar

    written = asyncio.run(download_cifar(args.dataset, settings, args.data_dir))
    print(f"{len(written)} files")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bootvit", description="Train ViTs bootstrapped by an agent CNN")
    parser.add_argument("--verbose", "-v", action="store_true", help="DEBUG logging")
    parser.add_argument("--debug", action="store_true", help="show tracebacks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one scheme")
    _add_run_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from checkpoint_last.bin")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("ablate", help="train with objective/architecture toggles")
    _add_run_flags(p)
    p.add_argument("--toggle", action="append", default=[],
                   help="no-mutual, no-feat, no-decay, adapt=AP-2D, drop-layer=N|all, agent=base|res-like")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("sweep", help="alpha x beta grid and temperature line")
    _add_run_flags(p)
    p.add_argument("--alphas", help="comma-separated values")
    p.add_argument("--betas", help="comma-separated values")
    p.add_argument("--temperatures", help="comma-separated values")
    p.add_argument("--name", default="sweep")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("curves", help="merge metrics.csv files into an SVG and CSV")
    p.add_argument("paths", nargs="*", help="metrics.csv files or run directories")
    p.add_argument("--out", default="curves")
    p.add_argument("--title", default="Validation accuracy")
    p.set_defaults(handler=cmd_curves)

    p = sub.add_parser("inspect-phi", help="dump selection matrices as triplets")
    p.add_argument("--feature", required=True, help="feature map, e.g. 4x4")
    p.add_argument("--heads", type=int)
    p.add_argument("--kernel", type=int)
    p.add_argument("--out", default="phi.txt")
    p.set_defaults(handler=cmd_inspect_phi)

    p = sub.add_parser("inspect-attention", help="dump ViT attention of a checkpoint as triplets")
    p.add_argument("checkpoint")
    p.add_argument("--image", type=int, default=0, help="validation image index")
    p.add_argument("--out", default="attention")
    p.set_defaults(handler=cmd_inspect_attention)

    p = sub.add_parser("check", help="run the built-in oracle suites")
    p.add_argument("--suite", action="append", default=[])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_check)

    p = sub.add_parser("params", help="parameter counts of the presets")
    p.add_argument("--preset", action="append", default=[])
    p.add_argument("--classes", type=int, default=10)
    p.set_defaults(handler=cmd_params)

    p = sub.add_parser("download", help="fetch a CIFAR binary archive")
    p.add_argument("--dataset", choices=["cifar10", "cifar100"], default="cifar10")
    p.add_argument("--data-dir")
    p.set_defaults(handler=cmd_download)
    return parser


def dispatch(args: argparse.Namespace, settings: Settings) -> int:
    handler: Callable[[argparse.Namespace, Settings], int] = args.handler
    return handler(args, settings)
