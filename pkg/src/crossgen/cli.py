"""``crossgen`` command line: prepare, train, eval, reproduce.

Options may also come from a ``key = value`` file given with ``--config``
(``#`` starts a comment). Precedence is command line, then file, then
built-in defaults; ``CROSSGEN_SEED`` supplies the seed when neither sets it.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .pipeline import (
    PipelineError,
    alpha_key,
    config_snapshot,
    evaluate,
    prepare,
    reproduce,
    run_directory,
    train_classifier,
    train_generative,
    write_text,
)
from .training import LOSS_MODES, TrainConfig

log = logging.getLogger("crossgen")

SEED_ENV = "CROSSGEN_SEED"
_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def _bool(text: str) -> bool:
    try:
        return _BOOL[str(text).strip().lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"not a boolean: {text!r}") from None


# name, type, default, nargs, help. Flags (type bool) are store_true on the command line.
OPTIONS = {
    "prepare": [
        ("mnist", Path, None, None, "MNIST directory (IDX files, optionally gzipped)"),
        ("fsdd", Path, None, None, "Free Spoken Digit Dataset directory"),
        ("scd", Path, None, None, "Speech Commands directory (digit word folders)"),
        ("out", Path, None, None, "output directory for pair files and manifest"),
        ("seed", int, None, None, "master seed"),
        ("only", str, "all", None, "all | fsdd | scd"),
        ("stratified", bool, False, None, "split each class 90/10 separately"),
        ("balanced", bool, False, None, "cap one-to-one pairs per class at the smallest class"),
    ],
    "train": [
        ("data", Path, None, None, "training pair file (aivae / aivaegan)"),
        ("test_data", Path, None, None, "test pair file used for the end-of-training grid"),
        ("mnist", Path, None, None, "MNIST directory (lenet5)"),
        ("alpha", float, [1.0], "+", "reconstruction weight(s); one run per value"),
        ("epochs", int, 100, None, "training epochs"),
        ("batch_size", int, 128, None, "minibatch size"),
        ("lr", float, None, None, "learning rate (default 1e-3 for aivae/lenet5, 2e-4 for aivaegan)"),
        ("latent_dim", int, 64, None, "latent dimension"),
        ("loss_mode", str, "non_saturating", None, "generator adversarial term: " + " | ".join(LOSS_MODES)),
        ("checkpoint_every", int, 10, None, "epochs between periodic checkpoints"),
        ("seed", int, None, None, "master seed"),
        ("out", Path, None, None, "parent directory of the run directory"),
    ],
    "eval": [
        ("model", Path, None, None, "aivae / aivaegan checkpoint"),
        ("data", Path, None, None, "test pair file"),
        ("classifier", Path, None, None, "lenet5 checkpoint"),
        ("mask_sweep", bool, False, None, "also run the latent masking sweep"),
        ("trials", int, 1, None, "mask draws per k"),
        ("use_mean", bool, False, None, "decode the posterior mean instead of a sample"),
        ("dataset", str, None, None, "dataset tag for the report (default: pair file name)"),
        ("seed", int, None, None, "evaluation seed"),
        ("out", Path, None, None, "parent directory of the run directory"),
    ],
    "reproduce": [
        ("data", Path, None, None, "directory written by 'crossgen prepare'"),
        ("mnist", Path, None, None, "MNIST directory (default: the one recorded by prepare)"),
        ("out", Path, None, None, "pipeline output directory"),
        ("scale", str, "desk", None, "desk (10/30/30 epochs) | full (100 epochs)"),
        ("epochs", int, None, None, "override every stage's epoch count"),
        ("batch_size", int, 128, None, "minibatch size"),
        ("trials", int, 1, None, "mask draws per k in the sweeps"),
        ("resume", bool, False, None, "skip stages recorded as finished in state.json"),
        ("paper_tables", bool, True, None, "run the accuracy-table and masking-sweep stages (always on)"),
        ("seed", int, None, None, "master seed"),
    ],
}
REQUIRED = {"prepare": ["out"], "train": ["out"], "eval": ["model", "data", "classifier", "out"],
            "reproduce": ["data", "out"]}


class ConfigError(ValueError):
    pass


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; returns raw strings."""
    entries = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key.replace("-", "_")] = value
    return entries


def _convert(command: str, key: str, value: str):
    spec = {o[0]: o for o in OPTIONS[command]}
    if key not in spec:
        raise ConfigError(f"unknown config key {key!r} for '{command}'")
    _, typ, _, nargs, _ = spec[key]
    try:
        if typ is bool:
            return _bool(value)
        if nargs == "+":
            return [typ(v) for v in value.replace(",", " ").split()]
        return typ(value)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossgen", description="Audio-to-image generation with VAEs and VAE-GANs.")
    parser.add_argument("--version", action="version", version=f"crossgen {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "prepare": "build aligned MNIST-FSDD / MNIST-SCD pair files",
        "train": "train aivae, aivaegan or lenet5",
        "eval": "score generated test images with a classifier",
        "reproduce": "run every training and evaluation behind the result tables",
    }
    for command, options in OPTIONS.items():
        p = sub.add_parser(command, help=helps[command], argument_default=argparse.SUPPRESS)
        if command == "train":
            p.add_argument("arch", choices=["aivae", "aivaegan", "lenet5"])
        p.add_argument("--config", type=Path, help="key = value file")
        p.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        for name, typ, default, nargs, text in options:
            flag = "--" + name.replace("_", "-")
            suffix = "" if default is None else f" (default: {default})"
            if typ is bool:
                p.add_argument(flag, dest=name, action="store_true", help=text + suffix)
                if default:
                    p.add_argument("--no-" + name.replace("_", "-"), dest=name, action="store_false")
            else:
                p.add_argument(flag, dest=name, type=typ, nargs=nargs, help=text + suffix)
    return parser


def resolve_options(command: str, cli: dict) -> dict:
    """Merge defaults < config file < command line, then apply the seed fallback."""
    options = {o[0]: o[2] for o in OPTIONS[command]}
    if cli.get("config") is not None:
        for key, value in read_config_file(cli["config"]).items():
            options[key] = _convert(command, key, value)
    options.update({k: v for k, v in cli.items() if k in options})
    if options.get("seed") is None:
        env = os.environ.get(SEED_ENV)
        try:
            options["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    missing = [k for k in REQUIRED[command] if options.get(k) is None]
    if missing:
        raise ConfigError(", ".join("--" + k.replace("_", "-") for k in missing) + " required")
    return options


def _train_config(arch: str, o: dict, alpha: float, dataset: str) -> TrainConfig:
    cfg = TrainConfig(latent_dim=o["latent_dim"], epochs=o["epochs"], batch_size=o["batch_size"], alpha=alpha,
                      seed=o["seed"], dataset=dataset, generator_loss_mode=o["loss_mode"],
                      checkpoint_every=o["checkpoint_every"])
    if o["lr"] is not None:
        field = {"aivae": "lr_aivae", "aivaegan": "lr_gan", "lenet5": "lr_lenet"}[arch]
        setattr(cfg, field, o["lr"])
        cfg.validate()
    return cfg


def cmd_prepare(o: dict) -> dict:
    if o["only"] not in ("all", "fsdd", "scd"):
        raise ConfigError("--only must be all, fsdd or scd")
    manifest = prepare(o["mnist"], o["fsdd"], o["scd"], o["out"], o["seed"], o["only"], o["stratified"], o["balanced"])
    write_text(Path(o["out"]) / "config.txt", config_snapshot(o))
    print(f"prepared {o['out']}")
    for name, info in manifest["files"].items():
        print(f"{name}\t{info['pairs']}\t{info['crc32']}")
    return manifest


def cmd_train(o: dict, arch: str) -> list:
    runs = []
    if arch == "lenet5":
        if o["mnist"] is None:
            raise ConfigError("--mnist required for lenet5")
        run = run_directory(o["out"], o["seed"], "lenet5")
        cfg = _train_config(arch, o, 1.0, str(o["mnist"]))
        write_text(run / "config.txt", config_snapshot({**o, "arch": arch}))
        result = train_classifier(cfg, o["mnist"], run)
        print(f"{run}\ttest_accuracy={result['accuracy']:.4f}")
        return [run]
    if o["data"] is None:
        raise ConfigError(f"--data required for {arch}")
    alphas = o["alpha"] if arch == "aivaegan" else [1.0]
    for alpha in alphas:
        tag = f"{arch}-a{alpha_key(alpha)}" if arch == "aivaegan" else arch
        run = run_directory(o["out"], o["seed"], tag)
        cfg = _train_config(arch, o, alpha, str(o["data"]))
        write_text(run / "config.txt", config_snapshot({**o, "arch": arch, "alpha": alpha}))
        train_generative(arch, cfg, o["data"], run, o["test_data"])
        print(run)
        runs.append(run)
    return runs


def cmd_eval(o: dict) -> Path:
    run = run_directory(o["out"], o["seed"], "eval")
    write_text(run / "config.txt", config_snapshot(o))
    dataset = o["dataset"] or Path(o["data"]).name.split(".")[0]
    res = evaluate(o["model"], o["data"], o["classifier"], run, o["seed"], dataset=dataset,
                   sweep=o["mask_sweep"], trials=o["trials"], use_mean=o["use_mean"])
    print(f"{run}\taccuracy={res.accuracy:.4f}")
    return run


def cmd_reproduce(o: dict) -> dict:
    summary = reproduce(o["data"], o["out"], o["seed"], scale=o["scale"], epochs=o["epochs"], mnist=o["mnist"],
                        resume=o["resume"], trials=o["trials"], batch_size=o["batch_size"])
    print(Path(o["out"]) / "summary.txt")
    for v in summary["verdicts"]:
        print(f"{'PASS' if v['passed'] else 'FAIL'}\t{v['check']}")
    return summary


def error_line(stage: str, exc: BaseException) -> str:
    return "error: " + json.dumps({"stage": stage, "type": type(exc).__name__, "message": str(exc)}, sort_keys=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    logging.basicConfig(level=args.pop("log_level", "INFO"), format="%(levelname)s %(name)s: %(message)s")
    command = args.pop("command")
    arch = args.pop("arch", None)
    stage = command
    try:
        options = resolve_options(command, args)
        if command == "prepare":
            cmd_prepare(options)
        elif command == "train":
            cmd_train(options, arch)
        elif command == "eval":
            cmd_eval(options)
        else:
            cmd_reproduce(options)
    except PipelineError as exc:
        print(error_line(exc.stage, exc), file=sys.stderr)
        return 1
    except Exception as exc:  # every failure becomes one parsable line and a nonzero exit
        log.debug("failure detail", exc_info=True)
        print(error_line(stage, exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
