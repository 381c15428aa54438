"""Command-line front end: gen-data, train, grad-check, eval, sweep, heatmap.

Every run resolves its configuration from (defaults <- config file <- flags),
rejects unknown config-file keys, and prints the fully-resolved config
before executing, so any run can be reproduced from its own output. Exit
codes: 0 success, 1 usage error, 2 data/config error, 3 numerical failure.

Help strings tag each default's provenance: [PAPER-default] values come from
the published setup, [artifact-default] values are desk-scale choices.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import kernels
from .data import SyntheticSpec, generate_synthetic, read_batch, write_batch
from .errors import FormatError, GrmError, NonFiniteLossError, ParameterError
from .evaluate import evaluate, export_heatmap, run_sweep
from .losses import LossWeights
from .model import ABLATION_ARMS, apply_arm
from .trainer import ProbeSizes, TrainConfig, load_checkpoint, save_checkpoint, train, verify_gradients

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse's default exit code clashes with ours
        raise UsageError(message)


def _opt(parser, name, type_, default, help_, paper=False):
    tag = "[PAPER-default]" if paper else "[artifact-default]"
    parser.add_argument(
        name,
        type=type_,
        default=None,
        help=f"{help_} (default: {default}) {tag}",
    )


TRAIN_DEFAULTS = {
    "epochs": 30,
    "batch_size": 32,
    "lr": 2e-2,
    "weight_decay": 0.01,
    "optimizer": "adamw",
    "seed": 0,
    "alpha": 0.2,
    "a": 0.4,
    "b": 0.4,
    "c": 0.2,
    "lambda_recon": 0.1,
    "lambda_reg": 0.01,
    "negative_mode": "sum_all",
    "K": 5,
    "tau": 1.0,
    "eval_every": 0,
    "d_hidden": 0,  # 0 -> same as d
    "clip_norm": 0.0,  # 0 -> disabled
    "entropy_source": "raw",
    "kl_per_dim": 1,
    "adapter_bias": 1,
    "phi_layers": 1,
    "region_noise": "per_pair",
    "arm": "full",
}

_PAPER_KEYS = {"epochs", "optimizer", "alpha", "a", "b", "c", "K"}


def _add_train_options(p):
    p.add_argument("--images", type=str, default=None, help="GRT1 image batch path")
    p.add_argument("--texts", type=str, default=None, help="GRT1 text batch path")
    for key, default in TRAIN_DEFAULTS.items():
        flag = "--" + key.replace("_", "-")
        type_ = type(default)
        help_ = {
            "epochs": "training epochs",
            "batch_size": "instances per step",
            "lr": "learning rate",
            "weight_decay": "decoupled weight decay",
            "optimizer": "sgd | adamw",
            "seed": "seed for init/noise/shuffling substreams",
            "alpha": "contrastive margin",
            "a": "weight of the original-level loss",
            "b": "weight of the gated-level loss",
            "c": "weight of the region-level loss",
            "lambda_recon": "reconstruction coefficient",
            "lambda_reg": "KL+entropy coefficient",
            "negative_mode": "sum_all | hardest",
            "K": "number of region prompts",
            "tau": "gating temperature",
            "eval_every": "log training-set retrieval every N steps (0 = off)",
            "d_hidden": "adapter hidden width (0 = feature dim)",
            "clip_norm": "global gradient-norm clip (0 = off)",
            "entropy_source": "raw | normalized attention for the entropy term",
            "kl_per_dim": "1 divides the KL by the feature dim, 0 is strict",
            "adapter_bias": "1 adds scorer biases, 0 is strict",
            "phi_layers": "layers in the log-variance head (1 or 2)",
            "region_noise": "per_pair | per_region reparameterization noise",
            "arm": f"ablation arm: {', '.join(ABLATION_ARMS)}",
        }[key]
        _opt(p, flag, type_, default, help_, paper=key in _PAPER_KEYS)


def _build_parser():
    root = _Parser(prog="grm", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    root.add_argument("--json", action="store_true", help="emit machine-readable JSON errors on stderr")
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired corpus", parents=[])
    p.add_argument("--config", type=str, default=None, help="key=value config file")
    p.add_argument("--out", type=str, required=True, help="output directory")
    _opt(p, "--B", int, 32, "instances")
    _opt(p, "--Lv", int, 16, "image tokens per instance")
    _opt(p, "--Lt", int, 8, "text tokens per instance")
    _opt(p, "--d", int, 32, "embedding dim")
    _opt(p, "--n-concepts", int, 4, "planted concepts per pair")
    _opt(p, "--noise-scale", float, 0.1, "noise stddev around concepts")
    _opt(p, "--seed", int, 7, "generator seed")

    p = sub.add_parser("train", help="optimize the alignment head on a paired corpus")
    p.add_argument("--config", type=str, default=None, help="key=value config file")
    p.add_argument("--out", type=str, required=True, help="output directory")
    p.add_argument("--log", type=str, default=None, help="training log filename (under --out)")
    p.add_argument("--ckpt", type=str, default=None, help="checkpoint filename (under --out)")
    _add_train_options(p)

    p = sub.add_parser("grad-check", help="finite-difference check of the full objective")
    p.add_argument("--config", type=str, default=None, help="key=value config file")
    _opt(p, "--seed", int, 1, "probe seed")
    _opt(p, "--B", int, 4, "probe batch")
    _opt(p, "--Lv", int, 6, "probe image tokens")
    _opt(p, "--Lt", int, 4, "probe text tokens")
    _opt(p, "--d", int, 8, "probe dim")
    _opt(p, "--K", int, 3, "probe prompts")
    _opt(p, "--h", float, 1e-5, "central-difference step")
    _opt(p, "--tolerance", float, 1e-4, "max relative error allowed")

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    p.add_argument("--config", type=str, default=None, help="key=value config file")
    p.add_argument("--ckpt", type=str, required=True, help="checkpoint path")
    p.add_argument("--images", type=str, required=True)
    p.add_argument("--texts", type=str, required=True)
    p.add_argument("--gt", type=str, default=None, help="JSON file: per-image lists of text indices")
    p.add_argument("--out", type=str, default=None, help="directory for eval_report.json")

    p = sub.add_parser("sweep", help="train/evaluate across one axis of values")
    p.add_argument("--config", type=str, default=None, help="key=value config file")
    p.add_argument("--out", type=str, required=True, help="output directory")
    p.add_argument("--axis", type=str, required=True, help="K | abc_weights | tau | ablation_arm")
    p.add_argument("--values", type=str, required=True,
                   help="comma-separated values; abc_weights uses a:b pairs (c = 1-a-b)")
    _add_train_options(p)

    p = sub.add_parser("heatmap", help="export alignment heatmap data for one pair")
    p.add_argument("--config", type=str, default=None, help="key=value config file")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--images", type=str, required=True)
    p.add_argument("--texts", type=str, required=True)
    p.add_argument("--out", type=str, required=True, help="output directory")
    _opt(p, "--index", int, 0, "pair index to export")
    _opt(p, "--prefix", str, "heatmap", "filename prefix under --out")
    return root


def _read_config_file(path: str) -> dict:
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{lineno}: expected key = value")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = val
    return values


def _resolve(args, schema: dict) -> dict:
    """defaults <- config file <- explicit flags; unknown file keys rejected."""
    resolved = dict(schema)
    if getattr(args, "config", None):
        file_values = _read_config_file(args.config)
        for key, raw in file_values.items():
            if key not in schema:
                raise ParameterError(f"unknown config key {key!r} in {args.config}")
            resolved[key] = type(schema[key])(raw)
    for key in schema:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            resolved[key] = flag_val
    return resolved


def _print_resolved(command: str, resolved: dict, extra: dict | None = None):
    print(f"resolved config for {command}:")
    merged = dict(resolved)
    if extra:
        merged.update(extra)
    for key in sorted(merged):
        print(f"  {key} = {merged[key]}")


def _train_config(resolved: dict) -> TrainConfig:
    weights = LossWeights(
        a=resolved["a"],
        b=resolved["b"],
        c=resolved["c"],
        alpha=resolved["alpha"],
        lambda_recon=resolved["lambda_recon"],
        lambda_reg=resolved["lambda_reg"],
        negative_mode=resolved["negative_mode"],
    )
    config = TrainConfig(
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        learning_rate=resolved["lr"],
        weight_decay=resolved["weight_decay"],
        optimizer=resolved["optimizer"],
        seed=resolved["seed"],
        weights=weights,
        K=resolved["K"],
        tau=resolved["tau"],
        eval_every=resolved["eval_every"],
        d_hidden=resolved["d_hidden"] or None,
        clip_norm=resolved["clip_norm"] or None,
        entropy_source=resolved["entropy_source"],
        kl_per_dim=bool(resolved["kl_per_dim"]),
        adapter_bias=bool(resolved["adapter_bias"]),
        phi_layers=resolved["phi_layers"],
        region_noise=resolved["region_noise"],
    )
    arm = resolved["arm"]
    config, weights = apply_arm(config, config.weights, arm)
    config = replace(config, weights=weights)
    return config.validate()


def _load_pair(images_path, texts_path):
    if not images_path or not texts_path:
        raise ParameterError("--images and --texts are required")
    return read_batch(images_path), read_batch(texts_path)


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    schema = {"B": 32, "Lv": 16, "Lt": 8, "d": 32, "n_concepts": 4, "noise_scale": 0.1, "seed": 7}
    resolved = _resolve(args, schema)
    spec = SyntheticSpec(
        B=resolved["B"], L_v=resolved["Lv"], L_t=resolved["Lt"], d=resolved["d"],
        n_concepts=resolved["n_concepts"], noise_scale=resolved["noise_scale"], seed=resolved["seed"],
    )
    spec.validate()
    _print_resolved("gen-data", resolved, {"out": args.out})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images, texts = generate_synthetic(spec)
    write_batch(images, out / "images.grt1")
    write_batch(texts, out / "texts.grt1")
    print(f"wrote {out / 'images.grt1'} and {out / 'texts.grt1'}")
    return EXIT_OK


def _cmd_train(args) -> int:
    resolved = _resolve(args, TRAIN_DEFAULTS)
    config = _train_config(resolved)
    _print_resolved("train", resolved, {"images": args.images, "texts": args.texts, "out": args.out})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / (args.log or "train_log.jsonl")
    ckpt_path = out / (args.ckpt or "checkpoint.grmc")
    try:
        images, texts = _load_pair(args.images, args.texts)
        ckpt, _ = train(images, texts, config, log_path=log_path)
    except NonFiniteLossError as err:
        rescue = out / "last_good.grmc"
        if getattr(err, "last_good", None) is not None:
            save_checkpoint(err.last_good, rescue)
        _fail(args, err, f"aborted on non-finite loss; last good checkpoint at {rescue}")
        return EXIT_NUMERIC
    save_checkpoint(ckpt, ckpt_path)
    print(f"trained {ckpt.step} steps; checkpoint {ckpt_path}, log {log_path}")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    schema = {"seed": 1, "B": 4, "Lv": 6, "Lt": 4, "d": 8, "K": 3, "h": 1e-5, "tolerance": 1e-4}
    resolved = _resolve(args, schema)
    _print_resolved("grad-check", resolved)
    config = TrainConfig(seed=resolved["seed"], batch_size=max(2, resolved["B"]))
    probe = ProbeSizes(B=resolved["B"], L_v=resolved["Lv"], L_t=resolved["Lt"],
                       d=resolved["d"], K=resolved["K"])
    ok, report = verify_gradients(config, probe, h=resolved["h"], tolerance=resolved["tolerance"])
    for name in sorted(report):
        status = "ok" if report[name] < resolved["tolerance"] else "FAIL"
        print(f"  {name}: max relative error {report[name]:.3e} [{status}]")
    print(f"grad-check {'passed' if ok else 'FAILED'} at tolerance {resolved['tolerance']}")
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_eval(args) -> int:
    _print_resolved("eval", {"ckpt": args.ckpt, "images": args.images, "texts": args.texts, "gt": args.gt})
    ckpt = load_checkpoint(args.ckpt)
    images, texts = _load_pair(args.images, args.texts)
    gt = None
    if args.gt:
        with open(args.gt) as f:
            gt = json.load(f)
    reports = evaluate(ckpt, images, texts, ground_truth=gt)
    payload = []
    for r in reports:
        row = {"level": r.level, "direction": r.direction, "rsum": r.rsum}
        row.update({f"r@{k}": v for k, v in r.r_at.items()})
        payload.append(row)
        r_str = ", ".join(f"R@{k}={v:.1f}" for k, v in r.r_at.items())
        print(f"  {r.level:9s} {r.direction:13s} {r_str}  rSum={r.rsum:.1f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval_report.json", "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        print(f"wrote {out / 'eval_report.json'}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    resolved = _resolve(args, TRAIN_DEFAULTS)
    config = _train_config(resolved)
    values = [v for v in args.values.split(",") if v]
    _print_resolved("sweep", resolved, {"axis": args.axis, "values": args.values,
                                        "images": args.images, "texts": args.texts, "out": args.out})
    images, texts = _load_pair(args.images, args.texts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sweep.csv"
    rows, _ = run_sweep(config, args.axis, values, images, texts, csv_path=csv_path)
    for row in rows:
        print(f"  {row['config_delta']}: total={row['total']:.4f} rsum={row['rsum']:.1f}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def _cmd_heatmap(args) -> int:
    schema = {"index": 0, "prefix": "heatmap"}
    resolved = _resolve(args, schema)
    _print_resolved("heatmap", resolved, {"ckpt": args.ckpt, "images": args.images,
                                          "texts": args.texts, "out": args.out})
    ckpt = load_checkpoint(args.ckpt)
    images, texts = _load_pair(args.images, args.texts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = export_heatmap(ckpt, images, texts, resolved["index"], str(out / resolved["prefix"]))
    for path in written:
        print(f"  wrote {path}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "grad-check": _cmd_grad_check,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "heatmap": _cmd_heatmap,
}


def _fail(args, err, message: str):
    if getattr(args, "json", False):
        print(json.dumps({"error": type(err).__name__, "message": str(err)}), file=sys.stderr)
    else:
        print(f"error: {message}", file=sys.stderr)


def main(argv=None) -> int:
    parser = _build_parser()
    args = None
    try:
        args = parser.parse_args(argv)
        cap = kernels.configure_threads()
        if "GRM_THREADS" in os.environ:
            print(f"thread cap: {cap}")
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # argparse --help
        return int(err.code or 0)
    except NonFiniteLossError as err:
        _fail(args, err, str(err))
        return EXIT_NUMERIC
    except ParameterError as err:
        # config/value problems found after flag parsing
        _fail(args, err, str(err))
        return EXIT_USAGE if _is_value_error(err) else EXIT_DATA
    except (FormatError, GrmError, OSError, ValueError) as err:
        _fail(args, err, str(err))
        return EXIT_DATA


def _is_value_error(err: ParameterError) -> bool:
    # unknown config-file keys are data/config problems (exit 2); bad flag
    # values are usage problems (exit 1)
    return "config key" not in str(err) and "config file" not in str(err)


if __name__ == "__main__":
    sys.exit(main())
