"""Command-line interface.

    apvit train     --out DIR [--config FILE] [--set key=value ...]
    apvit eval      --checkpoint FILE --data DIR [--config ...]
    apvit flops     [--config ...] [--json]
    apvit gradcheck [--config ...] [--seed N]
    apvit visualize --checkpoint FILE --out DIR [--config ...] [--count N]
    apvit ablate    --out DIR [--config ...]
    apvit gen-data  --out DIR [--config ...]

Configuration is a flat key=value file; '#' starts a comment, blank lines are
skipped, and an unknown key is an error naming its line.  ``--set key=value``
(repeatable) overrides file values.  Exit codes: 0 success, 1 a check or
command failed, 2 bad usage or configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import count_flops, grad_check, render_overlay
from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
    write_image,
)
from .encoder import AtpVariant
from .model import (
    ApvitConfig,
    HeadKind,
    PoolingMode,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    with_pooling,
)
from .pooling import CriterionKind
from .stem import StemConfig
from .train import KrSchedule, TrainConfig, evaluate, train_loop


class ConfigError(Exception):
    pass


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _channels(text: str) -> tuple:
    return tuple(int(p) for p in text.split(","))


# key -> (caster, description).  One registry for every subcommand; keys a
# command does not use are simply ignored by its builders.
KEYS = {
    # model
    "embed_dim": (int, "transformer width"),
    "blocks": (int, "transformer depth (even)"),
    "heads": (int, "attention heads"),
    "k": (int, "patch-pooling keep count"),
    "r": (float, "token-pooling keep ratio per late block"),
    "criterion": (str, "patch score: sum|abs|max|lanet"),
    "atp_variant": (str, "token score: sum|abs|max"),
    "pooling_mode": (str, "patch pooling: hard|soft|none"),
    "head": (str, "readout: clt|gap"),
    "lanet_ratio": (int, "learned-criterion bottleneck ratio"),
    "linear_tap": (_bool, "score the pre-ReLU stem map"),
    "num_classes": (int, "classes (model head and generator)"),
    # stem / image geometry (shared with the generator)
    "stem_channels": (_channels, "stem widths, e.g. 16,32"),
    "side": (int, "image side in pixels"),
    "input_channels": (int, "image channels: 1|3"),
    # training
    "base_lr": (float, "peak learning rate"),
    "momentum": (float, "SGD momentum"),
    "weight_decay": (float, "L2 coefficient"),
    "clip_norm": (float, "global gradient-norm ceiling"),
    "batch_size": (int, "training batch size"),
    "total_steps": (int, "optimization steps"),
    "seed": (int, "initialization and batch-order seed"),
    "kr_schedule": (str, "pooling anneal: constant|linear-decay"),
    "eval_every": (int, "steps between metric records"),
    # data generation
    "data_seed": (int, "synthetic generator seed"),
    "train_count": (int, "generated training samples"),
    "test_count": (int, "generated test samples"),
    "background": (int, "background grey level"),
    "texture": (float, "background checkerboard amplitude"),
    "noise_sigma": (float, "background noise sigma"),
    "glyph_value": (int, "glyph stroke grey level"),
    "occluder_count": (int, "occluders per image"),
    "occluder_min": (int, "smallest occluder side"),
    "occluder_max": (int, "largest occluder side"),
    "occluder_value": (int, "occluder grey level"),
}

# config-file key -> SyntheticSpec field; defaults live on the dataclass
DATA_FIELDS = {
    "side": "side",
    "input_channels": "channels",
    "num_classes": "num_classes",
    "train_count": "train_count",
    "test_count": "test_count",
    "data_seed": "data_seed",
    "background": "background",
    "texture": "texture",
    "noise_sigma": "noise_sigma",
    "glyph_value": "glyph_value",
    "occluder_count": "occluder_count",
    "occluder_min": "occluder_min",
    "occluder_max": "occluder_max",
    "occluder_value": "occluder_value",
}


def _parse_assignment(text: str, where: str, settings: dict) -> None:
    if "=" not in text:
        raise ConfigError(f"{where}: expected key=value, got {text!r}")
    key, _, value = text.partition("=")
    key = key.strip()
    value = value.strip()
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    caster = KEYS[key][0]
    try:
        settings[key] = caster(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from exc


def load_settings(config_path, overrides) -> dict:
    settings: dict = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for lineno, raw in enumerate(path.read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            _parse_assignment(line, f"{path}:{lineno}", settings)
    for item in overrides or ():
        _parse_assignment(item, f"--set {item}", settings)
    return settings


def build_model_config(settings: dict) -> ApvitConfig:
    channels = settings.get("stem_channels", (16, 32))
    try:
        config = ApvitConfig(
            stem=StemConfig(
                stages=len(channels),
                channels=channels,
                input_side=settings.get("side", 32),
                input_channels=settings.get("input_channels", 1),
            ),
            embed_dim=settings.get("embed_dim", 64),
            blocks=settings.get("blocks", 8),
            heads=settings.get("heads", 4),
            k=settings.get("k", 48),
            r=settings.get("r", 0.8),
            criterion=CriterionKind(settings.get("criterion", "abs")),
            atp_variant=AtpVariant(settings.get("atp_variant", "sum")),
            pooling_mode=PoolingMode(settings.get("pooling_mode", "hard")),
            head=HeadKind(settings.get("head", "clt")),
            num_classes=settings.get("num_classes", 4),
            lanet_ratio=settings.get("lanet_ratio", 8),
            linear_tap=settings.get("linear_tap", True),
        )
        config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return config


def build_train_config(settings: dict) -> TrainConfig:
    try:
        tcfg = TrainConfig(
            base_lr=settings.get("base_lr", 1e-3),
            momentum=settings.get("momentum", 0.9),
            weight_decay=settings.get("weight_decay", 5e-4),
            clip_norm=settings.get("clip_norm", 10.0),
            batch_size=settings.get("batch_size", 32),
            total_steps=settings.get("total_steps", 600),
            seed=settings.get("seed", 0),
            kr_schedule=KrSchedule(settings.get("kr_schedule", "constant")),
            eval_every=settings.get("eval_every", 100),
        )
        tcfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return tcfg


def build_data_spec(settings: dict) -> SyntheticSpec:
    kwargs = {field: settings[key] for key, field in DATA_FIELDS.items() if key in settings}
    try:
        spec = SyntheticSpec(**kwargs)
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return spec


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    settings = load_settings(args.config, args.set)
    config = build_model_config(settings)
    tcfg = build_train_config(settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        train_set = load_dataset(Path(args.data) / "train")
        test_set = load_dataset(Path(args.data) / "test")
    else:
        train_set, test_set = generate_synthetic(build_data_spec(settings))
    params = init_params(config, tcfg.seed)
    history = train_loop(
        params,
        config,
        tcfg,
        train_set.images,
        train_set.labels,
        test_set.images,
        test_set.labels,
        metrics_path=out / "metrics.jsonl",
    )
    save_checkpoint(out / "checkpoint.ckpt", params)
    final = history[-1]
    print(json.dumps(final))
    return 0


def cmd_eval(args) -> int:
    settings = load_settings(args.config, args.set)
    config = build_model_config(settings)
    params = load_checkpoint(args.checkpoint, config)
    dataset = load_dataset(args.data)
    result = evaluate(params, config, dataset.images, dataset.labels)
    print(
        json.dumps(
            {
                "overall_acc": result.overall_acc,
                "mean_class_acc": result.mean_class_acc,
                "per_class_acc": [float(a) for a in result.per_class_acc],
                "confusion": [int(x) for x in result.confusion.reshape(-1)],
            }
        )
    )
    return 0


def cmd_flops(args) -> int:
    settings = load_settings(args.config, args.set)
    config = build_model_config(settings)
    report = count_flops(config)
    if args.json:
        print(json.dumps(report.to_json()))
    else:
        print(report.table())
    return 0


def cmd_gradcheck(args) -> int:
    settings = load_settings(args.config, args.set)
    config = build_model_config(settings)
    report = grad_check(config, seed=args.seed)
    verdict = "pass" if report.passed else "FAIL"
    print(
        f"{report.combo}: {len(report.coords)} coordinates, "
        f"max rel err {report.max_rel_err:.3e}, {verdict}"
    )
    for failure in report.failures[:20]:
        print(
            f"  {failure.param}[{failure.index}]: analytic {failure.analytic:.6e} "
            f"numeric {failure.numeric:.6e} rel {failure.rel_err:.3e}"
        )
    return 0 if report.passed else 1


def cmd_visualize(args) -> int:
    settings = load_settings(args.config, args.set)
    config = build_model_config(settings)
    params = load_checkpoint(args.checkpoint, config)
    if args.data:
        dataset = load_dataset(args.data)
    else:
        _, dataset = generate_synthetic(build_data_spec(settings))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reduction = config.stem.reduction
    count = min(args.count, len(dataset))
    for i in range(count):
        sample = dataset[i]
        _, diag = forward(sample.image.astype(np.float64), params, config)
        write_image(out / f"{i:03d}_input.pgm", sample.image)
        write_image(
            out / f"{i:03d}_selected.pgm",
            render_overlay(sample.image, diag.app_indices, reduction),
        )
        write_image(
            out / f"{i:03d}_survivors.pgm",
            render_overlay(sample.image, diag.trail[-1], reduction),
        )
        spread = diag.criterion.max() - diag.criterion.min()
        heat = (diag.criterion - diag.criterion.min()) / (spread if spread > 0 else 1.0)
        heat_img = np.repeat(np.repeat(heat, reduction, 0), reduction, 1)
        write_image(
            out / f"{i:03d}_criterion.pgm",
            np.rint(heat_img * 255).astype(np.uint8)[None],
        )
    print(f"wrote {count} sample overlays to {out}")
    return 0


# full {patch pooling on/off} x {token pooling on/off} x {readout} grid;
# r=None means "use the configured keep ratio", 1.0 disables token pooling
ABLATION_ROWS = tuple(
    (
        f"{'app' if mode is PoolingMode.HARD else 'none'}"
        f"+{'atp' if r_fixed is None else 'none'} {head.value}",
        mode,
        r_fixed,
        head,
    )
    for mode in (PoolingMode.NONE, PoolingMode.HARD)
    for r_fixed in (1.0, None)
    for head in (HeadKind.GAP, HeadKind.CLT)
)


def cmd_ablate(args) -> int:
    settings = load_settings(args.config, args.set)
    base = build_model_config(settings)
    tcfg = build_train_config(settings)
    train_set, test_set = generate_synthetic(build_data_spec(settings))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, mode, r_fixed, head in ABLATION_ROWS:
        config = replace(
            with_pooling(base, r=r_fixed if r_fixed is not None else base.r,
                         pooling_mode=mode),
            head=head,
        )
        config.validate()
        params = init_params(config, tcfg.seed)  # same seed: shared init
        history = train_loop(
            params, config, tcfg,
            train_set.images, train_set.labels,
            test_set.images, test_set.labels,
        )
        report = count_flops(config)
        rows.append(
            {
                "variant": label,
                "overall_acc": history[-1]["overall_acc"],
                "mean_class_acc": history[-1]["mean_class_acc"],
                "transformer_ratio": report.transformer_ratio,
            }
        )
        print(
            f"{label:12s} acc {rows[-1]['overall_acc']:.4f} "
            f"mean-class {rows[-1]['mean_class_acc']:.4f} "
            f"ratio {rows[-1]['transformer_ratio']:.4f}"
        )
    with open(out / "ablation.csv", "w") as fh:
        fh.write("variant,overall_acc,mean_class_acc,transformer_ratio\n")
        for row in rows:
            fh.write(
                f"{row['variant']},{row['overall_acc']:.6f},"
                f"{row['mean_class_acc']:.6f},{row['transformer_ratio']:.6f}\n"
            )
    return 0


def cmd_gen_data(args) -> int:
    settings = load_settings(args.config, args.set)
    spec = build_data_spec(settings)
    train_set, test_set = generate_synthetic(spec)
    out = Path(args.out)
    save_dataset(out / "train", train_set)
    save_dataset(out / "test", test_set)
    print(f"wrote {len(train_set)} train and {len(test_set)} test images to {out}")
    return 0


# ---------------------------------------------------------------------------


def _add_config_args(parser) -> None:
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override one configuration key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apvit",
        description="attentive-pooling vision transformer, from-scratch numpy build",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and save checkpoint + metrics")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="dataset directory (default: generate synthetic)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="print the analytic cost model")
    _add_config_args(p)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_config_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("visualize", help="write token-selection overlays")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: generate synthetic)")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8, help="samples to render")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("ablate", help="train every pooling/readout variant")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
