"""Command-line entry points: train, eval, prune, profile, infer.

Configuration is a flat key=value text file; --set key=value overrides
individual entries.  Every run that writes to an output directory also
records a manifest with the resolved config, the seed and the code version,
so runs can be reproduced exactly.  Checkpoints are saved with a .cfg
sidecar so later subcommands can rebuild the matching graph.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Optional

import numpy as np

from . import __version__
from .architecture import (ContextNetConfig, build_contextnet, count_params,
                           fold_batch_norm, variant_config)
from .checkpoint import check_params_match, load_checkpoint, save_graph_params
from .data import (AugmentConfig, colorize_mask, default_palette,
                   generate_synthetic_dataset, load_dataset, load_ppm,
                   save_pgm, save_ppm)
from .errors import ConfigError, ContextNetError
from .graphdef import init_params
from .profiling import profile_forward
from .pruning import PruneSchedule, format_prune_report, progressive_prune
from .train import TrainConfig, evaluate, evaluate_ensemble, predict, train


# -- configuration ------------------------------------------------------------


def _to_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _to_size(s: str) -> tuple:
    parts = s.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"expected HxW, got {s!r}")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"expected HxW with integer dims, got {s!r}") from None
    return (h, w)


def _to_floats(s: str) -> tuple:
    try:
        return tuple(float(p) for p in s.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {s!r}") from None


# key -> (converter, default)
CONFIG_KEYS = {
    "variant": (str, "cn14"),
    "num_classes": (int, 19),
    "input_size": (_to_size, (128, 256)),
    "width_multiplier": (float, 1.0),
    "use_ppm": (_to_bool, False),
    "dropout_rate": (float, 0.1),
    "epochs": (int, 200),
    "batch_size": (int, 4),
    "base_lr": (float, 0.045),
    "lr_power": (float, 0.98),
    "aux_weight": (float, 0.4),
    "weight_decay": (float, 4e-5),
    "eval_every": (int, 1),
    "stop_train_miou": (float, 0.0),
    "augment": (_to_bool, True),
    "seed": (int, 0),
    "train_samples": (int, 64),
    "val_samples": (int, 16),
    "data_seed": (int, 0),
    "prune_multipliers": (_to_floats, (2.0, 1.5, 1.25, 1.0)),
    "finetune_epochs": (int, 20),
    "finetune_lr": (float, 0.0045),
}


def parse_config_text(text: str, source: str = "config") -> dict:
    """Flat key=value lines; '#' starts a comment, blank lines are skipped."""
    raw: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def resolve_config(raw: dict) -> dict:
    """Typed config with defaults filled in; unknown keys are an error."""
    unknown = sorted(k for k in raw if k not in CONFIG_KEYS)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    resolved = {}
    for key, (conv, default) in CONFIG_KEYS.items():
        if key in raw:
            try:
                resolved[key] = conv(raw[key])
            except ConfigError:
                raise
            except ValueError:
                raise ConfigError(
                    f"config key {key!r}: cannot parse {raw[key]!r}") from None
        else:
            resolved[key] = default
    return resolved


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if len(value) == 2 and all(isinstance(v, int) for v in value):
            return f"{value[0]}x{value[1]}"
        return ",".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_text(resolved: dict) -> str:
    """Canonical key=value rendering that round-trips through the parser."""
    return "".join(f"{k}={_format_value(resolved[k])}\n" for k in CONFIG_KEYS)


def load_run_config(config_path: Optional[str], sets: list) -> dict:
    raw: dict = {}
    if config_path is not None:
        with open(config_path) as f:
            raw = parse_config_text(f.read(), source=config_path)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    return resolve_config(raw)


def _model_config(resolved: dict) -> ContextNetConfig:
    return variant_config(resolved["variant"],
                          num_classes=resolved["num_classes"],
                          input_size=resolved["input_size"],
                          width_multiplier=resolved["width_multiplier"],
                          use_ppm=resolved["use_ppm"],
                          dropout_rate=resolved["dropout_rate"])


def _train_config(resolved: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=resolved["epochs"], batch_size=resolved["batch_size"],
        base_lr=resolved["base_lr"], lr_power=resolved["lr_power"],
        aux_weight=resolved["aux_weight"],
        weight_decay=resolved["weight_decay"],
        augment=AugmentConfig() if resolved["augment"] else None,
        eval_every=resolved["eval_every"],
        stop_train_miou=resolved["stop_train_miou"], seed=seed)


# -- shared plumbing ----------------------------------------------------------


def _apply_overrides(resolved: dict, args) -> int:
    """Fold --seed/--input-size into the config; returns the effective seed."""
    if args.input_size is not None:
        resolved["input_size"] = _to_size(args.input_size)
    if args.seed is not None:
        resolved["seed"] = args.seed
    return resolved["seed"]


def _write_manifest(out_dir: str, subcommand: str, resolved: dict,
                    seed: int) -> None:
    manifest = {
        "subcommand": subcommand,
        "seed": seed,
        "version": __version__,
        "config": {k: _format_value(v) for k, v in resolved.items()},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _require(value, flag: str, subcommand: str):
    if value is None:
        raise ConfigError(f"{subcommand} requires {flag}")
    return value


def _prepare_out(args, subcommand: str) -> str:
    out_dir = _require(args.out, "--out", subcommand)
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _load_splits(args, resolved: dict) -> tuple:
    """(train, val) sample lists from --data, or synthetic ones."""
    C = resolved["num_classes"]
    if args.data is not None:
        tdir = os.path.join(args.data, "train")
        vdir = os.path.join(args.data, "val")
        if os.path.isdir(tdir):
            train_set = load_dataset(tdir, C)
            val_set = load_dataset(vdir, C) if os.path.isdir(vdir) else []
            return train_set, val_set
        samples = load_dataset(args.data, C)
        n_val = min(resolved["val_samples"], max(0, len(samples) - 1))
        return samples[:len(samples) - n_val], samples[len(samples) - n_val:]
    h, w = resolved["input_size"]
    train_set = generate_synthetic_dataset(resolved["train_samples"], h, w, C,
                                           seed=resolved["data_seed"])
    val_set = generate_synthetic_dataset(resolved["val_samples"], h, w, C,
                                         seed=resolved["data_seed"] + 1)
    return train_set, val_set


def _sidecar_path(checkpoint_path: str) -> str:
    return os.path.splitext(checkpoint_path)[0] + ".cfg"


def _save_model(out_dir: str, graph, params, resolved: dict) -> str:
    path = os.path.join(out_dir, "model.ctxn")
    save_graph_params(path, graph, params)
    with open(_sidecar_path(path), "w") as f:
        f.write(config_text(resolved))
    return path


def _load_model(args, resolved_cli: Optional[dict] = None,
                checkpoint_attr: str = "checkpoint") -> tuple:
    """Rebuild the graph for a checkpoint and load its parameters.

    The model config comes from the checkpoint's .cfg sidecar; --config /
    --set (already resolved by the caller) take precedence when given.
    """
    path = _require(getattr(args, checkpoint_attr),
                    f"--{checkpoint_attr}", args.subcommand)
    if resolved_cli is not None:
        resolved = resolved_cli
    else:
        sidecar = _sidecar_path(path)
        if not os.path.exists(sidecar):
            raise ConfigError(
                f"no config given and no sidecar {sidecar} next to the "
                f"checkpoint; pass --config")
        with open(sidecar) as f:
            resolved = resolve_config(parse_config_text(f.read(), sidecar))
    graph = build_contextnet(_model_config(resolved))
    params = load_checkpoint(path)
    check_params_match(graph, params, context=path)
    return graph, params, resolved


def _write_metrics_csv(path: str, ious: np.ndarray, miou: float) -> None:
    with open(path, "w", newline="") as f:
        f.write("class,iou\n")
        for i, iou in enumerate(ious):
            f.write(f"{i},{'' if np.isnan(iou) else f'{iou:.6f}'}\n")
        f.write(f"miou,{miou:.6f}\n")


# -- subcommands --------------------------------------------------------------


def cmd_train(args) -> int:
    resolved = load_run_config(args.config, args.set or [])
    seed = _apply_overrides(resolved, args)
    out_dir = _prepare_out(args, "train")
    _write_manifest(out_dir, "train", resolved, seed)
    train_set, val_set = _load_splits(args, resolved)
    graph = build_contextnet(_model_config(resolved))
    params = init_params(graph, np.random.default_rng(seed))
    result = train(graph, params, train_set, val_set or None,
                   _train_config(resolved, seed),
                   log_path=os.path.join(out_dir, "metrics.csv"))
    path = _save_model(out_dir, graph, params, resolved)
    print(f"trained {result.steps} steps, "
          f"val miou {result.final_val_miou:.4f}, checkpoint {path}")
    return 0


def cmd_eval(args) -> int:
    resolved_cli = (load_run_config(args.config, args.set or [])
                    if args.config or args.set else None)
    graph, params, resolved = _load_model(args, resolved_cli)
    _apply_overrides(resolved, args)
    mode = args.mode or "normal"
    _, val_set = _load_splits(args, resolved)
    if not val_set:
        raise ConfigError("eval has no validation samples to score")
    if mode == "ensemble":
        if args.checkpoint2 is None:
            raise ConfigError("ensemble mode requires --checkpoint2")
        graph2, params2, _ = _load_model(args, resolved_cli,
                                         checkpoint_attr="checkpoint2")
        result = evaluate_ensemble(graph, params, graph2, params2, val_set,
                                   batch_size=resolved["batch_size"])
    else:
        result = evaluate(graph, params, val_set, mode=mode,
                          batch_size=resolved["batch_size"])
    if args.out is not None:
        out_dir = _prepare_out(args, "eval")
        _write_manifest(out_dir, "eval", resolved, resolved["seed"])
        _write_metrics_csv(os.path.join(out_dir, "metrics.csv"),
                           result.ious, result.miou)
    print(f"miou {result.miou:.6f} ({mode}, {len(val_set)} samples)")
    return 0


def cmd_prune(args) -> int:
    resolved_cli = (load_run_config(args.config, args.set or [])
                    if args.config or args.set else None)
    graph, params, resolved = _load_model(args, resolved_cli)
    seed = _apply_overrides(resolved, args)
    out_dir = _prepare_out(args, "prune")
    schedule = PruneSchedule(multipliers=resolved["prune_multipliers"],
                             finetune_epochs=resolved["finetune_epochs"])
    schedule.validate()
    if resolved["width_multiplier"] != schedule.multipliers[0]:
        raise ConfigError(
            f"checkpoint width_multiplier {resolved['width_multiplier']} does "
            f"not match the schedule start {schedule.multipliers[0]}")
    _write_manifest(out_dir, "prune", resolved, seed)
    train_set, val_set = _load_splits(args, resolved)
    base_cfg = _model_config(resolved)

    def reference(multiplier: float):
        return build_contextnet(
            dataclasses.replace(base_cfg, width_multiplier=multiplier))

    def finetune(stage_graph, stage_params, stage_index, multiplier):
        if schedule.finetune_epochs > 0:
            cfg = _train_config(resolved, seed + stage_index + 1)
            cfg.epochs = schedule.finetune_epochs
            cfg.base_lr = resolved["finetune_lr"]
            cfg.eval_every = schedule.finetune_epochs
            cfg.stop_train_miou = 0.0
            train(stage_graph, stage_params, train_set, None, cfg)
        result = evaluate(stage_graph, stage_params, val_set or train_set,
                          batch_size=resolved["batch_size"])
        print(f"stage {multiplier}x: {count_params(stage_graph)} params, "
              f"miou {result.miou:.4f}")
        return result.miou

    graph, params, reports = progressive_prune(graph, params, schedule,
                                               reference, finetune)
    resolved["width_multiplier"] = schedule.multipliers[-1]
    path = _save_model(out_dir, graph, params, resolved)
    report_text = format_prune_report(reports)
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(report_text + "\n")
    print(f"pruned to {count_params(graph)} params, checkpoint {path}")
    return 0


def cmd_profile(args) -> int:
    if args.checkpoint is not None:
        graph, params, resolved = _load_model(
            args, (load_run_config(args.config, args.set or [])
                   if args.config or args.set else None))
        _apply_overrides(resolved, args)
        if tuple(resolved["input_size"]) + (3,) != tuple(graph.input_shape):
            raise ConfigError("--input-size cannot change a checkpointed "
                              "graph; rebuild without --checkpoint")
    else:
        resolved = load_run_config(args.config, args.set or [])
        seed = _apply_overrides(resolved, args)
        graph = build_contextnet(_model_config(resolved))
        params = init_params(graph, np.random.default_rng(seed))
    reps = args.reps if args.reps is not None else 10
    if reps < 1:
        raise ConfigError("--reps must be >= 1")
    result = profile_forward(graph, params, reps=reps,
                             seed=resolved["seed"])
    if args.out is not None:
        out_dir = _prepare_out(args, "profile")
        _write_manifest(out_dir, "profile", resolved, resolved["seed"])
        with open(os.path.join(out_dir, "profile.csv"), "w", newline="") as f:
            f.write(result.to_csv())
    print(result.format_table())
    return 0


def cmd_infer(args) -> int:
    resolved_cli = (load_run_config(args.config, args.set or [])
                    if args.config or args.set else None)
    graph, params, resolved = _load_model(args, resolved_cli)
    image_path = _require(args.data, "--data (path to a .ppm image)", "infer")
    out_dir = _prepare_out(args, "infer")
    _write_manifest(out_dir, "infer", resolved, resolved["seed"])
    img = load_ppm(image_path)
    if img.shape[:2] != tuple(graph.input_shape[:2]):
        raise ConfigError(
            f"image {img.shape[:2]} does not match the model input "
            f"{tuple(graph.input_shape[:2])}")
    x = (img.astype(np.float32) / 255.0)[None]
    folded_graph, folded_params = fold_batch_norm(graph, params)
    mask = predict(folded_graph, folded_params, x)[0].astype(np.uint8)
    save_pgm(os.path.join(out_dir, "mask.pgm"), mask)
    palette = default_palette(resolved["num_classes"])
    save_ppm(os.path.join(out_dir, "mask.ppm"), colorize_mask(mask, palette))
    print(f"wrote {os.path.join(out_dir, 'mask.pgm')}")
    return 0


# -- entry point --------------------------------------------------------------


_DISPATCH = {"train": cmd_train, "eval": cmd_eval, "prune": cmd_prune,
             "profile": cmd_profile, "infer": cmd_infer}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contextnet",
        description="Two-branch real-time semantic segmentation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key=value config file")
    shared.add_argument("--data", help="dataset directory (or image for infer)")
    shared.add_argument("--checkpoint", help="model checkpoint (.ctxn)")
    shared.add_argument("--checkpoint2", help="second checkpoint for ensemble")
    shared.add_argument("--mode", choices=("normal", "zero_context",
                                           "zero_detail", "ensemble"),
                        help="eval mode")
    shared.add_argument("--seed", type=int, help="override the config seed")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--input-size", help="HxW override")
    shared.add_argument("--reps", type=int, help="profile repetitions")
    shared.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config entry")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, help_text in (("train", "train a model on a dataset"),
                            ("eval", "score a checkpoint"),
                            ("prune", "progressively prune a wide checkpoint"),
                            ("profile", "per-layer params/MACs/runtime"),
                            ("infer", "segment one image")):
        sub.add_parser(name, parents=[shared], help=help_text)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _DISPATCH[args.subcommand](args)
    except (ContextNetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
