"""Command line: ``llr {train,attack,linearity,surface,verify-bounds,sweep}``.

Every subcommand reads one JSON config (plus flag overrides) and writes its
artifacts under a run directory, starting with a snapshot of the resolved
config.  Exit status is 0 on success, 2 for usage, config or input-file
problems, and 1 for numerical failures; failures print one JSON object on
stderr.
"""

import argparse
import copy
import json
import os
import sys

from llr import attacks, linearity, models, training
from llr.errors import ConfigError, LLRError, NumericalError
from llr.harness import data as data_mod
from llr.harness.checkpoint import load_checkpoint
from llr.harness.config import dump_config, load_config, parse_epsilon, reject_unknown
from llr.harness.surface import surface_grid
from llr.harness.sweep import strength_sweep
from llr.harness.verify import bound_trials

TOP_KEYS = {"seed", "run_dir", "model", "data", "train", "attack", "linearity", "surface", "sweep", "eval"}
ARCHS = {"small_cnn": models.small_cnn, "mlp": models.mlp, "linear": models.linear}


class UsageError(LLRError):
    pass


# ------------------------------------------------------------------ config


def _set_path(cfg, dotted, raw):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {k} is not an object")
    node[keys[-1]] = value


def resolve_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    reject_unknown(cfg, TOP_KEYS, "config")
    cfg = copy.deepcopy(cfg)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        _set_path(cfg, *item.split("=", 1))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    reject_unknown(cfg, TOP_KEYS, "config")
    return cfg


def build_spec(section):
    section = dict(section or {})
    if "spec" in section:
        reject_unknown(section, {"spec"}, "model")
        return models.ModelSpec.from_dict(section["spec"])
    arch = section.pop("arch", "small_cnn")
    if arch not in ARCHS:
        raise ConfigError(f"model.arch must be one of {sorted(ARCHS)}, got {arch!r}")
    try:
        if "hidden" in section and isinstance(section["hidden"], list):
            section["hidden"] = tuple(section["hidden"])
        if "channels" in section:
            section["channels"] = tuple(section["channels"])
        return ARCHS[arch](**section)
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from exc


DATA_KEYS = {
    "cifar10": {"source", "path", "classes", "take", "test_take"},
    "blobs": {"source", "classes", "dims", "count", "test_count", "margin", "noise"},
    "images": {"source", "classes", "count", "test_count", "size", "channels", "noise"},
}


def load_data(section, seed, split):
    section = dict(section or {})
    source = section.get("source", "cifar10")
    if source not in DATA_KEYS:
        raise ConfigError(f"data.source must be one of {sorted(DATA_KEYS)}, got {source!r}")
    reject_unknown(section, DATA_KEYS[source], "data")
    if source == "cifar10":
        path = section.get("path") or os.environ.get(data_mod.DATA_ENV)
        if not path:
            raise ConfigError(f"data.path is not set and {data_mod.DATA_ENV} is empty; CIFAR-10 binaries are required")
        take = section.get("take") if split == "train" else section.get("test_take")
        return data_mod.load_cifar10(path, split, section.get("classes"), take)
    count = section.get("count", 1000) if split == "train" else section.get("test_count", 200)
    if source == "blobs":
        return data_mod.synthetic_blobs(section.get("classes", 2), section.get("dims", 10), count, seed,
                                        section.get("margin", 0.5), section.get("noise", 0.05), split)
    return data_mod.synthetic_images(section.get("classes", 2), count, seed, section.get("size", 32),
                                     section.get("channels", 3), section.get("noise", 0.15), split)


def attack_config(section, seed, overrides=None):
    section = dict(section or {})
    section.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "epsilon" in section:
        section["epsilon"] = parse_epsilon(section["epsilon"])
    else:
        section["epsilon"] = 8 / 255
    section.setdefault("seed", seed)
    try:
        return attacks.AttackConfig.from_dict(section)
    except TypeError as exc:
        raise ConfigError(f"attack: {exc}") from exc


def _run_dir(args, cfg, command):
    path = args.run_dir or cfg.get("run_dir") or os.path.join("runs", command)
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _eval_data(cfg, args):
    test = load_data(cfg.get("data"), cfg["seed"], "test")
    n = getattr(args, "examples", None) or (cfg.get("eval") or {}).get("examples")
    return test.take(n) if n else test


def _model(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    return ckpt.spec, ckpt.params


# ------------------------------------------------------------- subcommands


def cmd_train(args):
    cfg = resolve_config(args)
    section = dict(cfg.get("train") or {})
    if args.epochs is not None:
        section["epochs"] = args.epochs
        section["ramp_epochs"] = min(section.get("ramp_epochs", 5), args.epochs)
    section["seed"] = cfg["seed"]
    try:
        tcfg = training.TrainConfig.from_dict(section)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from exc
    spec = build_spec(cfg.get("model"))
    train_set = load_data(cfg.get("data"), cfg["seed"], "train")
    run = _run_dir(args, cfg, "train")
    dump_config({**cfg, "train": tcfg.to_dict()}, os.path.join(run, "config.json"))
    state = training.train(spec, train_set, tcfg, run_dir=run)
    test = _eval_data(cfg, args)
    summary = {
        "final": state.history[-1] if state.history else {},
        "test_accuracy": attacks.nominal_accuracy(spec, state.params, test.images, test.labels),
        "checkpoint": "final.ckpt",
    }
    _write_json(summary, os.path.join(run, "summary.json"))
    return 0


def cmd_attack(args):
    cfg = resolve_config(args)
    spec, params = _model(args)
    acfg = attack_config(cfg.get("attack"), cfg["seed"], {"loss": args.attack, "epsilon": args.epsilon})
    test = _eval_data(cfg, args)
    run = _run_dir(args, cfg, "attack")
    dump_config({**cfg, "attack": acfg.to_dict()}, os.path.join(run, "config.json"))
    out = attacks.evaluate_robustness(spec, params, test.images, test.labels, acfg)
    out.to_csv(os.path.join(run, "attack.csv"))
    out.to_json(os.path.join(run, "attack.json"))
    return 0


LINEARITY_KEYS = {"epsilon", "steps", "step_size", "restarts"}


def cmd_linearity(args):
    cfg = resolve_config(args)
    spec, params = _model(args)
    section = dict(cfg.get("linearity") or {})
    reject_unknown(section, LINEARITY_KEYS, "linearity")
    eps = parse_epsilon(args.epsilon if args.epsilon is not None else section.get("epsilon", "8/255"))
    test = _eval_data(cfg, args)
    run = _run_dir(args, cfg, "linearity")
    dump_config(cfg, os.path.join(run, "config.json"))
    report = linearity.linearity_report(spec, params, test.images, test.labels, eps,
                                        steps=section.get("steps", 50), step_size=section.get("step_size", 0.1),
                                        restarts=section.get("restarts", 1), seed=cfg["seed"])
    report.to_csv(os.path.join(run, "linearity.csv"))
    report.to_json(os.path.join(run, "linearity.json"))
    return 0


SURFACE_KEYS = {"epsilon", "n", "example", "attack"}


def cmd_surface(args):
    cfg = resolve_config(args)
    spec, params = _model(args)
    section = dict(cfg.get("surface") or {})
    reject_unknown(section, SURFACE_KEYS, "surface")
    eps = parse_epsilon(args.epsilon if args.epsilon is not None else section.get("epsilon", "8/255"))
    n = args.n or section.get("n", 21)
    i = args.example if args.example is not None else section.get("example", 0)
    test = _eval_data(cfg, args)
    if not 0 <= i < len(test):
        raise ConfigError(f"example index {i} outside the {len(test)} evaluation examples")
    acfg = attack_config(section.get("attack") or {"steps": 50}, cfg["seed"], {"epsilon": eps})
    run = _run_dir(args, cfg, "surface")
    dump_config(cfg, os.path.join(run, "config.json"))
    grid = surface_grid(spec, params, test.images[i], int(test.labels[i]), eps, n, acfg, seed=cfg["seed"])
    grid.to_csv(os.path.join(run, "surface.csv"))
    _write_json({"example": i, "label": grid.label, "n": n, "epsilon": eps, "center_loss": float(grid.center_loss()),
                 "plane_residual": grid.plane_residual()}, os.path.join(run, "surface.json"))
    return 0


def cmd_sweep(args):
    cfg = resolve_config(args)
    spec, params = _model(args)
    items = cfg.get("sweep")
    if not items:
        raise ConfigError("config has no 'sweep' list of attack configs")
    sweep = [attack_config(item, cfg["seed"]) for item in items]
    test = _eval_data(cfg, args)
    run = _run_dir(args, cfg, "sweep")
    dump_config(cfg, os.path.join(run, "config.json"))
    report = strength_sweep(spec, params, test.images, test.labels, sweep)
    report.to_csv(os.path.join(run, "sweep.csv"))
    report.to_json(os.path.join(run, "sweep.json"))
    return 0


def cmd_verify_bounds(args):
    cfg = resolve_config(args)
    run = _run_dir(args, cfg, "verify-bounds")
    dump_config(cfg, os.path.join(run, "config.json"))
    result = bound_trials(args.trials, cfg["seed"])
    _write_json(result.summary(), os.path.join(run, "bounds.json"))
    if not result.holds:
        raise NumericalError("a bound was violated beyond tolerance", result.summary())
    return 0


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="llr", description="Local-linearity training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--run-dir")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (dotted key)")
        if checkpoint:
            sp.add_argument("--checkpoint")
            sp.add_argument("--examples", type=int, help="number of test examples")
            sp.add_argument("--epsilon", help="radius, e.g. 8/255")

    sp = sub.add_parser("train")
    common(sp, checkpoint=False)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--examples", type=int, help="number of test examples for the final accuracy")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack")
    common(sp)
    sp.add_argument("--attack", choices=attacks.LOSS_KINDS)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("linearity")
    common(sp)
    sp.set_defaults(func=cmd_linearity)

    sp = sub.add_parser("surface")
    common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--example", type=int)
    sp.set_defaults(func=cmd_surface)

    sp = sub.add_parser("verify-bounds")
    common(sp, checkpoint=False)
    sp.add_argument("--trials", type=int, default=1000)
    sp.set_defaults(func=cmd_verify_bounds)

    sp = sub.add_parser("sweep")
    common(sp)
    sp.set_defaults(func=cmd_sweep)
    return p


def _fail(status, exc, **extra):
    payload = {"error": type(exc).__name__, "message": str(exc), **extra}
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
    return status


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        return _fail(1, exc, diagnostics=exc.diagnostics)
    except (LLRError, OSError) as exc:
        return _fail(2, exc)


if __name__ == "__main__":
    sys.exit(main())
