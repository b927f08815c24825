"""Command-line entry point: data generation, training, forecasting, verification.

Every command is deterministic given its flags and input files and leaves a
manifest.json next to its outputs recording the resolved configuration.
Exit codes: 0 success, 1 usage/input error, 2 numerical failure, 3
verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import __version__, network, pde_data, stability_lab, trainer
from .core_math import SeededRng
from .network import CheckpointFormatError
from .pde_data import DatasetFormatError, SolverBlowupError
from .trainer import DivergedTrainingError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_VERIFICATION = 3


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _format_value(v: float) -> str:
    return f"{v:.17g}"


def write_manifest(directory, command: str, config: dict, inputs: list, outputs: list) -> None:
    """Atomically write manifest.json next to a command's outputs."""
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "duration_seconds": config.pop("_duration_seconds", None),
    }
    path = Path(directory) / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _timed(fn):
    start = time.monotonic()
    result = fn()
    return result, time.monotonic() - start


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = pde_data.InitialConditionConfig(
        max_mode=args.max_mode, amplitude_scale=args.amplitude, seed=args.seed
    )

    def run():
        return pde_data.build_dataset(
            args.equation,
            args.train,
            args.val,
            args.forecast,
            args.dt,
            args.grid,
            cfg,
            SeededRng(args.seed),
            viscosity=args.nu,
            substeps=args.substeps,
        )

    splits, duration = _timed(run)
    outputs = []
    for dataset in splits:
        path = out_dir / f"{dataset.split}.txt"
        pde_data.save_dataset(dataset, path)
        outputs.append(path)
    config = {
        "equation": args.equation,
        "dt": args.dt,
        "grid_size": args.grid,
        "counts": {"train": args.train, "val": args.val, "forecast": args.forecast},
        "viscosity": args.nu if args.equation == "burgers" else None,
        "substeps": args.substeps,
        "max_mode": args.max_mode,
        "amplitude_scale": args.amplitude,
        "seed": args.seed,
        "_duration_seconds": duration,
    }
    write_manifest(out_dir, "gen-data", config, [], outputs)
    print(f"wrote {', '.join(p.name for p in outputs)} to {out_dir}")
    return EXIT_OK


def parse_config_file(path) -> dict:
    """Parse `key = value` lines; '#' starts a comment."""
    values = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed config line {raw!r}")
        values[key.strip()] = value.strip()
    return values


TRAIN_CONFIG_KEYS = {
    "kind": str,
    "train_data": str,
    "val_data": str,
    "out_dir": str,
    "latent_dim": int,
    "num_blocks": int,
    "epochs": int,
    "initial_lr": float,
    "decay": float,
    "step_size": int,
    "batch_size": int,
    "xavier_gain": float,
    "delta": float,
    "seed": int,
    "optimizer": str,
}

TRAIN_CONFIG_DEFAULTS = {
    "batch_size": 32,
    "xavier_gain": 1.0,
    "delta": 0.01,
    "seed": 0,
    "optimizer": "adam",
}


def load_train_config(path) -> dict:
    raw = parse_config_file(path)
    unknown = raw.keys() - TRAIN_CONFIG_KEYS.keys()
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    resolved = dict(TRAIN_CONFIG_DEFAULTS)
    for key, value in raw.items():
        resolved[key] = TRAIN_CONFIG_KEYS[key](value)
    missing = TRAIN_CONFIG_KEYS.keys() - resolved.keys()
    if missing:
        raise ValueError(f"missing config keys: {sorted(missing)}")
    return resolved


def write_history_csv(history: trainer.TrainHistory, path) -> None:
    lines = ["epoch,lr,train_mse,val_mse"]
    for epoch in range(len(history)):
        lines.append(
            f"{epoch},{_format_value(history.lr[epoch])},"
            f"{_format_value(history.train_mse[epoch])},"
            f"{_format_value(history.val_mse[epoch])}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    config = load_train_config(args.config)
    train_set = pde_data.load_dataset(config["train_data"])
    val_set = pde_data.load_dataset(config["val_data"])
    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    net = network.build_forecast_net(
        config["kind"],
        train_set.grid_size,
        config["latent_dim"],
        config["num_blocks"],
        gain=config["xavier_gain"],
        delta=config["delta"],
        rng=SeededRng(config["seed"]),
    )
    train_cfg = trainer.TrainConfig(
        epochs=config["epochs"],
        initial_lr=config["initial_lr"],
        decay=config["decay"],
        step_size=config["step_size"],
        batch_size=config["batch_size"],
        xavier_gain=config["xavier_gain"],
        delta=config["delta"],
        seed=config["seed"],
        optimizer=config["optimizer"],
    )

    history, duration = _timed(lambda: trainer.train(net, train_set, val_set, train_cfg))

    model_path = out_dir / "model.txt"
    history_path = out_dir / "history.csv"
    network.save_checkpoint(net, model_path)
    write_history_csv(history, history_path)
    manifest_config = dict(config)
    manifest_config["best_epoch"] = history.best_epoch
    manifest_config["best_val_mse"] = history.best_val
    manifest_config["_duration_seconds"] = duration
    write_manifest(
        out_dir,
        "train",
        manifest_config,
        [config["train_data"], config["val_data"]],
        [model_path, history_path],
    )
    print(
        f"trained {config['kind']} for {config['epochs']} epochs; "
        f"best val mse {history.best_val:.6g} at epoch {history.best_epoch}"
    )
    return EXIT_OK


def write_curve_csv(curve: stability_lab.ErrorCurve, path) -> None:
    lines = ["step,time,mse,relative_error_pct"]
    for i in range(curve.steps.size):
        lines.append(
            f"{curve.steps[i]},{_format_value(curve.times[i])},"
            f"{_format_value(curve.mse[i])},{_format_value(curve.relative_error_pct[i])}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_forecast(args) -> int:
    net = network.load_checkpoint(args.model)
    dataset = pde_data.load_dataset(args.data)
    if dataset.grid_size != net.grid_size:
        raise ValueError(
            f"dataset grid {dataset.grid_size} is incompatible with model grid {net.grid_size}"
        )
    mode = None if args.mode == "auto" else args.mode
    oracle = stability_lab.make_truth_stepper(dataset, args.substeps)

    curve, duration = _timed(
        lambda: stability_lab.error_curve(net, dataset, args.steps, oracle, mode=mode)
    )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_curve_csv(curve, out_path)
    config = {
        "model": str(args.model),
        "data": str(args.data),
        "steps": args.steps,
        "mode": mode or f"auto ({'latent' if net.kind == 'implicit_relu' else 'autoregressive'})",
        "substeps": args.substeps,
        "_duration_seconds": duration,
    }
    write_manifest(out_path.parent, "forecast", config, [args.model, args.data], [out_path])
    print(f"wrote {out_path} ({args.steps} steps)")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(stability_lab.SUITES) if args.suite == "all" else [args.suite]
    results = []
    for name in names:
        runner = stability_lab.SUITES[name]
        kwargs = {"seed": args.seed}
        if args.cases is not None:
            kwargs["cases"] = args.cases
        result, duration = _timed(lambda: runner(**kwargs))
        results.append((result, duration))

    lines = []
    for result, duration in results:
        status = "pass" if result.passed else "FAIL"
        lines.append(
            f"{result.name}: {status} cases={result.cases} worst={result.worst:.6g} "
            f"({result.detail}) [{duration:.1f}s]"
        )
    report = "\n".join(lines) + "\n"
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(report, encoding="utf-8")
    print(report, end="")
    all_passed = all(result.passed for result, _ in results)
    return EXIT_OK if all_passed else EXIT_VERIFICATION


def build_parser() -> CliParser:
    parser = CliParser(prog="pdecast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate train/val/forecast dataset files")
    gen.add_argument("--equation", required=True, choices=pde_data.EQUATIONS)
    gen.add_argument("--dt", type=float, required=True)
    gen.add_argument("--grid", type=int, required=True)
    gen.add_argument("--train", type=int, default=350)
    gen.add_argument("--val", type=int, default=150)
    gen.add_argument("--forecast", type=int, default=50)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--nu", type=float, default=pde_data.DEFAULT_VISCOSITY,
                     help="viscosity (burgers only)")
    gen.add_argument("--substeps", type=int, default=pde_data.DEFAULT_SUBSTEPS)
    gen.add_argument("--max-mode", dest="max_mode", type=int, default=5)
    gen.add_argument("--amplitude", type=float, default=1.0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train a model from a key = value config file")
    tr.add_argument("--config", required=True)
    tr.set_defaults(func=cmd_train)

    fc = sub.add_parser("forecast", help="roll a trained model out and write the error curve")
    fc.add_argument("--model", required=True)
    fc.add_argument("--data", required=True)
    fc.add_argument("--steps", type=int, required=True)
    fc.add_argument("--mode", choices=("auto", "latent", "autoregressive"), default="auto")
    fc.add_argument("--substeps", type=int, default=pde_data.DEFAULT_SUBSTEPS,
                    help="oracle substeps per dt (burgers only)")
    fc.add_argument("--out", default="curve.csv")
    fc.set_defaults(func=cmd_forecast)

    ver = sub.add_parser("verify", help="run a property suite and write a report")
    ver.add_argument("--suite", required=True, choices=tuple(stability_lab.SUITES) + ("all",))
    ver.add_argument("--cases", type=int, default=None)
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--out", default="verify_report.txt")
    ver.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DivergedTrainingError, SolverBlowupError) as exc:
        print(f"pdecast: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DatasetFormatError, CheckpointFormatError) as exc:
        print(f"pdecast: bad input file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError) as exc:
        print(f"pdecast: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
