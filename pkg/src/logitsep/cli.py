"""Command-line entry point: ``logitsep train | eval | diagnose | bench``.

Run configuration lives in a TOML file with the tables ``[data]``,
``[train]``, ``[loss]``, ``[eval]`` and ``[output]``; any field can be
overridden with ``--override section.field=value`` (the value is parsed as
a TOML value, falling back to a bare string).

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .bench import BenchConfig, fit_cost_model, is_monotone, parse_classes, run_bench
from .data import Dataset, check_dataset_uri, resolve_dataset, split
from .errors import DimensionError, DomainError, FormatError, NumericalError, UsageError
from .losses import KINDS, LogitMatrix, LossConfig, loss_dispatch
from .network import forward_all, load_model, save_model
from .pols import counterexample_ce, default_alignment_suite, expected_verdict, separation
from .slc_eval import evaluate_slc
from .trainer import GridSearchFailed, TrainConfig, _seeds, grid_search

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("logitsep")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
OUT_ENV = "LOGITSEP_OUT"
EVAL_MODE_ALIASES = {"single_logit": "single_logit", "all_logits": "all_logits_softmax", "all_logits_softmax": "all_logits_softmax"}


class ConfigError(ValueError):
    """Bad configuration; the message names the offending field."""


DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {"uri": None, "test_uri": None, "test_fraction": 0.2, "val_fraction": 0.1, "split_seed": 0},
    "train": {
        "batch_size": 64,
        "steps": 20_000,
        "learning_rates": [1.0, 0.1, 0.01, 0.001],
        "seed": 0,
        "hidden": [500, 500],
        "log_every": 100,
        "probe_size": 256,
    },
    "loss": LossConfig().to_dict(),
    "eval": {"modes": ["single_logit", "all_logits_softmax"]},
    "output": {"dir": None},
}


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "logitsep-out"))


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(config: dict, override: str) -> None:
    key, sep, value = override.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {override!r} must look like section.field=value")
    path = key.strip().split(".")
    if len(path) != 2:
        raise ConfigError(f"override key {key!r} must be section.field")
    section, name = path
    if section not in DEFAULTS:
        raise ConfigError(f"unknown config section {section!r}")
    if name not in DEFAULTS[section]:
        raise ConfigError(f"unknown field {section}.{name}")
    config[section][name] = _parse_value(value.strip())


def load_run_config(path: Optional[Path], overrides: Sequence[str] = ()) -> dict:
    """Defaults, then the TOML file, then overrides; unknown fields are errors."""
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section, body in raw.items():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(body, dict):
                raise ConfigError(f"[{section}] must be a table")
            for name, value in body.items():
                if name not in DEFAULTS[section]:
                    raise ConfigError(f"unknown field {section}.{name}")
                config[section][name] = value
    for override in overrides:
        apply_override(config, override)
    return config


def build_train_config(config: dict) -> TrainConfig:
    try:
        loss = LossConfig.from_dict(config["loss"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"loss: {exc}") from exc
    try:
        return TrainConfig(loss=loss, **config["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def _check_fraction(config: dict, name: str) -> float:
    value = config["data"][name]
    if not isinstance(value, (int, float)) or not 0 < value < 1:
        raise ConfigError(f"data.{name} must be a number in (0, 1), got {value!r}")
    return float(value)


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    info: dict = field(default_factory=dict)


def make_splits(data_cfg: dict, base: Path) -> Splits:
    """Train/validation/test sets as recorded in checkpoint metadata."""
    full = resolve_dataset(data_cfg["uri"], base)
    seed = int(data_cfg["split_seed"])
    if data_cfg.get("test_uri"):
        rest = full
        test = resolve_dataset(data_cfg["test_uri"], base)
    else:
        rest, test = split(full, float(data_cfg["test_fraction"]), seed=seed, names=("train", "test"))
    train_set, val_set = split(rest, float(data_cfg["val_fraction"]), seed=seed + 1)
    return Splits(train_set, val_set, test, dict(data_cfg))


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _prepare_out(arg: Optional[str], config_dir: Optional[str] = None) -> Path:
    out = Path(arg) if arg else Path(config_dir) if config_dir else default_out_dir()
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


# subcommands


def cmd_train(args) -> int:
    config_path = Path(args.config) if args.config else None
    config = load_run_config(config_path, args.override)
    base = config_path.parent if config_path else Path.cwd()
    if not config["data"]["uri"]:
        raise ConfigError("data.uri is required")
    _check_fraction(config, "val_fraction")
    if not config["data"]["test_uri"]:
        _check_fraction(config, "test_fraction")
    for key in ("uri", "test_uri"):
        if config["data"][key]:
            try:
                check_dataset_uri(config["data"][key], base)
            except FileNotFoundError as exc:
                raise ConfigError(f"data.{key}: {exc}") from exc
            except DomainError as exc:
                raise ConfigError(f"data.{key}: {exc}") from exc
    train_config = build_train_config(config)
    out = _prepare_out(args.out, config["output"]["dir"])

    splits = make_splits(config["data"], base)
    train_config.checkpoint = None
    log.info("training %s on %d examples (%d validation)", train_config.loss.kind, splits.train.n, splits.val.n)
    result = grid_search(train_config, splits.train, splits.val)
    model = result.model
    data_meta = dict(config["data"])
    data_meta["base_dir"] = str(base.resolve())
    model.meta["data"] = data_meta

    checkpoint = save_model(out / "model.npz", model)
    result.history.to_csv(out / "history.csv")
    init_seed, batch_seed, probe_seed, mc_seed = _seeds(train_config.seed)
    manifest = {
        "version": __version__,
        "command": "train",
        "config_file": str(config_path) if config_path else None,
        "overrides": list(args.override),
        "config": config,
        "seeds": {
            "train": train_config.seed,
            "init": init_seed,
            "batch": batch_seed,
            "probe": probe_seed,
            "monte_carlo": mc_seed,
            "split": int(config["data"]["split_seed"]),
        },
        "selected_lr": result.lr,
        "grid": [r.to_dict() for r in result.runs],
        "outputs": {"checkpoint": checkpoint.name, "history": "history.csv"},
    }
    for mode in config["eval"]["modes"]:
        report = evaluate_slc(model, splits.test, EVAL_MODE_ALIASES.get(mode, mode))
        _write_json(out / f"slc_{report.mode}.json", report.to_dict())
        manifest["outputs"][f"slc_{report.mode}"] = f"slc_{report.mode}.json"
        print(f"test {report.mode}: 1-AUPRC={report.one_minus_macro['auprc']:.6f}")
    _write_json(out / "manifest.json", manifest)
    print(f"selected lr={result.lr}; wrote {checkpoint}, {out / 'history.csv'}, {out / 'manifest.json'}")
    return EXIT_OK


def _eval_dataset(model, data_uri: Optional[str]) -> Dataset:
    if data_uri:
        return resolve_dataset(data_uri)
    data_meta = model.meta.get("data")
    if not data_meta:
        raise ConfigError("checkpoint records no dataset; pass --data")
    return make_splits(data_meta, Path(data_meta.get("base_dir", "."))).test


def _load_checkpoint(path: str):
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {path}") from exc


def cmd_eval(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    dataset = _eval_dataset(model, args.data)
    if dataset.k != model.num_classes:
        raise ConfigError(f"checkpoint has {model.num_classes} classes but the dataset has {dataset.k}")
    out = _prepare_out(args.out)
    modes = ["single_logit", "all_logits_softmax"] if args.mode == "both" else [EVAL_MODE_ALIASES[args.mode]]
    for mode in modes:
        report = evaluate_slc(model, dataset, mode)
        _write_json(out / f"slc_{mode}.json", report.to_dict())
        om = report.one_minus_macro
        print(f"{mode}: 1-AUPRC={om['auprc']:.6f} 1-P@0.90={om['p_at_090']:.6f} 1-P@0.99={om['p_at_099']:.6f}")
    logits = forward_all(model, dataset.features)
    sep = separation(LogitMatrix(logits, dataset.labels))
    _write_json(out / "separation.json", sep.to_dict())
    print(f"separation margin={sep.margin:.6g} violating pairs={sep.violating_pair_fraction:.6g}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    payload: dict[str, Any] = {}
    if args.checkpoint:
        model = _load_checkpoint(args.checkpoint)
        dataset = _eval_dataset(model, args.data)
        if dataset.k != model.num_classes:
            raise ConfigError(f"checkpoint has {model.num_classes} classes but the dataset has {dataset.k}")
        idx = np.random.default_rng(args.seed).permutation(dataset.n)[: args.probe_size]
        probe = dataset.subset(np.sort(idx))
        sep = separation(LogitMatrix(forward_all(model, probe.features), probe.labels))
        payload["checkpoint"] = {"path": args.checkpoint, "probe_size": probe.n, "separation": sep.to_dict()}
        print(f"checkpoint probe ({probe.n} examples): margin={sep.margin:.6g} "
              f"violating pairs={sep.violating_pair_fraction:.6g} separated={sep.separated}")
    if args.counterexample:
        alpha = args.alpha if args.alpha is not None else args.gamma
        lm = counterexample_ce(alpha)
        sep = separation(lm)
        losses = {}
        for kind in KINDS:
            value = loss_dispatch(LossConfig(kind=kind, gamma=args.gamma), lm).value
            losses[kind] = value
        per_example = losses["ce"] if args.counterexample == "ce" else losses["max_margin"]
        payload["counterexample"] = {
            "kind": args.counterexample,
            "alpha": alpha,
            "gamma": args.gamma,
            "logits": lm.z.tolist(),
            "labels": lm.y.tolist(),
            "separation": sep.to_dict(),
            "losses": losses,
        }
        name = "CE" if args.counterexample == "ce" else "max-margin"
        print(f"counter-example alpha={alpha:g}: margin={sep.margin:.6g}, {name} loss per example={per_example:.6g}")
        for kind, value in losses.items():
            print(f"  {kind:17s} {value:.6g}")
    if args.check_alignment:
        suite = default_alignment_suite(trials=args.trials, steps=args.steps, seed=args.seed, gamma=args.gamma)
        payload["alignment"] = {kind: v.to_dict() for kind, v in suite.items()}
        print(f"{'loss':17s} {'verdict':13s} min final margin")
        for kind in KINDS:
            v = suite[kind]
            if kind == KINDS[2]:
                print("-" * 48)
            print(f"{kind:17s} {v.verdict:13s} {min(v.final_margins):.4g}")
        mismatched = [k for k, v in suite.items() if v.verdict != expected_verdict(k)]
        if mismatched:
            log.warning("unexpected verdicts for: %s", ", ".join(mismatched))
    if not payload:
        raise ConfigError("nothing to diagnose: pass --checkpoint, --counterexample or --check-alignment")
    if args.out:
        out = _prepare_out(args.out)
        _write_json(out / "diagnose.json", payload)
    return EXIT_OK


def _parse_backbone(text: str) -> tuple[int, ...]:
    if text.strip().lower() in ("none", ""):
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--backbone must be 'none' or comma-separated widths, got {text!r}") from exc


def cmd_bench(args) -> int:
    fields: dict[str, Any] = {}
    if args.config:
        try:
            raw = tomllib.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        fields.update(raw.get("bench", raw))
    if args.classes:
        classes = parse_classes(args.classes)
        fields["classes"] = classes if classes[0] == 1 else (1, *classes)
    if args.backbone is not None:
        fields["hidden"] = _parse_backbone(args.backbone)
    for name in ("input_dim", "batch_size", "repetitions", "warmup", "seed", "dtype"):
        value = getattr(args, name)
        if value is not None:
            fields[name] = value
    try:
        config = BenchConfig(**fields)
    except TypeError as exc:
        raise ConfigError(f"bench: {exc}") from exc
    out = _prepare_out(args.out)
    report = run_bench(config)
    report.write_json(out / "bench.json")
    report.write_csv(out / "bench.csv")
    for w in report.warnings:
        print(f"warning: low-confidence timing: {w}", file=sys.stderr)
    for r in report.rows:
        print(f"k={r.classes:>8d}  {r.time_per_example_s:.3e} s/example  speedup x{r.speedup:.2f}")
    if len(report.rows) >= 3:
        fit = fit_cost_model(report)
        print(f"fit: a={fit.fixed_cost:.3e} s, b={fit.per_class_cost:.3e} s/class, R^2={fit.r_squared:.4f}")
    if not is_monotone(report.speedups):
        print("warning: speedup column is not monotone in k", file=sys.stderr)
    print(f"wrote {out / 'bench.json'} and {out / 'bench.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="logitsep", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="grid-search SGD training, writes checkpoint, history and manifest")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--override", action="append", default=[], metavar="SECTION.FIELD=VALUE")
    p.add_argument("--out", help=f"output directory (default: output.dir, then ${OUT_ENV})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="single-logit / all-logit metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset URI (default: the checkpoint's recorded test split)")
    p.add_argument("--mode", choices=["single_logit", "all_logits", "all_logits_softmax", "both"], default="single_logit")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV})")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="separation margins, counter-examples and alignment verdicts")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--probe-size", type=int, default=1000)
    p.add_argument("--counterexample", choices=["ce", "margin"])
    p.add_argument("--alpha", type=float, help="counter-example scale (default: gamma)")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--check-alignment", action="store_true")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("bench", help="forward-pass time against class count")
    p.add_argument("--config", help="TOML file with a [bench] table")
    p.add_argument("--classes", help="comma-separated class counts, e.g. 1,2^10,2^14")
    p.add_argument("--backbone", help="hidden widths, e.g. 2048,2048,256, or 'none'")
    p.add_argument("--input-dim", dest="input_dim", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (GridSearchFailed, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, DomainError, DimensionError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
