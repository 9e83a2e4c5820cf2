"""Command line entry point: ``cel <subcommand> ...``.

Exit codes: 0 success, 1 input or integrity error, 2 usage error,
3 numerical failure. Setting ``CEL_SERIAL=1`` forces single-threaded math.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .candidates import GeneratorConfig, SyntheticSpec, generate_candidates, synthesize_gaussian
from .data import PartialLabelDataset, load_dataset, save_dataset, validate_dataset
from .evaluation import (
    accuracy,
    disambiguation_rate,
    run_ablation,
    run_experiment,
    run_setting_contrast,
    sweep,
    write_results_csv,
)
from .exceptions import CELError, NonFiniteLossError
from .network import ModelConfig
from .plotting import plot_csv
from .trainer import TrainConfig, Trainer, load_checkpoint

logger = logging.getLogger("cel")

EXIT_OK, EXIT_INPUT, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

GENERATOR_ALIASES = {
    "id": "instance_dependent",
    "instance_dependent": "instance_dependent",
    "uniform": "uniform",
    "pll": "uniform",
    "hierarchical": "hierarchical",
}

MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig) if f.name not in ("d", "q")]
TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]


class InputError(CELError):
    pass


# ---------------------------------------------------------------------------
# argument helpers


def _unit_interval(name):
    def parse(text):
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number in [0, 1], got {text!r}")
        if not 0.0 <= value <= 1.0:
            raise argparse.ArgumentTypeError(f"{name} must lie in the range [0, 1], got {value}")
        return value

    return parse


def _positive_int(text):
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _field_parser(cls, name):
    field = {f.name: f for f in dataclasses.fields(cls)}[name]
    default = field.default
    if name == "hidden":
        return lambda s: tuple(int(x) for x in s.split(",") if x)
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def _add_config_flags(parser):
    group = parser.add_argument_group("configuration (CLI > --config file > defaults)")
    group.add_argument("--config", type=Path, help="flat JSON file of config keys")
    for name in TRAIN_KEYS:
        group.add_argument(f"--{name.replace('_', '-')}", dest=name, type=_field_parser(TrainConfig, name))
    for name in MODEL_KEYS:
        group.add_argument(f"--{name.replace('_', '-')}", dest=name, type=_field_parser(ModelConfig, name))


def resolve_config(args, parser, d, q):
    """Merge defaults, the optional JSON config file and CLI overrides."""
    merged = {}
    if args.config is not None:
        if not args.config.exists():
            raise InputError(f"config file not found: {args.config}")
        merged.update(json.loads(args.config.read_text(encoding="utf-8")))
    for name in TRAIN_KEYS + MODEL_KEYS:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    unknown = set(merged) - set(TRAIN_KEYS) - set(MODEL_KEYS) - {"d", "q"}
    if unknown:
        parser.error(f"unknown config keys: {sorted(unknown)}")
    train_kw = {k: v for k, v in merged.items() if k in TRAIN_KEYS}
    model_kw = {k: v for k, v in merged.items() if k in MODEL_KEYS}
    if "hidden" in model_kw:
        model_kw["hidden"] = tuple(model_kw["hidden"])
    try:
        config = TrainConfig(**train_kw)
        model_config = ModelConfig(d=d, q=q, **model_kw)
    except (TypeError, ValueError) as exc:
        parser.error(str(exc))
    return config, model_config


def flat_config(config: TrainConfig, model_config: ModelConfig) -> dict:
    out = config.to_dict()
    out.update(model_config.to_dict())
    return out


# ---------------------------------------------------------------------------
# manifests and IO


def _version_stamp():
    stamp = {"package": __version__}
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True,
            text=True,
            cwd=Path(__file__).resolve().parent,
            timeout=5,
        )
        if rev.returncode == 0:
            stamp["git"] = rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return stamp


class RunManifest:
    FILENAME = "run_manifest.json"

    def __init__(self, out_dir: Path, command: str, argv, config: dict, seed):
        self.path = Path(out_dir) / self.FILENAME
        self.started = time.time()
        self.data = {
            "command": command,
            "argv": list(argv),
            "config": config,
            "version": _version_stamp(),
            "seed": seed,
            "output_dir": str(out_dir),
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.started)),
        }
        self.write()

    def write(self):
        self.path.write_text(json.dumps(self.data, indent=2, default=str), encoding="utf-8")

    def finish(self, **extra):
        self.data["wall_clock_seconds"] = round(time.time() - self.started, 3)
        self.data.update(extra)
        self.write()


def prepare_out_dir(path: Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise InputError(f"output path {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def open_dataset(path, what="dataset") -> PartialLabelDataset:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{what} not found: {path}")
    ds = load_dataset(path)
    report = validate_dataset(ds)
    if not report.ok:
        raise InputError(f"{what} {path} failed validation:\n{report}")
    return ds


def open_test_split(args, train_path) -> PartialLabelDataset | None:
    if getattr(args, "test", None) is not None:
        return open_dataset(args.test, "test dataset")
    default = Path(train_path) / "test"
    if (default / "meta.json").exists():
        return open_dataset(default, "test dataset")
    return None


def _seed_list(text):
    if "," in text:
        return [int(s) for s in text.split(",") if s]
    return list(range(int(text)))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, parser):
    kind = GENERATOR_ALIASES[args.generator]
    if kind == "hierarchical" and not args.superclasses:
        parser.error("--generator hierarchical requires --superclasses")
    out = prepare_out_dir(args.out, args.force)
    spec = SyntheticSpec(
        q=args.q,
        d=args.d,
        m=args.m + args.m_test,
        cluster_spread=args.spread,
        overlap=args.overlap,
        seed=args.seed,
        n_superclasses=args.superclasses,
    )
    gen = GeneratorConfig(kind=kind, rate=args.rate, seed=args.seed, aux_train_epochs=args.aux_epochs,
                          aux_temperature=args.aux_temperature)
    manifest = RunManifest(out, "gen-data", sys.argv[1:],
                           {**dataclasses.asdict(spec), **dataclasses.asdict(gen), "m_test": args.m_test}, args.seed)

    X, y, label_space = synthesize_gaussian(spec)
    Xtr, ytr = X[: args.m], y[: args.m]
    meta = {"source": "synthetic_gaussian", "overlap": args.overlap, "cluster_spread": args.spread}
    S = generate_candidates(gen, Xtr, ytr, label_space, meta)
    train = PartialLabelDataset(Xtr, ytr, S, label_space, meta)
    save_dataset(train, out)
    if args.m_test:
        yte = y[args.m :]
        onehot = np.zeros((args.m_test, args.q), dtype=bool)
        onehot[np.arange(args.m_test), yte] = True
        test_meta = {"source": "synthetic_gaussian", "generator": "none", "rate": 0.0, "seed": args.seed,
                     "split": "test"}
        save_dataset(PartialLabelDataset(X[args.m :], yte, onehot, label_space, test_meta), out / "test")
    avg = float(S.sum(axis=1).mean())
    manifest.finish(avg_cls=avg)
    print(f"wrote {args.m} training samples to {out} (avg candidates {avg:.3f})")
    return EXIT_OK


def cmd_validate(args, parser):
    path = Path(args.dataset)
    if not path.exists():
        raise InputError(f"dataset not found: {path}")
    report = validate_dataset(load_dataset(path))
    print(report)
    return EXIT_OK if report.ok else EXIT_INPUT


def _train_monitor(train_ds, test_ds):
    from .evaluation import make_monitor

    return make_monitor(
        train_ds.features,
        train_ds.truth,
        test_ds.features if test_ds is not None else None,
        test_ds.truth if test_ds is not None else None,
    )


def cmd_train(args, parser):
    train_ds = open_dataset(args.data)
    test_ds = open_test_split(args, args.data)
    config, model_config = resolve_config(args, parser, train_ds.d, train_ds.q)
    out = prepare_out_dir(args.out, args.force)
    manifest = RunManifest(out, "train", sys.argv[1:],
                           {**flat_config(config, model_config), "data": str(args.data)}, config.seed)
    ckpt_dir = out / "checkpoints"
    monitor = _train_monitor(train_ds, test_ds)
    if args.resume is not None:
        trainer = Trainer.from_checkpoint(args.resume, train_ds.features, train_ds.candidates, monitor, ckpt_dir)
    else:
        trainer = Trainer(train_ds.features, train_ds.candidates, model_config, config, monitor, ckpt_dir)
    try:
        trainer.run(until_epoch=args.until_epoch)
    except NonFiniteLossError:
        trainer.history.to_csv(out / "history.csv")
        raise
    trainer.history.to_csv(out / "history.csv")
    final = trainer.save_checkpoint(ckpt_dir / "final")
    last = trainer.history[-1] if len(trainer.history) else None
    metrics = {
        "epochs": trainer.epoch,
        "train_acc": last.train_acc if last else math.nan,
        "test_acc": last.test_acc if last else math.nan,
        "disambiguation_rate": disambiguation_rate(trainer.T, train_ds.truth),
        "checkpoint": str(final),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2), encoding="utf-8")
    manifest.finish(**{k: v for k, v in metrics.items() if k != "checkpoint"})
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_eval(args, parser):
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise InputError(f"checkpoint not found: {ckpt_path}")
    ds = open_dataset(args.data)
    ckpt = load_checkpoint(ckpt_path)
    trainer = Trainer.from_checkpoint(ckpt_path, ds.features, ds.candidates)
    P = trainer.predict_proba(ds.features)
    result = {
        "checkpoint": str(ckpt_path),
        "data": str(args.data),
        "epoch": int(ckpt["epoch"]),
        "accuracy": accuracy(P, ds.truth),
    }
    if args.out is not None:
        Path(args.out).write_text(json.dumps(result, indent=2), encoding="utf-8")
    print(json.dumps(result))
    return EXIT_OK


def cmd_ablate(args, parser):
    train_ds = open_dataset(args.data)
    test_ds = open_test_split(args, args.data)
    config, model_config = resolve_config(args, parser, train_ds.d, train_ds.q)
    out = prepare_out_dir(args.out, args.force)
    seeds = _seed_list(args.seeds)
    manifest = RunManifest(out, "ablate", sys.argv[1:], {**flat_config(config, model_config), "seeds": seeds},
                           seeds)
    table, results = run_ablation(train_ds, test_ds, config, model_config, seeds, args.dataset_id, args.jobs)
    write_results_csv(results, out / "results.csv")
    table.write_json(out / "comparison.json")
    for r in results:
        r.history.to_csv(out / f"history_{r.method}_seed{r.seed}.csv")
    manifest.finish(counts=table.counts)
    for row in table.rows:
        print(f"{row['method']:>8s}  {row['mean']:.4f} +- {row['std']:.4f}  {row['vs_reference']}")
    return EXIT_OK


def cmd_contrast(args, parser):
    train_ds = open_dataset(args.data)
    test_ds = open_test_split(args, args.data)
    if test_ds is None:
        raise InputError("contrast needs a test split (--test or <data>/test)")
    config, model_config = resolve_config(args, parser, train_ds.d, train_ds.q)
    out = prepare_out_dir(args.out, args.force)
    seeds = _seed_list(args.seeds)
    manifest = RunManifest(out, "contrast", sys.argv[1:],
                           {**flat_config(config, model_config), "rate": args.rate, "seeds": seeds}, seeds)
    result = run_setting_contrast(
        train_ds.features, train_ds.truth, test_ds.features, test_ds.truth, train_ds.q, args.rate,
        config, model_config, seeds, threshold=args.threshold,
    )
    result.write_csv(out / "curves.csv")
    summary = {
        "threshold": result.threshold,
        "epochs_to_threshold": result.epochs_to_threshold,
        "median_epochs_to_threshold": result.medians(),
        "avg_cls": result.avg_cls,
    }
    (out / "contrast.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    manifest.finish(median_epochs_to_threshold=result.medians())
    print(json.dumps(summary["median_epochs_to_threshold"]))
    return EXIT_OK


def _parse_grid(items, parser):
    grid = {}
    for item in items:
        if "=" not in item:
            parser.error(f"grid entries look like key=v1,v2 (got {item!r})")
        key, values = item.split("=", 1)
        try:
            grid[key.strip()] = [float(v) if key.strip() != "embed_dim" else int(v) for v in values.split(",")]
        except ValueError:
            parser.error(f"non-numeric grid value in {item!r}")
    return grid


def cmd_sweep(args, parser):
    train_ds = open_dataset(args.data)
    test_ds = open_test_split(args, args.data)
    config, model_config = resolve_config(args, parser, train_ds.d, train_ds.q)
    grid = _parse_grid(args.grid, parser)
    out = prepare_out_dir(args.out, args.force)
    seeds = _seed_list(args.seeds)
    manifest = RunManifest(out, "sweep", sys.argv[1:],
                           {**flat_config(config, model_config), "grid": grid, "seeds": seeds}, seeds)
    try:
        results, failures = sweep(train_ds, test_ds, grid, seeds, config, model_config, args.dataset_id, args.jobs)
    except ValueError as exc:
        parser.error(str(exc))
    write_results_csv(results, out / "results.csv")
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=2, default=str), encoding="utf-8")
    manifest.finish(runs=len(results), failures=len(failures))
    print(f"{len(results)} runs, {len(failures)} failures -> {out / 'results.csv'}")
    return EXIT_OK


def cmd_plot(args, parser):
    src = Path(args.input)
    if not src.exists():
        raise InputError(f"input CSV not found: {src}")
    out = Path(args.out) if args.out else src.with_suffix(".png")
    plot_csv(src, out, args.param)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cel", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize features and generate candidate sets")
    p.add_argument("--q", type=_positive_int, required=True)
    p.add_argument("--m", type=_positive_int, required=True)
    p.add_argument("--d", type=_positive_int, required=True)
    p.add_argument("--m-test", type=int, default=0, help="extra held-out samples written to <out>/test")
    p.add_argument("--generator", choices=sorted(GENERATOR_ALIASES), default="id")
    p.add_argument("--rate", type=_unit_interval("--rate"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overlap", type=float, default=1.25)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--superclasses", type=int, default=None)
    p.add_argument("--aux-epochs", type=int, default=200)
    p.add_argument("--aux-temperature", type=float, default=4.0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("validate", help="check dataset invariants")
    p.add_argument("dataset", type=Path)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--test", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    p.add_argument("--until-epoch", type=int, help="stop after this epoch (schedule still uses tmax)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    for name, func, help_text in (
        ("ablate", cmd_ablate, "cls / cls+cal / full variants over seeds"),
        ("sweep", cmd_sweep, "grid over alpha, beta, gamma1, gamma2, embed_dim"),
        ("contrast", cmd_contrast, "baseline on instance-dependent vs uniform candidates"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--test", type=Path)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--force", action="store_true")
        p.add_argument("--seeds", default="5", help="count N (seeds 0..N-1) or comma list")
        p.add_argument("--dataset-id", default="synthetic")
        p.add_argument("--jobs", type=int, default=1)
        if name == "sweep":
            p.add_argument("--grid", nargs="+", required=True, metavar="KEY=V1,V2")
        if name == "contrast":
            p.add_argument("--rate", type=_unit_interval("--rate"), required=True)
            p.add_argument("--threshold", type=float, default=0.5)
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("plot", help="render a figure from a history/results/curves CSV")
    p.add_argument("input", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--param", help="swept parameter for results CSVs")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, parser)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CELError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
