"""``curvnet`` command line: gen, train, eval.

Exit codes: 0 success, 2 usage error, 3 data or model validation error,
4 numerical abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import dataset, evaluation, nnet
from .numerics import ReinitParams

log = logging.getLogger("curvnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"
SPLIT_FILES = {"train": "train.csv", "validation": "validation.csv", "test": "test.csv"}
DESK_TRAIN_SAMPLES = 300_000
DESK_VALIDATION_SAMPLES = 60_000
DESK_MAX_EPOCHS = 60


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


def default_seed() -> int:
    raw = os.environ.get("CURVNET_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"CURVNET_SEED must be an integer, got {raw!r}", EXIT_USAGE) from None


def _iters(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad iteration list {text!r}") from None
    if any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("iteration counts must be >= 0")
    return vals


def _rho(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rho {text!r}") from None
    if v < 64:
        raise argparse.ArgumentTypeError("rho must be >= 64")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="curvnet", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="JSON file whose keys mirror the flags")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the circle dataset for one resolution")
    g.add_argument("--rho", type=_rho, default=256)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--iters", type=_iters, default=(5, 10, 15, 20))
    g.add_argument("--repeats", type=int, default=5)
    g.add_argument("--cfl", type=float, default=ReinitParams.cfl)
    g.add_argument("--scheme", default=ReinitParams.scheme)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    t = sub.add_parser("train", help="train a network on a generated dataset")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--arch", default="128x4")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--seed", type=int, default=None)
    scale = t.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", dest="desk_scale", action="store_true", default=True)
    scale.add_argument("--full-scale", dest="desk_scale", action="store_false")
    t.add_argument("--batch-size", type=int, default=nnet.TrainConfig.batch_size)
    t.add_argument("--learning-rate", type=float, default=nnet.TrainConfig.learning_rate)
    t.add_argument("--max-epochs", type=int, default=nnet.TrainConfig.max_epochs)
    t.add_argument("--patience", type=int, default=nnet.TrainConfig.patience)
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", help="run flower experiments and write reports")
    e.add_argument("--models", type=Path, default=None)
    e.add_argument("--report", type=Path, required=True)
    e.add_argument("--experiment", default="all")
    e.add_argument("--numerical-only", action="store_true")
    e.add_argument("--iters", type=_iters, default=evaluation.ITERATIONS)
    e.add_argument("--cfl", type=float, default=ReinitParams.cfl)
    e.add_argument("--scheme", default=ReinitParams.scheme)
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--no-svg", action="store_true")
    return p


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags, filling unset values from ``--config`` (flags win)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        conf = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {args.config}: {exc}")
    if not isinstance(conf, dict):
        parser.error("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = set(conf) - known - {"command"}
    if unknown:
        parser.error(f"unknown config keys: {sorted(unknown)}")
    # Re-parse with config values as defaults so explicit flags still win.
    sub.set_defaults(**{k: v for k, v in conf.items() if k in known})
    args = parser.parse_args(argv)
    for key in ("out", "data", "models", "report"):
        if isinstance(getattr(args, key, None), str):
            setattr(args, key, Path(getattr(args, key)))
    for key in ("iters",):
        if isinstance(getattr(args, key, None), (str, list)):
            v = getattr(args, key)
            setattr(args, key, _iters(v) if isinstance(v, str) else tuple(int(x) for x in v))
    return args


# --------------------------------------------------------------------------
# gen


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and not path.is_dir():
        raise CliError(f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"{path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    try:
        reinit = ReinitParams(cfl=args.cfl, scheme=args.scheme)
        spec = dataset.DatasetSpec(rho=args.rho, reinit_iterations_list=tuple(args.iters),
                                   repeats_per_radius=args.repeats, seed=seed, reinit=reinit)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    _prepare_dir(args.out, args.force)
    t0 = time.perf_counter()
    samples = dataset.generate_circle_samples(spec, jobs=args.jobs)
    parts = dataset.split(samples, seed)
    digests = {}
    for key, name in SPLIT_FILES.items():
        digests[name] = dataset.write_csv(getattr(parts, key), args.out / name)
    combined = hashlib.sha256("".join(digests[n] for n in sorted(digests)).encode()).hexdigest()
    manifest = {
        "format": "curvnet-dataset",
        "version": 1,
        "rho": spec.rho,
        "seed": seed,
        "spec": {"rho": spec.rho, "reinit_iterations_list": list(spec.reinit_iterations_list),
                 "repeats_per_radius": spec.repeats_per_radius, "seed": seed,
                 "reinit": asdict(reinit), "circles": dataset.circle_count(spec.rho)},
        "counts": {"train": len(parts.train), "validation": len(parts.validation),
                   "test": len(parts.test), "total": len(samples)},
        "files": digests,
        "digest": combined,
    }
    (args.out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(samples)} samples to {args.out} "
          f"({time.perf_counter() - t0:.1f} s, digest {combined[:12]})")
    return EXIT_OK


# --------------------------------------------------------------------------
# train


def load_manifest(data_dir: Path) -> dict:
    path = data_dir / MANIFEST
    if not path.is_file():
        raise CliError(f"missing dataset manifest {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"corrupt manifest {path}: {exc}") from exc
    for key in ("rho", "files", "counts"):
        if key not in manifest:
            raise CliError(f"manifest {path} lacks {key!r}")
    return manifest


def _load_split(data_dir: Path, manifest: dict, key: str) -> dataset.SampleSet:
    name = SPLIT_FILES[key]
    path = data_dir / name
    if not path.is_file():
        raise CliError(f"missing split file {path}")
    expected = manifest["files"].get(name)
    if expected and dataset.file_digest(path) != expected:
        raise CliError(f"{path} does not match the manifest digest")
    return dataset.read_csv(path)


def cmd_train(args) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    try:
        sizes = nnet.parse_arch(args.arch)
        max_epochs = min(args.max_epochs, DESK_MAX_EPOCHS) if args.desk_scale else args.max_epochs
        config = nnet.TrainConfig(batch_size=args.batch_size, learning_rate=args.learning_rate,
                                  max_epochs=max_epochs, patience=args.patience, seed=seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    if args.out.exists() and not args.force:
        raise CliError(f"{args.out} exists; pass --force to overwrite")
    manifest = load_manifest(args.data)
    parts = dataset.SplitSet(*(_load_split(args.data, manifest, k)
                               for k in ("train", "validation", "test")))
    if args.desk_scale:
        parts = dataset.SplitSet(
            dataset.subsample(parts.train, DESK_TRAIN_SAMPLES, seed),
            dataset.subsample(parts.validation, DESK_VALIDATION_SAMPLES, seed + 1),
            parts.test)
    t0 = time.perf_counter()

    def progress(epoch, loss, val):
        log.info("epoch %3d  train MSE %.4e  val MAE %.4e", epoch, loss, val)

    model, tlog = nnet.train(parts, sizes, config, rho_tag=int(manifest["rho"]), progress=progress)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    nnet.save_model(model, args.out, config)
    tlog.to_csv(args.out.with_suffix(".log.csv"))
    test = evaluation.error_stats(nnet.predict(model, parts.test.stencils), parts.test.targets)
    print(f"trained {sizes} on {len(parts.train)} samples: best epoch {tlog.best_epoch}, "
          f"val MAE {tlog.best_val_mae:.4e}, test MAE {test.mae:.4e}, test MSE {test.mse:.4e}, "
          f"max AE {test.max_ae:.4e} ({time.perf_counter() - t0:.0f} s)")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def model_path(models_dir: Path, rho: int) -> Path:
    return models_dir / f"model_rho{rho}.json"


def cmd_eval(args) -> int:
    try:
        specs = (evaluation.experiment_catalog() if args.experiment == "all"
                 else [evaluation.find_experiment(args.experiment)])
        reinit = ReinitParams(cfl=args.cfl, scheme=args.scheme)
    except (KeyError, ValueError) as exc:
        raise CliError(str(exc).strip("'\""), EXIT_USAGE) from exc
    specs = [evaluation.ExperimentSpec(s.name, s.shape, s.grid_kind, s.half_width, s.resolution,
                                       s.rho_tag, s.expected_count, tuple(args.iters))
             for s in specs]
    models = {}
    if not args.numerical_only:
        if args.models is None:
            raise CliError("--models is required unless --numerical-only is given", EXIT_USAGE)
        for rho in sorted({s.rho_tag for s in specs}):
            path = model_path(args.models, rho)
            if path.is_file():
                models[rho] = nnet.load_model(path)
            else:
                log.warning("no model at %s; experiments with rho=%d run numerical-only", path, rho)
    t0 = time.perf_counter()
    results = evaluation.run_catalog(specs, models, reinit, jobs=args.jobs)
    reports = [r for res in results for r in res.reports]
    evaluation.emit_report(reports, args.report, svg=not args.no_svg)
    for r in reports:
        print(f"{r.experiment:24s} {r.method:9s} it={r.iterations:<3d} n={r.n:<4d} "
              f"MAE={r.mae:.6e} MaxAE={r.max_ae:.6e} r={r.pearson_r:.6f}")
    print(f"{len(reports)} rows written to {args.report} ({time.perf_counter() - t0:.1f} s)")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"curvnet: error: {exc}", file=sys.stderr)
        return exc.code
    except nnet.TrainingDiverged as exc:
        print(f"curvnet: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, evaluation.HarnessError, OSError) as exc:
        print(f"curvnet: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
