"""Command-line entry point: generate, train, evaluate, replicate."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

from . import __version__
from . import datagen as dg
from . import evaluate as ev
from . import netmodel as nm
from . import refmodel as rm
from . import training as trn
from .dataset import DatasetFormatError, read_dataset, write_dataset
from .keyvalue import ConfigError

log = logging.getLogger("shipid")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_SCHEMA = 0, 2, 3, 4, 5

# small enough that one study finishes in minutes on a single CPU
DESK_TRAIN = trn.TrainConfig(H=32, batch_size=64, learning_rate=1e-3, stride=5, val_stride=10,
                             max_epochs=100, patience=30, scale_io=True, seeds=(0, 1, 2))
DESK_DURATION = 600.0
PAPER_DURATION = dg.MIX_REFERENCE_TOTAL
STUDY_NOISE = dg.NoiseSpec(pos_sigma=0.01, r_sigma=0.001)

# (name, arch, loss, mix); "big" is TZRB at desk scale and TZRB+ at paper scale
STUDIES = {
    "loss-comparison": [("Type-1", nm.FINITE, trn.STATE, "big"), ("Type-3", nm.FINITE, trn.ACC, "big")],
    "arch-comparison": [("Type-1", nm.FINITE, trn.STATE, "big"), ("Type-2", nm.FULL, trn.STATE, "big")],
    "data-comparison": [("Type-1", nm.FINITE, trn.STATE, "TZRB+"), ("Type-4", nm.FINITE, trn.STATE, "TZB"),
                        ("Type-5", nm.FINITE, trn.STATE, "TZRB")],
}


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, args: argparse.Namespace, params: dict, inputs, outputs) -> None:
    """Everything needed to rerun: command, options, resolved parameters and file digests."""
    doc = {
        "command": command,
        "version": __version__,
        "config": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "options": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "quiet")},
        "params": params,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in sorted(map(str, outputs))},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, float) and math.isinf(o):
        return "inf"
    if hasattr(o, "tolist"):
        return o.tolist()
    return str(o)


def _float_or_inf(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive (or inf)")
    return v


def _stem(path: Path) -> Path:
    return path.with_suffix("")


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    recipe = dg.Recipe.from_file(args.recipe)
    if args.dt is not None:
        recipe.dt = args.dt
    ds = recipe.build(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    durations = ds.durations()
    for lab, d in durations.items():
        print(f"{lab},{d:.1f}")
    params = {"recipe": recipe.as_dict(), "durations": durations, "trajectories": len(ds)}
    write_manifest(_stem(out).with_suffix(".manifest.json"), "generate", args, params, [args.recipe], [out])
    return EXIT_OK


def _train_config(args, base: trn.TrainConfig) -> trn.TrainConfig:
    return trn.TrainConfig.from_file(args.config) if args.config else base


def cmd_train(args) -> int:
    cfg = _train_config(args, trn.TrainConfig())
    ds = read_dataset(args.dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def progress(epoch, tl, vl):
        if epoch % 10 == 0:
            log.info("epoch %d  train %.5g  val %.5g", epoch, tl, vl)

    res = trn.train(ds, cfg, args.loss, args.arch, args.seed, on_epoch=progress)
    nm.save_checkpoint(res.params, out)
    log_path = _stem(out).with_suffix(".log.csv")
    log_path.write_text(res.log_csv())
    outputs = [out, log_path]
    if args.timing:
        timing = _stem(out).with_suffix(".timing.csv")
        timing.write_text(res.timing_csv())
    params = cfg.as_dict() | {
        "arch": args.arch, "loss": args.loss, "learning_rate_effective": cfg.lr_for(args.loss),
        "best_epoch": res.best_epoch, "best_val": res.best_val,
        "sigma_x": res.stats.sigma_x.tolist(),
        "sigma_a": None if res.stats.sigma_a is None else res.stats.sigma_a.tolist(),
    }
    inputs = [args.dataset] + ([args.config] if args.config else [])
    write_manifest(_stem(out).with_suffix(".manifest.json"), "train", args, params, inputs, outputs)
    print(f"best validation loss {res.best_val!r} at epoch {res.best_epoch}")
    return EXIT_OK


def _unique_names(paths) -> list[str]:
    names, seen = [], {}
    for p in paths:
        base = Path(p).stem
        k = seen.get(base, 0)
        seen[base] = k + 1
        names.append(base if k == 0 else f"{base}-{k}")
    return names


def cmd_evaluate(args) -> int:
    models = {name: nm.load_checkpoint(p) for name, p in zip(_unique_names(args.checkpoints), args.checkpoints)}
    test = read_dataset(args.test)
    baseline = rm.RefModelCoeffs.from_file(args.baseline) if args.baseline else None
    stats = trn.StandardizationStats.from_dataset(test, source="test")
    cells = [ev.Cell(name, 0, ev.evaluate_model(p, test, stats, args.restart_period), params=p)
             for name, p in models.items()]
    base = None if baseline is None else ev.evaluate_model(baseline, test, stats, args.restart_period)
    labels = [lab for lab in dg.KINDS if lab in set(test.labels())]
    report = ev.RolloutReport(list(models), [0], labels, cells, stats, base)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = _write_report(report, out)
    if not args.no_plots:
        plot_models = dict(models) | ({"baseline": baseline} if baseline is not None else {})
        outputs += ev.emit_plots(ev.plot_entries(plot_models, test, stats, args.restart_period), out / "plots")
    print(report.to_csv(), end="")
    inputs = list(args.checkpoints) + [args.test] + ([args.baseline] if args.baseline else [])
    params = {"restart_period": args.restart_period, "sigma_x_test": stats.sigma_x.tolist()}
    write_manifest(out / "manifest.json", "evaluate", args, params, inputs, outputs)
    return EXIT_OK


def _write_report(report: ev.RolloutReport, out: Path) -> list[Path]:
    table, cells = out / "report.csv", out / "cells.csv"
    table.write_text(report.to_csv())
    cells.write_text(report.cells_csv())
    return [table, cells]


def cmd_replicate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(args, trn.TrainConfig() if args.paper_scale else DESK_TRAIN)
    if args.seeds is not None:
        cfg = cfg.replace(seeds=tuple(range(args.seeds)))
    duration = args.duration or (PAPER_DURATION if args.paper_scale else DESK_DURATION)
    big = "TZRB+" if args.paper_scale else "TZRB"
    wind = dg.WindScenario(speed=args.wind)
    noise = dg.NoiseSpec(0.0, 0.0) if args.clean else STUDY_NOISE

    outputs: list[Path] = []
    datasets = {}
    configs = []
    for k, (name, arch, loss, mix) in enumerate(STUDIES[args.study]):
        mix = big if mix == "big" else mix
        if mix not in datasets:
            recipe = dg.mix_recipe(mix, duration)
            datasets[mix] = dg.compose_dataset(recipe, wind=wind, dt=args.dt, seed=args.seed, noise=noise)
            path = out / f"train_{mix.replace('+', 'plus')}.csv"
            write_dataset(datasets[mix], path)
            outputs.append(path)
        configs.append(ev.ExperimentConfig(name, arch, loss, datasets[mix]))
    test = dg.compose_dataset(dg.mix_recipe("TEST", duration), wind=wind, dt=args.dt, seed=args.seed + 1000)
    test_path = out / "test.csv"
    write_dataset(test, test_path)
    outputs.append(test_path)

    baseline = rm.perturbed_coeffs(seed=args.seed)
    report = ev.experiment_matrix(configs, cfg.seeds, test, cfg, baseline, args.restart_period, args.jobs)
    outputs += _write_report(report, out)
    for c in report.cells:
        if c.params is not None:
            path = out / f"ckpt_{c.config}_seed{c.seed}.json"
            nm.save_checkpoint(c.params, path)
            outputs.append(path)
    if not args.no_plots:
        first = {c.config: c.params for c in report.cells if c.seed == cfg.seeds[0] and c.params is not None}
        first["baseline"] = baseline
        outputs += ev.emit_plots(ev.plot_entries(first, test, report.stats, args.restart_period), out / "plots")
    print(report.to_csv(), end="")
    params = {"train": cfg.as_dict(), "duration": duration, "wind": vars(wind),
              "noise": vars(noise), "studies": STUDIES[args.study]}
    write_manifest(out / "manifest.json", "replicate", args, params, [args.config] if args.config else [], outputs)
    return EXIT_OK


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shipid", description="Ship maneuvering system identification toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a dataset from a recipe file")
    g.add_argument("recipe")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dt", type=float, default=None, help="override the recipe sample period")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one network")
    t.add_argument("dataset")
    t.add_argument("--out", required=True, help="checkpoint path (.json)")
    t.add_argument("--config", default=None, help="key = value training config")
    t.add_argument("--arch", choices=nm.ARCHS, default=nm.FINITE)
    t.add_argument("--loss", choices=trn.LOSS_KINDS, default=trn.STATE)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--timing", action="store_true", help="also write per-epoch wall times")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="roll out checkpoints over a test set")
    e.add_argument("checkpoints", nargs="+")
    e.add_argument("--test", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--baseline", default=None, help="reference-model coefficient file")
    e.add_argument("--restart-period", type=_float_or_inf, default=ev.DEFAULT_RESTART)
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("replicate", help="run a complete comparison study")
    r.add_argument("study", choices=sorted(STUDIES))
    r.add_argument("--out", required=True)
    r.add_argument("--config", default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--seeds", type=int, default=None, help="number of training seeds")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--dt", type=float, default=0.1)
    r.add_argument("--duration", type=float, default=None, help="total seconds per training recipe")
    r.add_argument("--wind", type=float, default=0.0, help="mean true wind speed [m/s]")
    r.add_argument("--clean", action="store_true", help="train on noise-free data")
    r.add_argument("--paper-scale", action="store_true")
    r.add_argument("--restart-period", type=_float_or_inf, default=ev.DEFAULT_RESTART)
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_replicate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (nm.CheckpointError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ConfigError, trn.MissingAccelerationError, trn.DegenerateSplitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
