"""Command-line entry point: gen / train / eval / rf / experiment.

Every command resolves its configuration from (defaults <- --config file <-
flags), writes the resolved config and seed into its output directory, and is
fully reproducible from that pair.  A run directory is owned by one process
via a lock file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .architecture import build_cpm, load_model, load_spec, save_spec
from .engine.checkpoint import FingerprintMismatch
from .evaluation import (
    rf_sweep,
    stage_curve,
    write_pck_csv,
    write_rf_sweep_csv,
    write_stage_curve_csv,
)
from .receptive import build_rf_family, receptive_field
from .synth import SynthDataset, default_skeleton, write_manifest
from .training import (
    TrainingDiverged,
    gradient_report,
    train,
    write_metrics_csv,
)

LOCK_NAME = ".lock"


class CliError(RuntimeError):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


class RunLock:
    """Exclusive ownership of a run directory for the life of one command."""

    def __init__(self, directory: Path):
        self.path = directory / LOCK_NAME
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"{self.path.parent} is locked by another run "
                           f"(remove {self.path} if that run is dead)")
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)


def _prepare_out(out: str, force: bool) -> Path:
    out_dir = Path(out)
    if out_dir.exists() and any(p.name != LOCK_NAME for p in out_dir.iterdir()):
        if not force:
            raise CliError(f"output directory {out_dir} is not empty; use --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _resolve_config(args) -> dict:
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    train_over = {}
    if getattr(args, "scheme", None) is not None:
        train_over["scheme"] = args.scheme
    if getattr(args, "epochs", None) is not None:
        train_over["epochs"] = args.epochs
    if train_over:
        overrides["train"] = train_over
    arch_over = {}
    if getattr(args, "stages", None) is not None:
        arch_over["stages"] = args.stages
    if arch_over:
        overrides["arch"] = arch_over
    return cfgmod.load_config(getattr(args, "config", None), overrides)


def _write_resolved(cfg: dict, out_dir: Path) -> None:
    cfgmod.save_config(cfg, out_dir / "config.json")


# -- commands ------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    out_dir = _prepare_out(args.out, args.force)
    with RunLock(out_dir):
        _write_resolved(cfg, out_dir)
        train_cfg, test_cfg = cfgmod.dataset_configs(cfg)
        write_manifest(out_dir / "train_manifest.json", train_cfg)
        write_manifest(out_dir / "test_manifest.json", test_cfg)
        if args.png:
            SynthDataset(train_cfg).save_pngs(out_dir / "png" / "train")
            SynthDataset(test_cfg).save_pngs(out_dir / "png" / "test")
        print(f"wrote manifests for {train_cfg.count} train / {test_cfg.count} test "
              f"samples to {out_dir}")
    return 0


def _load_datasets(data_dir: Path):
    train_manifest = data_dir / "train_manifest.json"
    test_manifest = data_dir / "test_manifest.json"
    if not train_manifest.exists() or not test_manifest.exists():
        raise CliError(f"no dataset manifests under {data_dir}; run 'gen' first")
    return (SynthDataset.from_manifest(train_manifest),
            SynthDataset.from_manifest(test_manifest))


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out_dir = _prepare_out(args.out, args.force)
    with RunLock(out_dir):
        _write_resolved(cfg, out_dir)
        train_data, val_data = _load_datasets(Path(args.data))
        spec = cfgmod.arch_spec(cfg)
        save_spec(spec, out_dir / "arch_spec.json")
        model = build_cpm(spec, seed=cfg["seed"])
        tconf = cfgmod.train_config(cfg)
        try:
            result = train(model, train_data, tconf, val_data=val_data,
                           out_dir=out_dir, resume=args.resume)
        except TrainingDiverged as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return 3
        write_metrics_csv(result.metrics, out_dir / "metrics.csv")
        gradient_report(result.grad_stats, out_dir)
        print(f"trained scheme {tconf.scheme} for {result.epochs_run} epochs; "
              f"final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out_dir = _prepare_out(args.out, args.force)
    with RunLock(out_dir):
        _write_resolved(cfg, out_dir)
        expected = load_spec(args.spec) if args.spec else None
        try:
            model, _ = load_model(args.checkpoint, expected_spec=expected)
        except FingerprintMismatch as exc:
            raise CliError(str(exc))
        _, test_data = _load_datasets(Path(args.data))
        radii = cfg["eval"]["radii"]
        sigma = cfg["train"]["sigma"]
        results = stage_curve(model, test_data, sigma, radii=radii)
        write_stage_curve_csv(results, out_dir / "pck_stages.csv")
        write_pck_csv(results[-1], out_dir / "pck_parts.csv",
                      part_names=default_skeleton().labeled)
        final = results[-1]
        print(f"PCK@{final.radii[-1]:g} (final stage): {final.overall[-1]:.4f}")
    return 0


def cmd_rf(args) -> int:
    spec = load_spec(args.spec)
    report = receptive_field(spec)
    out_dir = _prepare_out(args.out, args.force)
    with RunLock(out_dir):
        rows = report.rows()
        import csv

        with open(out_dir / "receptive_field.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        for st in report.stages:
            print(f"stage {st.stage}: rf_on_image={st.rf_on_image}"
                  + (f", rf_on_beliefs={st.rf_on_beliefs}" if st.rf_on_beliefs else ""))
    return 0


def cmd_experiment(args) -> int:
    cfg = _resolve_config(args)
    out_dir = _prepare_out(args.out, args.force)
    with RunLock(out_dir):
        _write_resolved(cfg, out_dir)
        train_cfg, test_cfg = cfgmod.dataset_configs(cfg)
        train_data = SynthDataset(train_cfg)
        test_data = SynthDataset(test_cfg)
        write_manifest(out_dir / "train_manifest.json", train_cfg)
        write_manifest(out_dir / "test_manifest.json", test_cfg)
        spec = cfgmod.arch_spec(cfg)
        sigma = cfg["train"]["sigma"]
        radii = cfg["eval"]["radii"]

        if args.name == "schemes":
            import csv

            rows = []
            for scheme in ("i", "ii", "iii", "iv"):
                run_dir = out_dir / f"scheme_{scheme}"
                run_dir.mkdir(exist_ok=True)
                model = build_cpm(spec, seed=cfg["seed"])
                result = train(model, train_data, cfgmod.train_config(cfg, scheme=scheme),
                               val_data=test_data, out_dir=run_dir)
                write_metrics_csv(result.metrics, run_dir / "metrics.csv")
                gradient_report(result.grad_stats, run_dir)
                curve = stage_curve(model, test_data, sigma, radii=radii)
                rows.append([scheme, result.epochs_run] +
                            [float(c.overall[-1]) for c in curve])
            with open(out_dir / "schemes_summary.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["scheme", "epochs"] +
                                [f"pck_stage{t}" for t in range(1, spec.stages + 1)])
                writer.writerows(rows)
        elif args.name == "stages":
            model = build_cpm(spec, seed=cfg["seed"])
            result = train(model, train_data, cfgmod.train_config(cfg),
                           val_data=test_data, out_dir=out_dir)
            write_metrics_csv(result.metrics, out_dir / "metrics.csv")
            write_stage_curve_csv(stage_curve(model, test_data, sigma, radii=radii),
                                  out_dir / "pck_stages.csv")
        elif args.name == "rf-sweep":
            family = build_rf_family(
                parts=cfg["arch"]["parts"], input_size=tuple(cfg["arch"]["input_size"]),
                context_rf_targets=cfg["rf_sweep"]["context_rf_targets"],
                stages=cfg["arch"]["stages"],
                heatmap_stride=cfg["arch"]["heatmap_stride"],
                base_width=cfg["arch"]["base_width"],
                target_stage1_rf=cfg["arch"]["target_stage1_rf"],
            )
            for member in family:
                save_spec(member, out_dir / f"spec_rf{receptive_field(member).stages[-1].rf_on_beliefs}.json")
            tconf = cfgmod.train_config(
                cfg, epochs=cfg["rf_sweep"]["epochs"],
                learning_rate=cfg["rf_sweep"].get("learning_rate",
                                                  cfg["train"]["learning_rate"]))
            rows = rf_sweep(family, train_data, test_data, tconf,
                            out_csv=out_dir / "rf_sweep.csv", seed=cfg["seed"])
            for row in rows:
                print(f"rf_beliefs={row.rf_beliefs} params={row.parameters} "
                      f"pck@0.2={row.pck_at_02:.4f}")
        elif args.name == "grad-flow":
            for scheme in ("i", "iv"):
                run_dir = out_dir / f"scheme_{scheme}"
                run_dir.mkdir(exist_ok=True)
                model = build_cpm(spec, seed=cfg["seed"])
                result = train(model, train_data, cfgmod.train_config(cfg, scheme=scheme),
                               val_data=test_data, out_dir=run_dir)
                write_metrics_csv(result.metrics, run_dir / "metrics.csv")
                gradient_report(result.grad_stats, run_dir)
        else:
            raise CliError(f"unknown experiment {args.name!r}")
        print(f"experiment '{args.name}' artifacts in {out_dir}")
    return 0


# -- parser ----------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (defaults merged underneath)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--force", action="store_true",
                        help="allow writing into a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posecascade",
        description="Multi-stage belief-map pose estimation on synthetic figures",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate dataset manifests (and optional PNGs)")
    _add_common(p)
    p.add_argument("--png", action="store_true", help="also materialize PNG images")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one scheme on a generated dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory containing the manifests")
    p.add_argument("--scheme", choices=["i", "ii", "iii", "iv"])
    p.add_argument("--stages", type=int, help="override the stage count")
    p.add_argument("--epochs", type=int, help="override the epoch budget")
    p.add_argument("--resume", help="snapshot checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PCK evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory containing the manifests")
    p.add_argument("--spec", help="architecture spec file to verify against")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rf", help="receptive-field report for an architecture spec")
    p.add_argument("--spec", required=True, help="architecture spec file")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("experiment", help="run a packaged analysis experiment")
    p.add_argument("name", choices=["schemes", "stages", "rf-sweep", "grad-flow"])
    _add_common(p)
    p.add_argument("--scheme", choices=["i", "ii", "iii", "iv"])
    p.add_argument("--stages", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
