"""Command-line entry point: ``koopvm <command> [options]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import binned_mae, export_koopman, latent_sweep, sensitivity, write_bins_csv
from .data import (
    MCMP_EXPECTED_Q,
    SyntheticConfig,
    clean_labels,
    generate_synthetic,
    load_dataset,
    load_schema,
    mcmp_schema,
    write_frames_csv,
    write_synthetic,
)
from .model import load_checkpoint, save_checkpoint
from .train import (
    TrainConfig,
    evaluate,
    finetune,
    load_config,
    prepare,
    run_experiment,
    train_model,
    write_loss_history_csv,
)

logger = logging.getLogger("koopvm")

WORKDIR_ENV = "KOOPVM_WORKDIR"
TABLE_VARIANTS = ("s-aek", "e-aek", "sdk", "ann")


class Run:
    """Collects artifacts of one command and writes the run manifest."""

    def __init__(self, command: str, argv: list[str], out: Path):
        self.command = command
        self.argv = argv
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []
        self.config: dict = {}
        self.dataset_sha256: str | None = None
        self.seeds: list[int] = []
        self.started = time.time()

    def add(self, path) -> Path:
        path = Path(path)
        self.artifacts.append(str(path))
        return path

    def write_json(self, name: str, payload) -> Path:
        path = self.out / name
        _atomic_write(path, json.dumps(payload, indent=2, default=_json_default))
        return self.add(path)

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "tool_version": __version__,
            "config": self.config,
            "dataset_sha256": self.dataset_sha256,
            "seeds": self.seeds,
            "artifacts": self.artifacts,
            "seconds": round(time.time() - self.started, 3),
        }
        path = self.out / "manifest.json"
        _atomic_write(path, json.dumps(manifest, indent=2, default=_json_default))
        return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(WORKDIR_ENV, "work")) / args.command


def _config(args) -> TrainConfig:
    overrides = {"seed": getattr(args, "seed", None), "variant": getattr(args, "variant", None)}
    return load_config(getattr(args, "config", None), overrides)


def _frames(args, run: Run):
    schema = load_schema(args.schema) if args.schema else mcmp_schema()
    frames = load_dataset(args.data, schema)
    run.dataset_sha256 = _sha256(args.data)
    return clean_labels(frames, expected_q=None if args.schema else MCMP_EXPECTED_Q)


def _checkpoint_config(args, saved: dict) -> TrainConfig:
    doc = dict(saved)
    if getattr(args, "config", None):
        doc.update(load_config(args.config).to_dict())
    cfg = TrainConfig.from_dict(doc) if doc else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_preprocess(args, run: Run) -> None:
    cfg = _config(args)
    run.config = cfg.to_dict()
    frames, report = _frames(args, run)
    data = prepare(frames, cfg)
    run.add(write_frames_csv(frames, run.out / "cleaned.csv"))
    run.write_json("cleaning_report.json", report.to_dict())
    run.write_json("split.json", data.split.to_dict())
    run.write_json("scalers.json", [s.to_dict() for s in data.scalers])
    print(f"q per stage after cleaning: {report.q}; rows train/val/test: "
          f"{len(data.split.train)}/{len(data.split.val)}/{len(data.split.test)}")


def _train_common(args, run: Run, pretrain_only: bool) -> None:
    cfg = _config(args)
    run.config = cfg.to_dict()
    run.seeds = [cfg.seed]
    frames, report = _frames(args, run)
    run.write_json("cleaning_report.json", report.to_dict())
    result = train_model(frames, cfg, pretrain_only=pretrain_only)
    run.add(save_checkpoint(result.model, run.out / "checkpoint.json", cfg.to_dict()))
    run.write_json("pretrain_history.json", result.pretrain_history)
    if result.finetune_history:
        run.add(write_loss_history_csv(result.finetune_history, run.out / "loss_history.csv"))
    run.write_json("eval_report.json", {"test": result.test_report.to_dict(), "val": result.val_report.to_dict()})
    print(json.dumps(result.test_report.metrics()))


def cmd_pretrain(args, run: Run) -> None:
    _train_common(args, run, pretrain_only=True)


def cmd_train(args, run: Run) -> None:
    _train_common(args, run, pretrain_only=False)


def cmd_finetune(args, run: Run) -> None:
    model, saved = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, saved)
    run.config = cfg.to_dict()
    run.seeds = [cfg.seed]
    frames, _ = _frames(args, run)
    data = prepare(frames, cfg)
    model, history = finetune(model, data, cfg)
    run.add(save_checkpoint(model, run.out / "checkpoint.json", cfg.to_dict()))
    run.add(write_loss_history_csv(history, run.out / "loss_history.csv"))
    report = evaluate(model, data.test, "test")
    run.write_json("eval_report.json", {"test": report.to_dict(), "val": evaluate(model, data.val, "val").to_dict()})
    print(json.dumps(report.metrics()))


def _load_for_analysis(args, run: Run):
    model, saved = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, saved)
    run.config = cfg.to_dict()
    frames, _ = _frames(args, run)
    data = prepare(frames, cfg)
    return model, data


def cmd_evaluate(args, run: Run) -> None:
    model, data = _load_for_analysis(args, run)
    report = evaluate(model, data.subset(args.split), args.split)
    run.write_json("eval_report.json", report.to_dict())
    print(json.dumps(report.metrics()))


def cmd_sensitivity(args, run: Run) -> None:
    model, data = _load_for_analysis(args, run)
    sens = sensitivity(model, data.subset(args.split))
    run.add(sens.to_csv(run.out / "sensitivity.csv"))
    run.write_json("sensitivity.json", {"split": args.split, "units": "label units per standardized input",
                                        "top_decile_mass_share": sens.top_mass_share(0.1)})
    print(f"top-decile share of sensitivity mass: {sens.top_mass_share(0.1):.3f}")


def cmd_export_koopman(args, run: Run) -> None:
    model, data = _load_for_analysis(args, run)
    export = export_koopman(model, data.subset(args.split), args.tau)
    run.add(export.to_csv(run.out / "koopman.csv"))
    run.write_json("koopman.json", asdict(export))
    print(json.dumps(export.counts()))


def cmd_sweep_latent(args, run: Run) -> None:
    cfg = _config(args)
    run.config = cfg.to_dict()
    run.seeds = [cfg.seed]
    frames, _ = _frames(args, run)
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    result = latent_sweep(frames, cfg, sizes)
    run.add(result.to_csv(run.out / "sweep.csv"))
    best = result.best()
    print(f"best latent size: {best.latent_dim if best else 'none'}")


def cmd_binned_mae(args, run: Run) -> None:
    model, data = _load_for_analysis(args, run)
    rows = binned_mae(model, data.subset(args.split))
    run.add(write_bins_csv(rows, run.out / "binned_mae.csv"))
    print(f"{len(rows)} populated bins")


def cmd_synth(args, run: Run) -> None:
    cfg = SyntheticConfig(
        n_samples=args.n, p=tuple(int(v) for v in args.p.split(",")), q=tuple(int(v) for v in args.q.split(",")),
        latent_dim=args.latent_dim, coupling=args.coupling, noise=args.noise,
        nonlinearity=args.nonlinearity, seed=args.seed if args.seed is not None else 0,
    )
    run.config = asdict(cfg)
    run.seeds = [cfg.seed]
    paths = write_synthetic(generate_synthetic(cfg), run.out)
    for p in paths.values():
        run.add(p)
    run.dataset_sha256 = _sha256(paths["data"])
    print(f"wrote {paths['data']}")


def format_table(reports: dict) -> str:
    lines = ["| Model | Stage I MSE | Stage II MSE | Total MSE |", "|---|---|---|---|"]
    for name, rep in reports.items():
        m, s = rep.mean, rep.std
        if not m:
            lines.append(f"| {name.upper()} | failed | failed | failed |")
            continue
        cells = [f"{m[k]:.4f} ± {s[k]:.4f}" for k in ("stage1_mse", "stage2_mse", "total_mse")]
        lines.append(f"| {name.upper()} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def cmd_reproduce_table2(args, run: Run) -> None:
    base = _config(args)
    run.config = base.to_dict()
    run.seeds = list(range(args.repeats))
    frames, report = _frames(args, run)
    run.write_json("cleaning_report.json", report.to_dict())
    variants = [v.strip() for v in args.variants.split(",")] if args.variants else list(TABLE_VARIANTS)
    reports = {}
    for variant in variants:
        cfg = replace(base, variant=variant)
        logger.info("running %s x %d seeds", variant, args.repeats)
        reports[variant] = run_experiment(frames, cfg, args.repeats, jobs=args.jobs)
    run.write_json("table2.json", {v: r.to_dict() for v, r in reports.items()})
    table = format_table(reports)
    path = run.out / "table2.md"
    path.write_text(table + "\n")
    run.add(path)
    print(table)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="koopvm", description="Deep Koopman virtual metrology for multistage manufacturing.")
    parser.add_argument("--version", action="version", version=f"koopvm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, config=True, checkpoint=False, split=False):
        p.add_argument("--out", help=f"output directory (default: ${WORKDIR_ENV}/<command> or work/<command>)")
        p.add_argument("--seed", type=int, help="seed for all randomness of the run")
        if data:
            p.add_argument("--data", required=True, help="input CSV with a header row")
            p.add_argument("--schema", help="schema TOML (default: bundled MCMP schema)")
        if config:
            p.add_argument("--config", help="TOML file with training settings")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint JSON written by train/pretrain")
        if split:
            p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("preprocess", help="load, clean, split and standardize a dataset")
    common(p)
    p.set_defaults(func=cmd_preprocess)

    for name, func, helptext in (
        ("pretrain", cmd_pretrain, "step 1 only: autoencoders, then transitions and prediction heads"),
        ("train", cmd_train, "pre-training followed by fine-tuning"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--variant", choices=("s-aek", "e-aek", "sdk"))
        p.set_defaults(func=func)

    p = sub.add_parser("finetune", help="step 2 on a pre-trained checkpoint")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="per-stage MSE/MAE of a checkpoint")
    common(p, checkpoint=True, split=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sensitivity", help="gradient sensitivity of final-stage predictions")
    common(p, checkpoint=True, split=True)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("export-koopman", help="normalized Koopman eigenvalues at the nominal operating point")
    common(p, checkpoint=True, split=True)
    p.add_argument("--tau", type=float, default=0.01, help="threshold on normalized |eigenvalue| for non-zero counts")
    p.set_defaults(func=cmd_export_koopman)

    p = sub.add_parser("sweep-latent", help="final-stage validation MSE across latent sizes")
    common(p)
    p.add_argument("--variant", choices=("s-aek", "e-aek", "sdk"))
    p.add_argument("--sizes", required=True, help="comma-separated latent sizes, e.g. 10,20,40,60,80")
    p.set_defaults(func=cmd_sweep_latent)

    p = sub.add_parser("binned-mae", help="final-stage MAE binned by label norm")
    common(p, checkpoint=True, split=True)
    p.set_defaults(func=cmd_binned_mae)

    p = sub.add_parser("synth", help="write a synthetic multistage dataset with known coupling")
    common(p, data=False, config=False)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--p", default="8,6", help="features per stage")
    p.add_argument("--q", default="4,4", help="labels per stage")
    p.add_argument("--latent-dim", type=int, default=4)
    p.add_argument("--coupling", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--nonlinearity", choices=("tanh", "linear"), default="tanh")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reproduce-table2", help="all variants x seeds, aggregated test MSE table")
    common(p)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(TABLE_VARIANTS)}")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_reproduce_table2)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    run = Run(args.command, argv, _out_dir(args))
    try:
        args.func(args, run)
    except Exception as exc:  # noqa: BLE001 - reported as exit status 1
        if args.verbose:
            logger.exception("command failed")
        print(f"koopvm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    run.finish()
    return 0


if __name__ == "__main__":
    sys.exit(main())
