"""``careflow`` command line.

Exit codes: 0 success, 1 usage or I/O problem, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, gradcheck, plotting
from .config import ExperimentConfig, load_config
from .numkit import NumericalError
from .pipeline import (ABLATIONS, SOURCES, ConfigError, RunConfig, alignment_report, evaluate, forward_pass,
                       init_bundle, output_dim, predict, straightness_report, train)
from .synthdata import SPLITS, DatasetSpec, SpecError, generate_all, read_dataset, write_dataset

log = logging.getLogger("careflow")

EULER_SWEEP = (1, 2, 4, 8, 16)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default, allow_nan=False) + "\n")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path: Path, rows: list[dict]) -> None:
    header = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(r.get(k)) for k in header])


# --- shared plumbing ----------------------------------------------------------

def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    run = cfg.run
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for flag, key in (("alpha_f", "alpha_f"), ("alpha_b", "alpha_b"), ("beta", "beta"), ("euler_steps", "euler_steps")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    run = replace(run, **overrides).with_ablation(getattr(args, "ablate", None))
    cfg.run = run.validate()
    return cfg


def _dataset(args, cfg: ExperimentConfig) -> tuple[DatasetSpec, dict]:
    if getattr(args, "data", None) is not None:
        spec, splits = read_dataset(args.data)
        if spec.task != cfg.run.task:
            raise ConfigError(f"dataset task {spec.task!r} does not match run task {cfg.run.task!r}")
        return spec, splits
    spec = cfg.dataset_spec()
    return spec, generate_all(spec)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_one(run: RunConfig, spec: DatasetSpec, splits: dict):
    bundle = init_bundle(run, spec.raw_dims, output_dim(run.task, spec.n_classes))
    report = train(bundle, splits, run, spec.label_range)
    return bundle, report


def _summary(metrics: dict) -> str:
    return " ".join(f"{k}={v:.4f}" for k, v in metrics.items() if isinstance(v, float))


# --- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        if cfg.preset is None:
            cfg.dataset_doc = {**cfg.dataset_doc, "seed": args.seed}
        else:
            cfg.preset_args = {**cfg.preset_args, "seed": args.seed}
    spec = cfg.dataset_spec()
    out = _out_dir(args)
    splits = generate_all(spec)
    write_dataset(spec, splits, out)
    (out / "config.json").write_text(cfg.dumps())
    for s in SPLITS:
        print(f"{s}: {len(splits[s])} samples")
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    spec, splits = _dataset(args, cfg)
    out = _out_dir(args)
    bundle, report = _train_one(cfg.run, spec, splits)
    checkpoint.save(out / "checkpoint.json", bundle, cfg.run, {"dataset": spec.name})
    _write_json(out / "report.json", report.to_dict())
    if report.epochs:
        _write_rows(out / "epochs.csv", report.epochs)
    (out / "config.json").write_text(cfg.dumps())
    last = {k[4:]: v for k, v in (report.epochs[-1] if report.epochs else {}).items() if k.startswith("val_")}
    print(f"trained {cfg.run.epochs} epochs (best epoch {report.best_epoch}); last validation: {_summary(last)}")
    if report.test:
        print(f"test: {_summary(report.test)}")
    return 0


def _load_checkpoint(args):
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    path = Path(args.checkpoint)
    if path.is_dir():
        path = path / "checkpoint.json"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    bundle, doc = checkpoint.load(path)
    run = RunConfig.from_dict(doc["config"]) if "config" in doc else RunConfig()
    if args.euler_steps is not None:
        run = replace(run, euler_steps=args.euler_steps).validate()
    return bundle, run


def cmd_eval(args) -> int:
    bundle, run = _load_checkpoint(args)
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig(run=run)
    spec, splits = _dataset(args, cfg)
    split = splits["test"]
    out = _out_dir(args)
    metrics = evaluate(bundle, split, run, spec.label_range)
    doc = {"split": "test", "euler_steps": run.euler_steps, "metrics": metrics}
    if not run.no_alignment:
        doc["alignment"] = alignment_report(bundle, split, run)
        doc["straightness"] = straightness_report(bundle, split, run)
    doc["euler_sweep"] = {str(n): evaluate(bundle, split, run, spec.label_range, n) for n in EULER_SWEEP}
    _write_json(out / "eval.json", doc)
    pred = predict(bundle, split, run)
    rows = []
    for i in range(len(split)):
        row = {"sample_id": int(split.ids[i]), "label": split.y[i].item()}
        for j, v in enumerate(np.atleast_1d(pred[i])):
            row[f"score_{j}"] = float(v)
        rows.append(row)
    _write_rows(out / "predictions.csv", rows)
    print(f"test ({run.euler_steps} Euler steps): {_summary(metrics)}")
    return 0


def _ablate_job(job):
    variant, seed, run_doc, spec_doc, splits, out = job
    run = RunConfig.from_dict(run_doc).with_ablation(variant)
    run = replace(run, seed=seed)
    spec = DatasetSpec.from_dict(spec_doc)
    bundle, report = _train_one(run, spec, splits)
    align = alignment_report(bundle, splits["test"], run)
    row = {k: v for k, v in report.test.items() if k != "flags"}
    row["energy_ratio"] = float(np.mean([align[f"energy_post_{m}"] / align[f"energy_pre_{m}"] for m in SOURCES]))
    row["cycle_error"] = float(np.mean([align[f"cycle_error_{m}"] for m in SOURCES]))
    run_dir = Path(out) / "runs" / variant / f"seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "report.json", {**report.to_dict(), "alignment": align, "config": run.to_dict()})
    return row


def _threads() -> int:
    raw = os.environ.get("CAREFLOW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CAREFLOW_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError("CAREFLOW_THREADS must be >= 1")
    return n


def run_ablation(run: RunConfig, spec: DatasetSpec, splits: dict, out: Path, workers: int = 1) -> dict:
    """Full model plus every ablation over ``run.seeds`` seeds starting at ``run.seed``."""
    variants = ("full",) + ABLATIONS
    seeds = [run.seed + i for i in range(run.seeds)]
    jobs = [(v, s, run.to_dict(), spec.to_dict(), splits, str(out)) for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_job, jobs))
    else:
        results = [_ablate_job(j) for j in jobs]
    table = []
    for vi, v in enumerate(variants):
        rows = results[vi * len(seeds):(vi + 1) * len(seeds)]
        entry = {"variant": v, "metrics": {}}
        for key in rows[0]:
            vals = [r[key] for r in rows]
            sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            entry["metrics"][key] = {"mean": float(np.mean(vals)), "sd": sd, "values": vals}
        table.append(entry)
    return {"seeds": seeds, "rows": table}


def cmd_ablate(args) -> int:
    cfg = _experiment(args)
    spec, splits = _dataset(args, cfg)
    out = _out_dir(args)
    result = run_ablation(cfg.run, spec, splits, out, _threads())
    _write_json(out / "ablation.json", result)
    metrics = list(result["rows"][0]["metrics"])
    flat = []
    for entry in result["rows"]:
        row = {"variant": entry["variant"]}
        for m in metrics:
            row[f"{m}_mean"] = entry["metrics"][m]["mean"]
            row[f"{m}_sd"] = entry["metrics"][m]["sd"]
        flat.append(row)
    _write_rows(out / "ablation.csv", flat)
    (out / "config.json").write_text(cfg.dumps())
    key = "Acc" if cfg.run.task == "classification" else "MAE"
    for entry in result["rows"]:
        s = entry["metrics"][key]
        print(f"{entry['variant']:15s} {key} {s['mean']:.3f} +- {s['sd']:.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    fault = None
    if args.inject_fault:
        fault = gradcheck.Fault("total objective", "forward/a2l/layer1/W", (2, 3))
    results = gradcheck.run_all(args.seed or 0, fault)
    lines = [r.line() for r in results]
    if args.out is not None:
        (_out_dir(args) / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    failed = [r for r in results if not r.passed]
    terms = sorted({(r.suite, r.term) for r in results})
    print(f"{len(results)} arrays over {len(terms)} terms checked, {len(failed)} failed")
    return 2 if failed else 0


def cmd_export_plot(args) -> int:
    bundle, run = _load_checkpoint(args)
    cfg = load_config(args.config) if args.config is not None else ExperimentConfig(run=run)
    spec, splits = _dataset(args, cfg)
    split = splits["test"]
    out = _out_dir(args)
    _, inter = forward_pass(bundle, split.U, replace(run, no_alignment=False))
    raw = {"before": {m: inter.X[m] for m in ("a", "v", "l")},
           "after": {"a2l": inter.mapped["a"], "v2l": inter.mapped["v"], "l": inter.X["l"]}}
    flat = {f"{stage}/{k}": v for stage, groups in raw.items() for k, v in groups.items()}
    coords, projected = plotting.embed_2d(flat, seed=run.seed)
    panels = {stage: {k: coords[f"{stage}/{k}"] for k in groups} for stage, groups in raw.items()}
    plotting.write_coordinates(out / "coordinates.csv", panels, split.ids)
    plotting.render_svg(out / "features.svg", panels, "PCA projection" if projected else "native coordinates")
    align = alignment_report(bundle, split, run)
    _write_json(out / "gap.json", {"projected": projected, **align})
    for m in SOURCES:
        print(f"{m}->l energy distance: before {align[f'energy_pre_{m}']:.4f} after {align[f'energy_post_{m}']:.4f}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "export-plot": cmd_export_plot,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="careflow", description="Rectified-flow modality alignment on synthetic multimodal data.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", type=Path, help="experiment JSON (defaults apply when omitted)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--data", type=Path, help="dataset directory written by gen-data")
    p.add_argument("--checkpoint", type=Path, help="checkpoint file or training output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", choices=list(ABLATIONS))
    p.add_argument("--alpha-f", type=float)
    p.add_argument("--alpha-b", type=float)
    p.add_argument("--beta", type=int)
    p.add_argument("--euler-steps", type=int)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command not in ("gradcheck",) and args.out is None:
            raise UsageError("--out is required")
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"careflow: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, SpecError, checkpoint.CheckpointError, OSError, ValueError) as exc:
        print(f"careflow: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
