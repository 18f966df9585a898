"""Command-line pipeline: generate data, train, evaluate, run grids, export plots.

Every command resolves its configuration as flags over config file over
built-in defaults, executes, and appends a manifest entry next to its outputs
recording the resolved configuration, timestamps, and content hashes, so any
artifact can be traced to the exact invocation that produced it.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import ContractViolation, NumericalError, TrainingDivergence
from .ertss import ertss_smooth, transition_model
from .experiment import ExperimentManifest, desk_manifest, full_manifest, run_experiment
from .metrics import alp, measure_smnr, nmse_detail
from .smoother import (TrainConfig, load_checkpoint, load_smoothing_results,
                       load_training_state, save_checkpoint,
                       save_smoothing_results, smooth, train)
from .systems import TrajectoryDataset, load_measurements, make_dataset

MANIFEST_VERSION = 1

_GENERATE_DEFAULTS = {"system": None, "n": None, "t": None, "smnr": None,
                      "seed": 0, "out": None}
_TRAIN_DEFAULTS = {"data": None, "variant": "dns", "epochs": 200, "batch": 64,
                   "seed": 0, "out": None, "resume": None, "detach_feedback": True,
                   "base_lr": 1e-3, "lr_decay": 0.9, "lr_decay_every": 33,
                   "clip_norm": 10.0}
_EVALUATE_DEFAULTS = {"data": None, "checkpoint": None, "ertss": False, "out": None}
_EXPERIMENT_DEFAULTS = {"manifest": None, "profile": "desk", "out": None}
_EXPORT_DEFAULTS = {"results": None, "trajectories": None, "out": None}


@dataclass(frozen=True)
class RunManifest:
    """One append-only record per command invocation."""

    command: str
    config_path: str | None
    resolved_config: dict
    seed: int | None
    started: str
    finished: str
    output_paths: list
    content_hashes: dict
    format_version: int = MANIFEST_VERSION


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _append_manifest(path: Path, manifest: RunManifest) -> None:
    path = Path(path)
    entries = json.loads(path.read_text()) if path.exists() else []
    entries.append(asdict(manifest))
    path.write_text(json.dumps(entries, sort_keys=True, indent=2) + "\n")


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Flags override config-file keys override built-in defaults."""
    file_cfg = {}
    if args.config is not None:
        file_cfg = json.loads(Path(args.config).read_text())
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ContractViolation(f"unknown config keys {sorted(unknown)}; "
                                    f"expected a subset of {sorted(defaults)}")
    resolved = dict(defaults)
    resolved.update(file_cfg)
    for name in defaults:
        value = getattr(args, name, None)
        if value is not None:
            resolved[name] = value
    missing = [k for k, v in resolved.items() if v is None and k not in
               ("resume", "checkpoint", "manifest", "seed")]
    if missing:
        raise ContractViolation(f"missing required settings: {sorted(missing)}")
    return resolved


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ContractViolation(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args) -> int:
    started = _utcnow()
    cfg = _resolve(args, _GENERATE_DEFAULTS)
    out = Path(cfg["out"])
    dataset = make_dataset(cfg["system"], int(cfg["n"]), int(cfg["t"]),
                           float(cfg["smnr"]), seed=int(cfg["seed"]))
    dataset.save(out)
    _append_manifest(out.with_name(out.name + ".manifest.json"), RunManifest(
        command="generate", config_path=args.config, resolved_config=cfg,
        seed=int(cfg["seed"]), started=started, finished=_utcnow(),
        output_paths=[str(out)], content_hashes={out.name: _sha256(out)},
    ))
    print(f"wrote {dataset.n_sequences} sequences to {out}")
    return 0


def cmd_train(args) -> int:
    started = _utcnow()
    cfg = _resolve(args, _TRAIN_DEFAULTS)
    data_path = _require_file(cfg["data"], "dataset")
    out = Path(cfg["out"])

    # the training command can only see measurements: the loader below seeks
    # past any states block without reading it
    measurements, model, _ = load_measurements(data_path)
    training_view = TrajectoryDataset(
        measurements=measurements, model=model, system=None,
        smnr_db=float("nan"), seed=int(cfg["seed"]), states=None)

    resume = None
    if cfg["resume"] is not None:
        resume = load_training_state(_require_file(cfg["resume"], "resume checkpoint"))
        variant = resume["params"].arch.variant
    else:
        variant = cfg["variant"]
    train_cfg = TrainConfig(
        epochs=int(cfg["epochs"]), batch_size=int(cfg["batch"]),
        base_lr=float(cfg["base_lr"]), lr_decay=float(cfg["lr_decay"]),
        lr_decay_every=int(cfg["lr_decay_every"]), clip_norm=float(cfg["clip_norm"]),
        seed=int(cfg["seed"]), variant=variant,
        detach_feedback=bool(cfg["detach_feedback"]),
    )

    def checkpoint_each_epoch(epoch, params, adam, shuffle_rng, history):
        save_checkpoint(out, params, adam=adam,
                        shuffle_state=shuffle_rng.bit_generator.state,
                        epoch_next=epoch + 1, history=history)

    try:
        params, history = train(training_view, model, train_cfg,
                                callback=checkpoint_each_epoch, _resume=resume)
    except TrainingDivergence as exc:
        if exc.last_params is not None:
            save_checkpoint(out, exc.last_params,
                            meta={"diverged_epoch": exc.epoch, "diverged_batch": exc.batch})
            print(f"training diverged; last finite parameters kept at {out}",
                  file=sys.stderr)
        raise
    _append_manifest(out.with_name(out.name + ".manifest.json"), RunManifest(
        command="train", config_path=args.config, resolved_config=cfg,
        seed=int(cfg["seed"]), started=started, finished=_utcnow(),
        output_paths=[str(out)], content_hashes={out.name: _sha256(out)},
    ))
    print(f"trained {len(history)} epochs, final loss {history[-1]['loss']:.4f}, "
          f"checkpoint at {out}")
    return 0


def _metric_rows(dataset, results) -> list[dict]:
    detail = nmse_detail(dataset.states, [r.point_estimates for r in results])
    rows = []
    for i, res in enumerate(results):
        rows.append({
            "sequence": i,
            "nmse_db": float(detail.per_sequence_db[i]),
            "nmse_exact": bool(detail.exact[i]),
            "alp": alp([dataset.states[i]], [res]),
            "measurement_loglik": res.loglik,
        })
    return rows


def cmd_evaluate(args) -> int:
    started = _utcnow()
    cfg = _resolve(args, _EVALUATE_DEFAULTS)
    if bool(cfg["ertss"]) == (cfg["checkpoint"] is not None):
        raise ContractViolation("pass exactly one of --checkpoint and --ertss")
    dataset = TrajectoryDataset.load(_require_file(cfg["data"], "dataset"))
    if dataset.states is None:
        raise ContractViolation("evaluation needs a dataset with stored states")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    if cfg["checkpoint"] is not None:
        params, _ = load_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"))
        if params.arch.meas_dim != dataset.model.n or params.arch.state_dim != dataset.model.m:
            raise ContractViolation(
                f"checkpoint is {params.arch.state_dim}->{params.arch.meas_dim} dimensional "
                f"but the dataset model is {dataset.model.m}->{dataset.model.n}")
        method = f"checkpoint:{params.arch.variant}"
        results = [smooth(y, dataset.model, params) for y in dataset.measurements]
    else:
        stm = transition_model(dataset.system)
        method = "ertss"
        results = [ertss_smooth(y, stm, dataset.model) for y in dataset.measurements]

    rows = _metric_rows(dataset, results)
    detail = nmse_detail(dataset.states, [r.point_estimates for r in results])
    metrics = {
        "method": method,
        "nmse_db": detail.mean_db,
        "alp": alp(dataset.states, results),
        "measured_smnr_db": measure_smnr(dataset),
        "per_sequence": rows,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    save_smoothing_results(out / "smoothing.dnsc", results,
                           meta={"method": method, "data": str(cfg["data"])})

    outputs = [out / "metrics.json", out / "metrics.csv", out / "smoothing.dnsc"]
    _append_manifest(out / "manifest.json", RunManifest(
        command="evaluate", config_path=args.config, resolved_config=cfg,
        seed=None, started=started, finished=_utcnow(),
        output_paths=[str(p) for p in outputs],
        content_hashes={p.name: _sha256(p) for p in outputs},
    ))
    print(f"{method}: NMSE {metrics['nmse_db']:.2f} dB, ALP {metrics['alp']:.3f}, "
          f"measured SMNR {metrics['measured_smnr_db']:.2f} dB")
    return 0


def cmd_experiment(args) -> int:
    started = _utcnow()
    cfg = _resolve(args, _EXPERIMENT_DEFAULTS)
    base = full_manifest() if cfg["profile"] == "full" else desk_manifest()
    overrides = {}
    if cfg["manifest"] is not None:
        overrides = json.loads(_require_file(cfg["manifest"], "experiment manifest").read_text())
        unknown = set(overrides) - set(asdict(base))
        if unknown:
            raise ContractViolation(f"unknown manifest keys {sorted(unknown)}")
    manifest = ExperimentManifest(**{**asdict(base), **overrides})
    out = Path(cfg["out"])

    table = run_experiment(manifest, out_dir=out, progress=print)
    outputs = [out / "results.csv", out / "results.json"]
    _append_manifest(out / "manifest.json", RunManifest(
        command="experiment", config_path=args.config,
        resolved_config={**cfg, "experiment": asdict(manifest)},
        seed=manifest.seed, started=started, finished=_utcnow(),
        output_paths=[str(p) for p in outputs],
        content_hashes={p.name: _sha256(p) for p in outputs},
    ))
    print(table.to_csv(), end="")
    return 0


def cmd_export_plots(args) -> int:
    started = _utcnow()
    cfg = _resolve(args, _EXPORT_DEFAULTS)
    results_dir = Path(cfg["results"])
    results, _ = load_smoothing_results(_require_file(results_dir / "smoothing.dnsc",
                                                      "smoothing results"))
    dataset = TrajectoryDataset.load(_require_file(cfg["trajectories"], "dataset"))
    if dataset.states is None:
        raise ContractViolation("plot export needs a dataset with stored states")
    if len(results) != dataset.n_sequences:
        raise ContractViolation(
            f"{len(results)} smoothing results but {dataset.n_sequences} sequences")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    written = []
    for i, res in enumerate(results):
        x, y = dataset.states[i], dataset.measurements[i]
        if res.T != len(x):
            raise ContractViolation(f"sequence {i}: {res.T} posteriors for {len(x)} steps")
        m = x.shape[1]
        mean = res.point_estimates
        std = np.sqrt(np.stack([np.diag(b.cov) for b in res.posteriors]))
        path = out / f"trajectory_{i:03d}.csv"
        header = (["t"] + [f"x_true_{j + 1}" for j in range(m)]
                  + [f"y_{j + 1}" for j in range(y.shape[1])]
                  + [f"mean_{j + 1}" for j in range(m)]
                  + [f"std_{j + 1}" for j in range(m)])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for t in range(len(x)):
                writer.writerow([t + 1] + [repr(float(v)) for v in x[t]]
                                + [repr(float(v)) for v in y[t]]
                                + [repr(float(v)) for v in mean[t]]
                                + [repr(float(v)) for v in std[t]])
        written.append(path)

    _append_manifest(out / "manifest.json", RunManifest(
        command="export-plots", config_path=args.config, resolved_config=cfg,
        seed=None, started=started, finished=_utcnow(),
        output_paths=[str(p) for p in written],
        content_hashes={p.name: _sha256(p) for p in written},
    ))
    print(f"wrote {len(written)} trajectory files to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dnsmooth",
        description="Unsupervised recurrent Gaussian smoothing pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="simulate a dataset at a target SMNR")
    gen.add_argument("--system", choices=("lorenz", "chen", "sdsp"))
    gen.add_argument("--n", type=int, help="number of sequences")
    gen.add_argument("--t", type=int, help="sequence length")
    gen.add_argument("--smnr", type=float, help="target SMNR in dB")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", help="output dataset file")
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="fit the prior network to measurements")
    tr.add_argument("--data", help="dataset file (only measurements are read)")
    tr.add_argument("--variant", choices=("dns", "dns-s", "dns-noskip"))
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out", help="checkpoint file, rewritten every epoch")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--detach-feedback", action=argparse.BooleanOptionalAction,
                    dest="detach_feedback", default=None,
                    help="stop gradients at the state-feedback edge (default: on)")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="smooth a labeled dataset and report metrics")
    ev.add_argument("--data", help="dataset file with states")
    ev.add_argument("--checkpoint", help="trained parameters to evaluate")
    ev.add_argument("--ertss", action="store_true", default=None,
                    help="use the model-based reference smoother instead")
    ev.add_argument("--out", help="output directory")
    ev.set_defaults(func=cmd_evaluate)

    ex = sub.add_parser("experiment", help="run a systems x SMNR x methods grid")
    ex.add_argument("--manifest", help="JSON file overriding profile fields")
    ex.add_argument("--profile", choices=("desk", "full"))
    ex.add_argument("--out", help="output directory")
    ex.set_defaults(func=cmd_experiment)

    xp = sub.add_parser("export-plots", help="write plot-ready trajectory CSVs")
    xp.add_argument("--results", help="evaluate output directory")
    xp.add_argument("--trajectories", help="dataset file with the true states")
    xp.add_argument("--out", help="output directory")
    xp.set_defaults(func=cmd_export_plots)

    for p in (gen, tr, ev, ex, xp):
        p.add_argument("--config", help="JSON config file (flags take precedence)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ContractViolation, FileNotFoundError, IsADirectoryError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
