"""Command-line front end: simulate, gen-dataset, train, eval, monitor, report.

Every run is fixed by a config file (flat key = value) plus command-line
overrides, and every artifact written carries the package version, the seed
and the config digest.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_FAULT, EXIT_ERROR = 0, 1, 2
METRIC_KINDS = ("branch", "robustness", "generic_a", "generic_b")


def _limit_threads():
    n = os.environ.get("PONWATCH_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _common(p):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ponwatch", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"ponwatch {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write one OTDR trace as CSV")
    _common(p)
    p.add_argument("--fault", action="append", default=[], metavar="BRANCH:DB",
                   help="one-way attenuation on a branch; DB may be 'break'")
    p.add_argument("--feeder-loss", type=float, default=0.0)
    p.add_argument("--pnr", type=float, help="add noise at this peak-to-noise ratio (dB)")

    p = sub.add_parser("gen-dataset", help="generate a labelled dataset file")
    _common(p)
    p.add_argument("--kind", choices=("network", "window", "robustness"), required=True)
    p.add_argument("--per-class", type=int)
    p.add_argument("--count", type=int, help="target record count for window datasets")
    p.add_argument("--pnr-min", type=float)
    p.add_argument("--pnr-max", type=float)
    p.add_argument("--csv", help="also export the records as CSV")

    p = sub.add_parser("train", help="train a model on a dataset")
    _common(p)
    p.add_argument("--model", choices=("branch", "generic_a", "generic_b"), required=True)
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    _common(p)
    p.add_argument("--model", help="expected model kind or a checkpoint path")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--name", help="metrics file prefix (default: model kind)")
    p.add_argument("--pnr-min", type=float, help="only regression records at or above this PNR")

    p = sub.add_parser("monitor", help="diagnose a trace against the healthy reference")
    _common(p)
    p.add_argument("--model", choices=("generic_a", "generic_b"), help="expected model kind")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trace", help="trace CSV; simulated from --fault/--pnr when omitted")
    p.add_argument("--fault", action="append", default=[], metavar="BRANCH:DB")
    p.add_argument("--pnr", type=float)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("report", help="summarize an eval metrics directory")
    p.add_argument("metrics", nargs="?", help="metrics directory")
    p.add_argument("--out", help="metrics directory (alternative to the positional)")
    return ap


class CliError(Exception):
    pass


def _config(args, **extra):
    from .config import load_config

    overrides = dict(extra)
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = val
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config and not Path(args.config).is_file():
        raise CliError(f"config file not found: {args.config}")
    return load_config(args.config, overrides)


def _header(cfg, *extra):
    return [f"ponwatch {__version__}", f"seed {cfg.seed}", f"config_digest {cfg.digest()}", *extra]


def _require(path, what):
    if path is None or not Path(path).exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _out(args, default):
    return Path(args.out or default)


def _faults(items):
    from .otdr_sim import BREAK

    faults = {}
    for item in items:
        b, sep, db = item.partition(":")
        try:
            faults[int(b)] = BREAK if db.strip().lower() == "break" else float(db)
        except ValueError:
            raise CliError(f"--fault expects BRANCH:DB or BRANCH:break, got {item!r}") from None
        if not sep:
            raise CliError(f"--fault expects BRANCH:DB, got {item!r}")
    return faults


def _simulate_trace(cfg, faults, pnr, feeder_loss=0.0):
    from dataclasses import replace

    from .otdr_sim import FaultScenario, add_awgn, simulate

    sim = cfg.sim_config()
    if feeder_loss:
        sim = replace(sim, dynamic_range_db=sim.dynamic_range_db + 2.0 * feeder_loss)
    trace = simulate(cfg.topology(), FaultScenario(faults, feeder_extra_loss_db=feeder_loss), sim)
    return trace if pnr is None else add_awgn(trace, pnr, cfg.seed)


def cmd_simulate(args):
    from .otdr_sim import trace_to_csv

    cfg = _config(args)
    trace = _simulate_trace(cfg, _faults(args.fault), args.pnr, args.feeder_loss)
    out = _out(args, "trace.csv")
    peaks = " ".join(f"{p.branch_id}@{p.peak_index}:{p.peak_height:.4f}" for p in trace.ground_truth)
    trace_to_csv(trace, out, _header(cfg, f"pnr_db {args.pnr}", f"peaks {peaks}"))
    print(f"wrote {out} ({len(trace)} samples, {len(trace.ground_truth)} reflections)")
    return EXIT_OK


def cmd_gen_dataset(args):
    from .dataset import build_generic_dataset, build_network_dataset, export_csv, save_dataset

    if args.kind == "robustness":
        cfg = _config(args, robust_per_class=args.per_class, robust_pnr_min=args.pnr_min,
                      robust_pnr_max=args.pnr_max)
    else:
        cfg = _config(args, per_class=args.per_class, target_count=args.count, pnr_min=args.pnr_min,
                      pnr_max=args.pnr_max)
    topo, sim = cfg.topology(), cfg.sim_config()
    if args.kind == "window":
        ds = build_generic_dataset(topo, sim, cfg.generic_recipe())
    elif args.kind == "robustness":
        ds = build_network_dataset(topo, sim, cfg.robustness_recipe())
    else:
        ds = build_network_dataset(topo, sim, cfg.network_recipe())
    out = _out(args, f"{args.kind}.ds")
    save_dataset(ds, out)
    if args.csv:
        export_csv(ds, args.csv)
    print(f"wrote {out}: {len(ds)} records, digest {ds.digest[:16]}")
    return EXIT_OK


def cmd_train(args):
    from .dataset import load_dataset
    from .models import build_model, history_to_csv, save_model, train

    cfg = _config(args)
    ds = load_dataset(_require(args.dataset, "dataset"))
    want = "network" if args.model == "branch" else "window"
    if ds.kind != want:
        raise CliError(f"model {args.model} needs a {want} dataset, got {ds.kind}")
    kwargs = {"hidden": cfg.hidden if args.model == "branch" else cfg.hidden[0]} if cfg.hidden else {}
    model = build_model(args.model, seed=cfg.seed, **kwargs)
    model, history = train(model, ds, cfg.train_config(args.model), log=lambda s: print(s, flush=True))
    out = _out(args, f"{args.model}.ckpt")
    meta = {"version": __version__, "seed": cfg.seed, "config_digest": cfg.digest(),
            "dataset_digest": ds.digest[:16], "epochs": len(history)}
    save_model(model, out, meta)
    history_to_csv(str(out) + ".history.csv", history, _header(cfg, f"dataset_digest {ds.digest[:16]}"))
    print(f"wrote {out}")
    return EXIT_OK


def _load_checkpoint(args):
    from .models import load_model

    path = args.checkpoint
    if path is None and args.model and Path(args.model).is_file():
        path = args.model
    model, meta = load_model(_require(path, "checkpoint"))
    if args.model and not Path(args.model).is_file() and args.model != model.kind:
        raise CliError(f"checkpoint holds a {model.kind} model, not {args.model}")
    return model, meta


def cmd_eval(args):
    from .dataset import load_dataset
    from .models import evaluate_classifier, evaluate_regression, histogram_to_csv

    cfg = _config(args)
    model, meta = _load_checkpoint(args)
    ds = load_dataset(_require(args.dataset, "dataset"))
    split = ds if args.split == "all" else ds.subset(args.split)
    if len(split) == 0:
        raise CliError(f"dataset has no {args.split} records")
    out = _out(args, "metrics")
    out.mkdir(parents=True, exist_ok=True)
    name = args.name or model.kind
    head = _header(cfg, f"model {model.kind}", f"checkpoint_digest {meta.get('config_digest', '-')}",
                   f"dataset_digest {ds.digest[:16]}", f"split {args.split}")
    cm = evaluate_classifier(model, split)
    cm.to_csv(out / f"{name}_confusion.csv", head)
    metrics = {"records": cm.total, "accuracy": cm.accuracy}
    if model.kind == "branch":
        metrics["normal_row_rate"] = cm.row_rate(0)
    else:
        reg = evaluate_regression(model, split, min_pnr_db=args.pnr_min)
        metrics["position_mae_samples"] = reg.position_mae
        metrics["position_rmse_samples"] = reg.position_rmse
        if args.pnr_min is None:
            metrics["position_mae_pnr10_samples"] = evaluate_regression(model, split, min_pnr_db=10.0).position_mae
        histogram_to_csv(out / f"{name}_position_hist.csv", reg.position_histogram(), head)
        if reg.level_errors is not None:
            metrics["level_mae"] = reg.level_mae
            metrics["level_rmse"] = reg.level_rmse
            histogram_to_csv(out / f"{name}_level_hist.csv", reg.level_histogram(), head)
    with open(out / f"{name}_metrics.txt", "w") as fh:
        for h in head:
            fh.write(f"# {h}\n")
        for k, v in metrics.items():
            fh.write(f"{k} = {float(v)!r}\n")
    for k, v in metrics.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_monitor(args):
    from .monitor import build_reference, format_reports, monitor_with_model_a, monitor_with_model_b, reports_to_csv
    from .otdr_sim import FaultScenario, simulate, trace_from_csv

    cfg = _config(args, threshold=args.threshold)
    model, _ = _load_checkpoint(args)
    if model.kind not in ("generic_a", "generic_b"):
        raise CliError(f"monitoring needs a generic model, checkpoint holds {model.kind}")
    topo, sim = cfg.topology(), cfg.sim_config()
    ref = build_reference(simulate(topo, FaultScenario(), sim), topo, sim)
    if args.trace:
        trace = trace_from_csv(_require(args.trace, "trace"), sim.sample_interval_ns)
        source = args.trace
    else:
        pnr = cfg.monitor_pnr if args.pnr is None else args.pnr
        trace = _simulate_trace(cfg, _faults(args.fault), pnr)
        source = f"simulated faults={args.fault} pnr={pnr}"
    if model.kind == "generic_a":
        reports = monitor_with_model_a(trace, model, ref, cfg.threshold)
    else:
        reports = monitor_with_model_b(trace, model, ref)
    head = _header(cfg, f"model {model.kind}", f"trace {source}", f"threshold {cfg.threshold}")
    print(format_reports(reports, head), end="")
    if args.out:
        reports_to_csv(reports, args.out, head)
    return EXIT_FAULT if any(r.is_fault for r in reports) else EXIT_OK


def _read_metrics(path):
    vals = {}
    for line in path.read_text().splitlines():
        if line.startswith("#") or "=" not in line:
            continue
        k, _, v = line.partition("=")
        vals[k.strip()] = float(v)
    return vals


def cmd_report(args):
    d = Path(args.metrics or args.out or "metrics")
    expected = [d / f"{k}_metrics.txt" for k in METRIC_KINDS]
    present = [p for p in expected if p.is_file()]
    missing = [p.name for p in expected if not p.is_file()]
    if not present:
        raise CliError(f"no metrics in {d}; expected files: {', '.join(p.name for p in expected)}")
    lines = [f"# ponwatch {__version__} report for {d}", f"{'metric':<36} value"]
    for p in present:
        kind = p.name[:-len("_metrics.txt")]
        for k, v in _read_metrics(p).items():
            lines.append(f"{kind + '.' + k:<36} {v:.6g}")
    for name in missing:
        lines.append(f"missing: {name}")
    text = "\n".join(lines) + "\n"
    (d / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "gen-dataset": cmd_gen_dataset, "train": cmd_train,
            "eval": cmd_eval, "monitor": cmd_monitor, "report": cmd_report}


def run(argv=None) -> int:
    _limit_threads()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse already printed usage or --help/--version text
        return EXIT_OK if e.code in (0, None) else EXIT_ERROR
    from .config import ConfigError
    from .dataset import DatasetError
    from .models import TrainingDiverged
    from .nn_core import CheckpointError
    from .otdr_sim import ConfigurationError

    # ValueError/OSError cover malformed inputs and unreadable files
    try:
        return COMMANDS[args.command](args)
    except (CliError, ConfigError, ConfigurationError, DatasetError, CheckpointError, TrainingDiverged,
            ValueError, OSError) as e:
        print(f"ponwatch {args.command}: error: {e}", file=sys.stderr)
        return EXIT_ERROR


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
