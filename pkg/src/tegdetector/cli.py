"""Command line entry point: ``tegdetector <subcommand> ...``.

Every subcommand writes into a fresh ``--out`` directory and echoes its
effective settings to ``config.json`` there; ``--config that.json`` with a
new ``--out`` replays the run. Failures print one JSON object on stderr and
exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .detectors import (
    FdConfig,
    density_detect,
    fd_detect,
    model_detect,
    pipeline_detect,
    repeat_detect_many,
    write_verdicts,
)
from .estimator import VARIANTS, TEGDetector
from .robustness import (
    DEFAULT_CTR_LEVELS,
    DEFAULT_GRAD_LEVELS,
    attack_many,
    degradation_curve,
    write_added_edges,
    write_degradation,
)
from .synthgen import SynthConfig, generate
from .teg import SliceSpec, Teg, build_tegs, load_teg, save_teg
from .train import Metrics, RepeatReport, evaluate, split
from .txdata import load_labels, load_transactions, write_labels, write_transactions

logger = logging.getLogger("tegdetector")

# not echoed: where to write, and the file the settings came from
NOT_ECHOED = ("out", "config", "command", "func", "overwrite", "verbose")


class CliError(Exception):
    def __init__(self, message: str, field: Optional[str] = None, kind: str = "error"):
        super().__init__(message)
        self.field = field
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, kind="usage")


# -- shared io -------------------------------------------------------------

def _fresh_dir(path: str, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise CliError(f"output directory {out} is not empty (pass --overwrite)", "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _echo(args, out: Path):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in NOT_ECHOED}
    _write_json(out / "config.json", {"command": args.command, **cfg})


def _teg_dirname(i: int, address: str) -> str:
    return f"{i:05d}_{address}"


def save_teg_set(tegs: Sequence[Teg], out: Path):
    out.mkdir(parents=True, exist_ok=True)
    with (out / "index.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dir", "address", "label"])
        for i, teg in enumerate(tegs):
            name = _teg_dirname(i, teg.center)
            save_teg(teg, out / name)
            w.writerow([name, teg.center, "" if teg.label is None else int(bool(teg.label))])


def load_teg_set(path) -> List[Teg]:
    root = Path(path)
    index = root / "index.csv"
    if not index.is_file():
        raise CliError(f"{root} has no index.csv; run build-tegs first", "tegs")
    with index.open(newline="", encoding="utf-8") as fh:
        return [load_teg(root / row["dir"]) for row in csv.DictReader(fh)]


def _labels_of(tegs: Sequence[Teg]) -> List[int]:
    missing = [t.center for t in tegs if t.label is None]
    if missing:
        raise CliError(f"{len(missing)} TEG(s) are unlabeled, e.g. {missing[0]}", "tegs")
    return [int(t.label) for t in tegs]


def _select(tegs: Sequence[Teg], split_path: Optional[str], part: str, run: int) -> List[Teg]:
    if not split_path:
        return list(tegs)
    payload = json.loads(Path(split_path).read_text(encoding="utf-8"))
    runs = payload["runs"]
    if not 0 <= run < len(runs):
        raise CliError(f"split file has {len(runs)} run(s), asked for run {run}", "split_run")
    wanted = set(runs[run][part])
    chosen = [t for t in tegs if t.center in wanted]
    if len(chosen) != len(wanted):
        raise CliError("split file names addresses missing from the TEG set", "split")
    return chosen


def _metrics_or_none(verdicts) -> Optional[dict]:
    if any(v.label is None for v in verdicts):
        return None
    return Metrics.from_predictions([v.label for v in verdicts],
                                    [v.predicted_phishing for v in verdicts]).as_dict()


def _model_kwargs(args) -> dict:
    return dict(
        hidden_dim=args.hidden_dim, repr_dim=args.repr_dim, pool_levels=args.pool_levels,
        assign_ratio=args.assign_ratio, mlp_hidden=args.mlp_hidden, max_nodes=args.max_nodes,
        epochs=args.epochs, learning_rate=args.learning_rate, batch_size=args.batch_size,
        optimizer=args.optimizer,
    )


# -- subcommands -----------------------------------------------------------

def cmd_gen(args):
    cfg = SynthConfig(
        n_phishing=args.n_phishing, n_normal=args.n_normal, seed=args.seed,
        phishing_ctr_range=tuple(args.phishing_ctr_range),
        normal_ctr_range=tuple(args.normal_ctr_range),
        nodes_range=tuple(args.nodes_range), second_order_range=tuple(args.second_order_range),
        slices_active_range=tuple(args.slices_active_range), amount_scale=args.amount_scale,
        t_slices=args.t_slices, slice_seconds=args.slice_seconds, start_time=args.start_time,
        separable=args.separable,
    )
    records, labels = generate(cfg)
    out = _fresh_dir(args.out, args.overwrite)
    suffix = "csv" if args.format == "csv" else "jsonl"
    write_transactions(records, out / f"transactions.{suffix}", args.format)
    write_labels(labels, out / "labels.csv")
    _echo(args, out)
    return {"records": len(records), "addresses": len(labels)}


def cmd_build_tegs(args):
    fmt = "jsonl" if args.transactions.endswith(".jsonl") else "csv"
    loaded = load_transactions(args.transactions, fmt)
    for err in loaded.errors:
        logger.warning("%s: %s", args.transactions, err)
    labels = load_labels(args.labels)
    tegs = build_tegs(loaded.records, labels, spec=SliceSpec(args.t_slices, args.boundary_mode),
                      weighting=args.weighting, max_links=args.max_links, workers=args.workers)
    out = _fresh_dir(args.out, args.overwrite)
    save_teg_set(tegs, out)
    _echo(args, out)
    return {"tegs": len(tegs), "row_errors": len(loaded.errors), "self_loops": loaded.self_loops}


def cmd_train(args):
    tegs = load_teg_set(args.tegs)
    y = _labels_of(tegs)
    out = _fresh_dir(args.out, args.overwrite)
    report = RepeatReport(args.train_ratio)
    split_runs = []
    with (out / "loss_curve.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "epoch", "loss"])
        for run in range(args.repeats):
            seed = args.seed + run
            tr, te = split(y, args.train_ratio, seed)
            model = TEGDetector.variant(args.variant, random_state=seed, **_model_kwargs(args))
            model.fit([tegs[i] for i in tr])
            report.runs.append(evaluate(model, [tegs[i] for i in te]))
            for epoch, value in enumerate(model.loss_curve_):
                w.writerow([run, epoch, repr(float(value))])
            split_runs.append({"seed": seed, "train": [tegs[i].center for i in tr],
                               "test": [tegs[i].center for i in te]})
            name = "model.json" if run == 0 else f"model_run{run}.json"
            model.save(out / name, {"variant": args.variant, "run": run, "seed": seed})
            logger.info("run %d: %s", run, report.runs[-1])
    report.write(out / "metrics.csv", out / "summary.json")
    _write_json(out / "split.json", {"train_ratio": args.train_ratio, "runs": split_runs})
    _echo(args, out)
    return report.summary()


def cmd_detect(args):
    tegs = _select(load_teg_set(args.tegs), args.split, "test", args.split_run)
    model = TEGDetector.load(args.checkpoint)
    out = _fresh_dir(args.out, args.overwrite)
    if args.fd_threshold is None:
        t0 = time.perf_counter()
        verdicts = model_detect(tegs, model)
        timing = {"model_seconds": time.perf_counter() - t0, "fd_seconds": 0.0}
        invocations = len(tegs)
    else:
        res = pipeline_detect(tegs, model, FdConfig(args.fd_threshold))
        verdicts, invocations = res.verdicts, res.model_invocations
        timing = {"model_seconds": res.model_seconds, "fd_seconds": res.fd_seconds}
    write_verdicts(out / "verdicts.csv", verdicts)
    summary = {"addresses": len(tegs), "model_invocations": invocations,
               "metrics": _metrics_or_none(verdicts)}
    _write_json(out / "metrics.json", summary)
    _echo(args, out)
    # wall-clock numbers vary run to run, so they go to stdout only
    return {**summary, **timing}


def cmd_fd(args):
    tegs = _select(load_teg_set(args.tegs), args.split, "test", args.split_run)
    out = _fresh_dir(args.out, args.overwrite)
    if args.detector == "fd":
        cfg = FdConfig(args.fd_threshold)
        if args.workers > 1:
            with ThreadPoolExecutor(args.workers) as pool:
                verdicts = list(pool.map(lambda t: fd_detect(t, cfg), tegs))
        else:
            verdicts = [fd_detect(t, cfg) for t in tegs]
    elif args.detector == "density":
        verdicts = [density_detect(t) for t in tegs]
    else:
        verdicts = repeat_detect_many(tegs, args.split_ratio)
    write_verdicts(out / "verdicts.csv", verdicts)
    summary = {"addresses": len(tegs), "detector": args.detector,
               "metrics": _metrics_or_none(verdicts)}
    _write_json(out / "metrics.json", summary)
    _echo(args, out)
    return summary


def _parse_models(specs: Sequence[str]) -> Dict[str, TEGDetector]:
    models = {}
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise CliError(f"--model expects NAME=CHECKPOINT, got {spec!r}", "model")
        if name in models:
            raise CliError(f"duplicate model name {name!r}", "model")
        models[name] = TEGDetector.load(path)
    return models


def cmd_attack(args):
    all_tegs = load_teg_set(args.tegs)
    tegs = _select(all_tegs, args.split, "test", args.split_run)
    _labels_of(tegs)
    models = _parse_models(args.model)
    if not models:
        raise CliError("at least one --model NAME=CHECKPOINT is required", "model")
    levels = args.levels or list(DEFAULT_CTR_LEVELS if args.attack == "ctr" else DEFAULT_GRAD_LEVELS)
    n_max = max(t.n for t in all_tegs)
    out = _fresh_dir(args.out, args.overwrite)
    log = []
    rows = degradation_curve(tegs, models, args.attack, levels, seed=args.seed, n_max=n_max, log=log)
    write_degradation(out / "degradation.csv", rows)
    write_added_edges(out / "added_edges.jsonl", log)
    if args.save_perturbed:
        first = next(iter(models.values()))
        for level in levels:
            attacked, _ = attack_many(tegs, args.attack, level, args.seed, model=first, n_max=n_max)
            save_teg_set(attacked, out / "perturbed" / f"level_{level!r}")
    _echo(args, out)
    return {"rows": len(rows), "added_edges": len(log), "n_max": n_max}


def cmd_report(args):
    runs = []
    for d in args.runs:
        root = Path(d)
        entry = {"dir": str(root)}
        cfg = root / "config.json"
        if cfg.is_file():
            entry["command"] = json.loads(cfg.read_text(encoding="utf-8")).get("command")
        for name in ("summary.json", "metrics.json"):
            if (root / name).is_file():
                entry[name[:-5]] = json.loads((root / name).read_text(encoding="utf-8"))
        if (root / "degradation.csv").is_file():
            with (root / "degradation.csv").open(newline="", encoding="utf-8") as fh:
                entry["degradation"] = list(csv.DictReader(fh))
        if len(entry) == 1 or (len(entry) == 2 and "command" in entry):
            raise CliError(f"{root} holds no train/detect/fd/attack outputs", "runs")
        runs.append(entry)
    out = _fresh_dir(args.out, args.overwrite)
    _write_json(out / "report.json", {"runs": runs})
    with (out / "report.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "model", "attack", "level", "precision", "recall", "f_score", "accuracy"])
        for entry in runs:
            if "summary" in entry:
                s = entry["summary"]
                w.writerow([entry["dir"], "", "", "", *(repr(s[k]["mean"]) for k in
                            ("precision", "recall", "f_score", "accuracy"))])
            m = (entry.get("metrics") or {}).get("metrics")
            if m:
                w.writerow([entry["dir"], "", "", "", *(repr(m[k]) for k in
                            ("precision", "recall", "f_score", "accuracy"))])
            for r in entry.get("degradation", []):
                w.writerow([entry["dir"], r["model"], r["attack"], r["level"], r["precision"],
                            r["recall"], r["f_score"], r["accuracy"]])
    _echo(args, out)
    return {"runs": len(runs)}


# -- parser ----------------------------------------------------------------

def _range(kind):
    return dict(nargs=2, type=kind, metavar=("LOW", "HIGH"))


def _add_model_flags(p):
    p.add_argument("--variant", choices=sorted(VARIANTS), default="TEGDetector")
    p.add_argument("--hidden-dim", type=int, default=64, help="GCN hidden width H")
    p.add_argument("--repr-dim", type=int, default=32, help="evolution feature width d")
    p.add_argument("--pool-levels", type=int, default=2)
    p.add_argument("--assign-ratio", type=float, default=0.25)
    p.add_argument("--mlp-hidden", type=int, default=32)
    p.add_argument("--max-nodes", type=int, default=None,
                   help="pool width sizing; default is the largest training TEG")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")


def _add_split_flags(p):
    p.add_argument("--split", default=None, help="split.json from train; restricts to its test set")
    p.add_argument("--split-run", type=int, default=0, help="which run of the split file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tegdetector", description="Phishing detection over transaction evolution graphs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(p, func):
        p.add_argument("--out", required=True, help="output directory (must be empty or new)")
        p.add_argument("--config", default=None, help="JSON file of flag values; explicit flags win")
        p.add_argument("--overwrite", action="store_true", help="allow a non-empty --out")
        p.add_argument("--workers", type=int, default=1, help="parallel per-address work")
        p.set_defaults(func=func)

    p = sub.add_parser("gen", help="generate a synthetic labeled dataset")
    common(p, cmd_gen)
    d = SynthConfig()
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--n-phishing", type=int, default=d.n_phishing)
    p.add_argument("--n-normal", type=int, default=d.n_normal)
    p.add_argument("--phishing-ctr-range", default=list(d.phishing_ctr_range), **_range(float))
    p.add_argument("--normal-ctr-range", default=list(d.normal_ctr_range), **_range(float))
    p.add_argument("--nodes-range", default=list(d.nodes_range), **_range(int))
    p.add_argument("--second-order-range", default=list(d.second_order_range), **_range(int))
    p.add_argument("--slices-active-range", default=list(d.slices_active_range), **_range(int))
    p.add_argument("--amount-scale", type=float, default=d.amount_scale)
    p.add_argument("--t-slices", type=int, default=d.t_slices)
    p.add_argument("--slice-seconds", type=int, default=d.slice_seconds)
    p.add_argument("--start-time", type=int, default=d.start_time)
    p.add_argument("--separable", action=argparse.BooleanOptionalAction, default=d.separable)
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv")

    p = sub.add_parser("build-tegs", help="build one TEG directory per labeled address")
    common(p, cmd_build_tegs)
    p.add_argument("--transactions", help="transactions .csv or .jsonl")
    p.add_argument("--labels", help="address,is_phishing CSV")
    p.add_argument("--t-slices", type=int, default=10)
    p.add_argument("--boundary-mode", choices=["equal_time", "equal_count"], default="equal_time")
    p.add_argument("--weighting", choices=["binary", "amount"], default="binary")
    p.add_argument("--max-links", type=int, default=100)

    p = sub.add_parser("train", help="repeated stratified train/evaluate runs")
    common(p, cmd_train)
    p.add_argument("--tegs", help="directory written by build-tegs")
    p.add_argument("--train-ratio", type=float, default=0.7)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)

    p = sub.add_parser("detect", help="CTR pre-filter followed by a trained model")
    common(p, cmd_detect)
    p.add_argument("--tegs")
    p.add_argument("--checkpoint")
    p.add_argument("--fd-threshold", type=float, default=0.6,
                   help="CTR threshold of the pre-filter; 0 sends every address to the model")
    _add_split_flags(p)

    p = sub.add_parser("fd", help="rule-based detectors (CTR, density, repeat)")
    common(p, cmd_fd)
    p.add_argument("--tegs")
    p.add_argument("--detector", choices=["fd", "density", "repeat"], default="fd")
    p.add_argument("--fd-threshold", type=float, default=0.6)
    p.add_argument("--split-ratio", type=float, default=0.7,
                   help="share of leading slices the repeat detector treats as history")
    _add_split_flags(p)

    p = sub.add_parser("attack", help="evasion attacks and degradation table")
    common(p, cmd_attack)
    p.add_argument("--tegs")
    p.add_argument("--model", action="append", default=[], metavar="NAME=CHECKPOINT")
    p.add_argument("--attack", choices=["ctr", "grad"], default="ctr")
    p.add_argument("--levels", type=float, nargs="+", default=None,
                   help="target CTRs (ctr) or modify rates (grad)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-perturbed", action=argparse.BooleanOptionalAction, default=True)
    _add_split_flags(p)

    p = sub.add_parser("report", help="collect run outputs into report.json/report.csv")
    common(p, cmd_report)
    p.add_argument("--runs", nargs="+", help="output directories of earlier runs")
    return parser


# checked after any --config file is merged, so a config alone can supply them
LATE_REQUIRED = {
    "build-tegs": ("transactions", "labels"),
    "train": ("tegs",),
    "detect": ("tegs", "checkpoint"),
    "fd": ("tegs",),
    "attack": ("tegs",),
    "report": ("runs",),
}


def _check_required(args):
    missing = [k for k in LATE_REQUIRED.get(args.command, ()) if getattr(args, k, None) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise CliError(f"the following arguments are required: {flags}", missing[0], "usage")


def _apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str]):
    """Parse ``argv``, seeding defaults from ``--config`` so explicit flags win."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}", "config") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config file is not valid JSON: {exc}", "config") from exc
    if not isinstance(payload, dict):
        raise CliError("config file must hold a JSON object", "config")
    if payload.get("command", args.command) != args.command:
        raise CliError(f"config file is for {payload['command']!r}, not {args.command!r}", "config")
    known = set(vars(args)) - set(NOT_ECHOED)
    unknown = sorted(set(payload) - known - {"command"})
    if unknown:
        raise CliError(f"unknown config field(s): {', '.join(unknown)}", unknown[0])
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    subparser.set_defaults(**{k: v for k, v in payload.items() if k != "command"})
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv or argv[0] in ("-h", "--help") or "-h" in argv or "--help" in argv:
            parser.parse_args(argv or ["--help"])
        args = _apply_config_file(parser, argv)
        _check_required(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        result = args.func(args)
    except CliError as exc:
        _fail(exc.kind, str(exc), exc.field)
        return 2
    except (ValueError, KeyError, FileNotFoundError, TypeError) as exc:
        _fail(type(exc).__name__, str(exc).strip("'\""), None)
        return 1
    print(json.dumps(result, sort_keys=True, default=float))
    return 0


def _fail(kind: str, message: str, field: Optional[str]):
    payload = {"error": kind, "message": " ".join(message.split())}
    if field:
        payload["field"] = field
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


if __name__ == "__main__":
    sys.exit(main())
