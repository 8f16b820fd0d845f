"""Command-line entry point: ``mmrb train | attack | eval | diagnose | compare``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .attacks import FAMILIES, AttackSpec, CWParams
from .data import Dataset, DatasetFormatError, load_cifar10, load_mnist
from .evaluation import (
    RobustnessReport,
    UnpairedReportsError,
    profile_dump,
    protection_comparison,
    robust_accuracy,
    weight_diagnostics,
)
from .losses import CostMatrix, LossConfig
from .model import CheckpointError, build_lenet, load_checkpoint
from .training import REGIMES, SCHEDULES, NonFiniteLossError, TrainPlan, evaluate_clean, train
from ._io import atomic_write_text

log = logging.getLogger("mmrb")

DATA_ENV = "MMRB_DATA_DIR"
CONFIG_NAME = "config.txt"
RECORD_NAME = "record.json"
TRACE_NAME = "trace.csv"
REPORTS_NAME = "reports.csv"
CHECKPOINT_NAME = "model.ckpt"


class UsageError(Exception):
    """Bad configuration or arguments (exit code 2)."""


# -- metrics CSV ---------------------------------------------------------

def metrics_header(num_classes: int = 10) -> list:
    return ["run_id", "phase", "epoch", "attack", "epsilon", "overall"] + [f"o{i}" for i in range(num_classes)] + [
        "ce", "cost", "fuzziness"]


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    if np.isnan(v):
        return ""
    return f"{v:.6g}"


def metrics_row(run_id="", phase="", epoch=None, attack="", epsilon=None, overall=None, per_class=None, ce=None,
                cost=None, fuzziness=None, num_classes: int = 10) -> list:
    per = list(per_class) if per_class is not None else [None] * num_classes
    return [run_id, phase, fmt(epoch), attack or "", fmt(epsilon), fmt(overall)] + [fmt(v) for v in per] + [
        fmt(ce), fmt(cost), fmt(fuzziness)]


def write_csv(path: Path, rows: list, num_classes: int = 10, append: bool = False) -> None:
    """Write (or append to) a metrics CSV atomically."""
    header = metrics_header(num_classes)
    existing = []
    if append and path.exists():
        existing = read_csv(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in existing:
        w.writerow([r.get(h, "") for h in header])
    for r in rows:
        w.writerow(r)
    atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config --------------------------------------------------------------

def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Keys use CLI flag names."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def render_config(values: dict) -> str:
    return "".join(f"{k.replace('_', '-')} = {v}\n" for k, v in values.items())


TRAIN_KEYS = [
    "dataset", "data_dir", "regime", "protect", "cost", "gamma", "lam", "l2_scope", "epochs", "batch_size", "lr",
    "momentum", "optimizer", "lr_halve_every", "seed", "filters", "train_attack", "train_epsilon", "train_steps",
    "train_step_size", "schedule", "split_epoch", "limit_train", "limit_test", "init_seed",
]


def _add_data_args(p):
    p.add_argument("--dataset", choices=["mnist", "cifar10"], default="mnist")
    p.add_argument("--data-dir", default=None, help=f"dataset directory (falls back to ${DATA_ENV})")
    p.add_argument("--limit-test", type=int, default=0, help="evaluate on the first N test images (0 = all)")


def _add_attack_args(p):
    p.add_argument("--attack", default="pgd", help=f"comma list of {', '.join(FAMILIES)} or 'all'")
    p.add_argument("--epsilon", default="0.3", help="comma list of budgets ('none' = unbounded cw)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--decay", type=float, default=None)
    p.add_argument("--random-start", choices=["on", "off"], default=None)
    p.add_argument("--cw-confidence", type=float, default=0.0)
    p.add_argument("--cw-constant", type=float, default=1.0)
    p.add_argument("--cw-iterations", type=int, default=100)
    p.add_argument("--cw-lr", type=float, default=0.01)
    p.add_argument("--attack-seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=500)
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmrb", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"mmrb {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model under one regime")
    t.add_argument("--config", default=None, help="key=value file; flags override it")
    _add_data_args(t)
    t.add_argument("--regime", choices=REGIMES, default="std")
    t.add_argument("--protect", type=int, default=0, help="protected class p")
    t.add_argument("--cost", type=float, default=10.0, help="protection cost constant c")
    t.add_argument("--gamma", type=float, default=1.0, help="fuzziness weight (cse, cse_adv)")
    t.add_argument("--lam", type=float, default=0.0, help="L2 weight; > 0 switches csa to csa+L2")
    t.add_argument("--l2-scope", choices=["all", "conv"], default="all")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.95)
    t.add_argument("--optimizer", choices=["sgd_momentum", "adam"], default="sgd_momentum")
    t.add_argument("--lr-halve-every", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--init-seed", type=int, default=None, help="weight init seed (defaults to --seed)")
    t.add_argument("--filters", default="5,16", help="conv filter counts, e.g. 5,16 or 6,16")
    t.add_argument("--train-attack", choices=["pgd", "fgsm"], default="pgd")
    t.add_argument("--train-epsilon", type=float, default=None)
    t.add_argument("--train-steps", type=int, default=40)
    t.add_argument("--train-step-size", type=float, default=0.01)
    t.add_argument("--schedule", choices=SCHEDULES, default=None)
    t.add_argument("--split-epoch", type=int, default=None)
    t.add_argument("--limit-train", type=int, default=0)
    t.add_argument("--out", default="runs", help="parent directory for run directories")
    t.add_argument("--run-dir", default=None, help="exact run directory (overrides --out naming)")

    a = sub.add_parser("attack", parents=[common], help="robust accuracy of a checkpoint under attacks")
    a.add_argument("--model", required=True)
    _add_data_args(a)
    _add_attack_args(a)
    a.add_argument("--out", default=None, help=f"CSV path (default: {REPORTS_NAME} next to the checkpoint)")
    a.add_argument("--run-id", default=None)

    e = sub.add_parser("eval", parents=[common], help="clean accuracy of a checkpoint")
    e.add_argument("--model", required=True)
    _add_data_args(e)
    e.add_argument("--out", default=None)
    e.add_argument("--run-id", default=None)

    d = sub.add_parser("diagnose", parents=[common], help="convolution weight diagnostics")
    d.add_argument("--model", required=True)
    d.add_argument("--tau", type=float, default=0.01)
    d.add_argument("--top-k", type=int, default=5)
    d.add_argument("--out", default=None, help="diagnostics CSV (default: stdout)")
    d.add_argument("--dump-dir", default=None, help="write one sorted-profile text file per layer")

    c = sub.add_parser("compare", parents=[common], help="protected-class accuracy against a baseline run")
    c.add_argument("--baseline", required=True, help="baseline run directory or record.json")
    c.add_argument("records", nargs="+", help="run directories or record.json files")
    c.add_argument("--out", default=None)
    return ap


# -- helpers -------------------------------------------------------------

def _data_dir(args) -> Path:
    d = args.data_dir or os.environ.get(DATA_ENV)
    if not d:
        raise UsageError(f"--data-dir not given and ${DATA_ENV} unset")
    p = Path(d)
    if not p.is_dir():
        raise UsageError(f"data directory {p} does not exist")
    return p


def _load_data(args) -> tuple[Dataset, Dataset]:
    path = _data_dir(args)
    try:
        train_set, test_set = (load_mnist if args.dataset == "mnist" else load_cifar10)(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    limit_train = getattr(args, "limit_train", 0) or 0
    if limit_train:
        train_set = train_set.subset(limit_train)
    if args.limit_test:
        test_set = test_set.subset(args.limit_test)
    return train_set, test_set


def _load_model(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint {p} does not exist")
    return load_checkpoint(p)


def _floats(text: str, name: str) -> list:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--{name}: expected comma-separated numbers, got {text!r}") from exc


def attack_specs(args) -> list:
    fams = FAMILIES if args.attack == "all" else [f.strip() for f in args.attack.split(",") if f.strip()]
    for f in fams:
        if f not in FAMILIES:
            raise UsageError(f"--attack: unknown family {f!r}; expected one of {', '.join(FAMILIES)} or 'all'")
    tokens = [t.strip() for t in str(args.epsilon).split(",") if t.strip()]
    eps_list = [None if t.lower() == "none" else _floats(t, "epsilon")[0] for t in tokens]
    if not eps_list:
        raise UsageError("--epsilon: no value given")
    specs = []
    for f in fams:
        for eps in eps_list:
            if eps is None and f != "cw":
                raise UsageError(f"--epsilon none is only valid for cw, not {f}")
            if eps is not None and eps < 0:
                raise UsageError(f"--epsilon must be >= 0, got {eps}")
            over = {}
            if args.steps is not None:
                over["steps"] = args.steps
            if args.step_size is not None:
                over["step_size"] = args.step_size
            if args.decay is not None:
                over["decay"] = args.decay
            if args.random_start is not None:
                over["random_start"] = args.random_start == "on"
            over["cw"] = CWParams(args.cw_confidence, args.cw_constant, args.cw_iterations, args.cw_lr)
            over["seed"] = args.attack_seed
            try:
                specs.append(AttackSpec.default(f, eps, **over))
            except ValueError as exc:
                raise UsageError(f"attack {f}: {exc}") from exc
    return specs


@dataclass
class RunRecord:
    run_id: str
    command: str
    config: dict
    config_text: str
    checkpoint: Optional[str]
    trace: Optional[str]
    reports: list
    tool_version: str
    started: str
    finished: str
    wall_seconds: float
    initial_conv_fuzziness: Optional[float] = None
    initial_conv1_fuzziness: Optional[float] = None
    source_config: Optional[str] = None

    def write(self, path: Path) -> None:
        atomic_write_text(path, json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunRecord":
        p = Path(path)
        if p.is_dir():
            p = p / RECORD_NAME
        if not p.is_file():
            raise UsageError(f"no run record at {p}")
        return cls(**json.loads(p.read_text()))


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime())


# -- commands ------------------------------------------------------------

def _train_config(args, argv_flags: set) -> tuple[dict, Optional[str]]:
    values = {k: getattr(args, k) for k in TRAIN_KEYS}
    source = None
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise UsageError(f"--config: {p} does not exist")
        source = p.read_text()
        for k, v in parse_config_text(source).items():
            if k not in TRAIN_KEYS:
                raise UsageError(f"config key {k!r} is not a train option")
            if k not in argv_flags:
                values[k] = v
    return values, source


def _coerce(values: dict) -> dict:
    types = dict(protect=int, cost=float, gamma=float, lam=float, epochs=int, batch_size=int, lr=float,
                 momentum=float, lr_halve_every=int, seed=int, train_epsilon=float, train_steps=int,
                 train_step_size=float, split_epoch=int, limit_train=int, limit_test=int, init_seed=int)
    out = {}
    for k, v in values.items():
        if v in (None, "", "None"):
            out[k] = None
            continue
        try:
            out[k] = types[k](v) if k in types else str(v)
        except ValueError as exc:
            raise UsageError(f"{k.replace('_', '-')}: cannot parse {v!r} as {types[k].__name__}") from exc
    return out


def cmd_train(args, argv_flags: set) -> int:
    raw, source = _train_config(args, argv_flags)
    cfg = _coerce(raw)
    args.data_dir, args.dataset, args.limit_train, args.limit_test = (
        cfg["data_dir"], cfg["dataset"], cfg["limit_train"] or 0, cfg["limit_test"] or 0)
    if cfg["regime"] not in REGIMES:
        raise UsageError(f"regime: unknown {cfg['regime']!r}")
    if cfg["dataset"] not in ("mnist", "cifar10"):
        raise UsageError(f"dataset: unknown {cfg['dataset']!r}")
    classes = 10
    if not 0 <= cfg["protect"] < classes:
        raise UsageError(f"protect: class {cfg['protect']} outside [0, {classes})")
    if cfg["cost"] < 1:
        raise UsageError(f"cost: must be >= 1, got {cfg['cost']}")
    if cfg["gamma"] < 0:
        raise UsageError(f"gamma: must be >= 0, got {cfg['gamma']}")
    try:
        filters = tuple(int(v) for v in cfg["filters"].split(","))
        assert len(filters) == 2
    except (ValueError, AssertionError):
        raise UsageError(f"filters: expected two integers like 5,16, got {cfg['filters']!r}") from None
    regime = cfg["regime"]
    cost = CostMatrix(classes, cfg["protect"], cfg["cost"])
    mode = {"std": "std", "csa": "csa_l2" if (cfg["lam"] or 0) > 0 else "csa", "cse": "cse", "cse_adv": "cse"}[regime]
    loss = LossConfig(mode, gamma=cfg["gamma"], lam=cfg["lam"] or 0.0, cost=None if mode == "std" else cost,
                      l2_scope=cfg["l2_scope"])
    train_attack = None
    if regime in ("csa", "cse_adv"):
        eps = cfg["train_epsilon"] if cfg["train_epsilon"] is not None else (0.3 if cfg["dataset"] == "mnist" else 8 / 255)
        if cfg["train_attack"] == "fgsm":
            train_attack = AttackSpec("fgsm", eps)
        else:
            train_attack = AttackSpec("pgd", eps, steps=cfg["train_steps"], step_size=cfg["train_step_size"],
                                      random_start=True, seed=cfg["seed"])
    schedule = cfg["schedule"] or ("clean_then_adv" if cfg["dataset"] == "mnist" else "alternate_per_step")
    try:
        plan = TrainPlan(regime, cfg["epochs"], cfg["batch_size"], cfg["seed"], loss, train_attack, schedule,
                         cfg["split_epoch"], cfg["optimizer"], cfg["lr"], cfg["momentum"], cfg["lr_halve_every"] or 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    train_set, test_set = _load_data(args)  # validates the data directory before any output exists

    if args.run_dir:
        run_dir = Path(args.run_dir)
    else:
        base = Path(args.out) / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg['seed']}"
        run_dir, k = base, 1
        while run_dir.exists():
            run_dir, k = Path(f"{base}-{k}"), k + 1
    run_id = run_dir.name
    started, t0 = _now(), time.perf_counter()
    channels, side = train_set.images.shape[1], train_set.images.shape[2]
    model = build_lenet(channels, side, filters, 2 if cfg["dataset"] == "mnist" else 0, (120, 84), classes,
                        seed=cfg["init_seed"] if cfg["init_seed"] is not None else cfg["seed"],
                        mean=train_set.mean, std=train_set.std)
    run_dir.mkdir(parents=True, exist_ok=True)
    model, trace = train(plan, model, train_set, test_set, checkpoint_path=run_dir / CHECKPOINT_NAME)
    rows = [
        metrics_row(run_id, "train", r.epoch, "", None, r.test_overall, r.test_per_class, r.ce, r.cost,
                    r.conv_fuzziness, classes)
        for r in trace.records
    ]
    write_csv(run_dir / TRACE_NAME, rows, classes)
    snapshot = {k: ("" if v is None else v) for k, v in cfg.items()}
    config_text = render_config(snapshot)
    atomic_write_text(run_dir / CONFIG_NAME, config_text)
    RunRecord(run_id, "train", snapshot, config_text, CHECKPOINT_NAME, TRACE_NAME, [], __version__, started, _now(),
              time.perf_counter() - t0, trace.initial_conv_fuzziness, trace.initial_conv1_fuzziness,
              source).write(run_dir / RECORD_NAME)
    print(run_dir)
    return 0


def _report_rows(run_id: str, reports: list, classes: int) -> list:
    return [metrics_row(run_id, "attack", None, r.attack.family, r.epsilon, r.overall, r.per_class,
                        num_classes=classes) for r in reports]


def _attach_report(ckpt: Path, csv_path: Path) -> None:
    rec_path = ckpt.parent / RECORD_NAME
    if not rec_path.is_file():
        return
    rec = RunRecord.read(rec_path)
    try:
        rel = os.path.relpath(csv_path, ckpt.parent)
    except ValueError:
        rel = str(csv_path)
    if rel not in rec.reports:
        rec.reports.append(rel)
        rec.write(rec_path)


def cmd_attack(args) -> int:
    specs = attack_specs(args)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    ckpt = Path(args.model)
    model = _load_model(ckpt)
    _, test_set = _load_data(args)
    run_id = args.run_id or ckpt.parent.name
    reports = []
    for spec in specs:
        rep = robust_accuracy(model, test_set, spec, args.batch_size, args.workers, model_id=run_id)
        log.info("%s eps=%s overall=%.4f", spec.family, spec.epsilon, rep.overall)
        reports.append(rep)
    out = Path(args.out) if args.out else ckpt.parent / REPORTS_NAME
    write_csv(out, _report_rows(run_id, reports, model.num_classes), model.num_classes, append=out.exists())
    _attach_report(ckpt, out)
    print(out)
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.model)
    model = _load_model(ckpt)
    _, test_set = _load_data(args)
    acc = evaluate_clean(model, test_set)
    run_id = args.run_id or ckpt.parent.name
    row = metrics_row(run_id, "eval", None, "", None, acc.overall, acc.per_class, num_classes=model.num_classes)
    if args.out:
        write_csv(Path(args.out), [row], model.num_classes)
        print(args.out)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(metrics_header(model.num_classes))
        w.writerow(row)
    return 0


def cmd_diagnose(args) -> int:
    if args.tau <= 0:
        raise UsageError("--tau must be positive")
    model = _load_model(args.model)
    diags = weight_diagnostics(model, args.tau, args.top_k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "tau", "count", "near_zero_fraction"] + [f"top{i + 1}" for i in range(args.top_k)] +
               ["fuzziness"])
    for d in diags:
        tops = [fmt(v) for v in d.top] + [""] * (args.top_k - len(d.top))
        w.writerow([d.layer, fmt(d.tau), len(d.profile), fmt(d.near_zero_fraction)] + tops + [fmt(d.fuzziness)])
    if args.out:
        atomic_write_text(Path(args.out), buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    if args.dump_dir:
        for d in diags:
            atomic_write_text(Path(args.dump_dir) / f"{d.layer.replace('.', '_')}_profile.txt", profile_dump(d))
    return 0


def _record_reports(path) -> tuple[RunRecord, Path, dict]:
    p = Path(path)
    base = p if p.is_dir() else p.parent
    rec = RunRecord.read(p)
    rows = {}
    for rel in rec.reports:
        for r in read_csv(base / rel):
            if r.get("phase") != "attack":
                continue
            eps = float(r["epsilon"]) if r["epsilon"] else None
            rows[(r["attack"], eps)] = r
    return rec, base, rows


def _report_from_row(row: dict, protected: Optional[int]) -> RobustnessReport:
    per = []
    i = 0
    while f"o{i}" in row:
        per.append(float(row[f"o{i}"]) if row[f"o{i}"] else np.nan)
        i += 1
    eps = float(row["epsilon"]) if row["epsilon"] else None
    spec = AttackSpec.default(row["attack"], eps)
    return RobustnessReport(row["run_id"], spec, eps, float(row["overall"]), np.array(per), np.zeros(len(per)),
                            np.zeros(len(per)), protected)


def cmd_compare(args) -> int:
    _, _, base_rows = _record_reports(args.baseline)
    pairs = []
    for path in args.records:
        rec, _, rows = _record_reports(path)
        p = int(rec.config.get("protect", 0))
        shared = sorted(set(rows) & set(base_rows), key=lambda k: (k[0], -1 if k[1] is None else k[1]))
        if not shared:
            raise UsageError(f"{path} shares no (attack, epsilon) reports with the baseline")
        for key in shared:
            pairs.append((_report_from_row(rows[key], p), _report_from_row(base_rows[key], None)))
    try:
        summary = protection_comparison(pairs)
    except UnpairedReportsError as exc:
        raise UsageError(str(exc)) from exc
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attack", "epsilon", "protected", "method", "baseline", "delta"])
    for r in summary.rows:
        w.writerow([r.attack, fmt(r.epsilon), r.protected_class, fmt(r.method), fmt(r.baseline), fmt(r.delta)])
    w.writerow(["wins", summary.wins, "ties", summary.ties, "losses", summary.losses])
    if args.out:
        atomic_write_text(Path(args.out), buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


def _explicit_flags(argv: list) -> set:
    flags = set()
    for tok in argv:
        if tok.startswith("--"):
            flags.add(tok[2:].split("=", 1)[0].replace("-", "_"))
    return flags


def main(argv: Optional[list] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train":
            return cmd_train(args, _explicit_flags(argv))
        if args.command == "attack":
            return cmd_attack(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "diagnose":
            return cmd_diagnose(args)
        return cmd_compare(args)
    except UsageError as exc:
        print(f"mmrb {args.command}: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DatasetFormatError, NonFiniteLossError, FloatingPointError, OSError) as exc:
        print(f"mmrb {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
