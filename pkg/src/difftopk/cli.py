"""Command-line entry points; every command writes JSON lines to stdout.

Exit codes: 0 ok, 1 contract or validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from pathlib import Path

from .bench import EquivalenceError, bench_eq3, scaling_exponents
from .diffrank import OPERATORS, OperatorConfig, SinkhornConfig
from .gradsuite import MODES, run_suite
from .harness import (TrainConfig, TrainingError, evaluate, generate_synthetic, read_csv, train,
                      write_csv)
from .loss import PerClassRankDistributions, RankDistribution
from .selnet import (KINDS, build_network, depth_table, reference_depth, spot_check_selection,
                     verify_selection)

log = logging.getLogger("difftopk")

KIND_ALIASES = {"splitter": "splitter-selection", "classic": "classic-selection",
                "bitonic": "bitonic-sort", "odd-even": "odd-even-sort"}
SORTERS = ("bitonic-sort", "odd-even-sort")
EXHAUSTIVE_MAX_N = 20


class UsageError(Exception):
    pass


def emit(record: dict, stream=None) -> None:
    (stream or sys.stdout).write(json.dumps(record) + "\n")


# -- gen-net -------------------------------------------------------------------------------

def cmd_gen_net(args) -> int:
    kind = KIND_ALIASES.get(args.kind, args.kind)
    if kind not in SORTERS and args.k is None:
        raise UsageError(f"--k is required for {kind}")
    k = None if kind in SORTERS else args.k
    net = build_network(args.n, k, kind)
    if args.out:
        Path(args.out).write_text(net.to_json() + "\n")
    status, ok = "unverified", True
    if args.verify:
        outputs = args.n if k is None else k
        if args.n <= EXHAUSTIVE_MAX_N:
            ok = verify_selection(net, args.n, outputs)
            status = "verified (exhaustive)" if ok else "FAILED (exhaustive)"
        else:
            ok = spot_check_selection(net, outputs, args.trials, seed=args.seed)
            status = f"verified (sampled, {args.trials} trials)" if ok else "FAILED (sampled)"
    emit({"n": args.n, "k": k, "kind": kind, "depth": net.depth, "size": net.size,
          "verification": status, "out": args.out})
    return 0 if ok else 1


# -- depth-table ---------------------------------------------------------------------------

def cmd_depth_table(args) -> int:
    mismatches = []
    rows = depth_table(args.n, range(1, args.k_max + 1))
    for row in rows:
        ref = reference_depth(row["n"], row["k"], row["construction"])
        emit({**row, "reference": ref})
        if args.check and ref is not None and ref != row["depth"]:
            mismatches.append(row | {"reference": ref})
    if args.check:
        for m in mismatches:
            print(f"mismatch: n={m['n']} k={m['k']} {m['construction']}: "
                  f"got {m['depth']}, expected {m['reference']}", file=sys.stderr)
        emit({"cells": len(rows), "mismatches": len(mismatches)})
    return 1 if mismatches else 0


# -- bench-eq3 -----------------------------------------------------------------------------

def cmd_bench(args) -> int:
    results = bench_eq3(args.n, args.k, args.tau, args.repeats, args.seed)
    for r in results:
        emit(r.to_dict(timing=not args.omit_timing))
    if not args.omit_timing:
        fit = scaling_exponents(results)
        emit({"fit": fit, "exponent_gap": fit.get("full-matrix", 0.0) - fit.get("topk-rows", 0.0)})
    return 0


# -- gradcheck -----------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    ops = OPERATORS if args.operator == "all" else (args.operator,)
    modes = MODES if args.mode == "all" else (args.mode,)
    cfg = OperatorConfig("sinkhorn", temperature=args.temperature,
                         sinkhorn=SinkhornConfig(epsilon=args.epsilon))
    results = run_suite(ops, modes, n_max=args.n, k=min(args.k, args.n), trials=args.trials,
                        seed=args.seed, step=args.step, cfg=cfg)
    for r in results:
        emit(r.to_dict())
    worst = max(results, key=lambda r: r.max_rel_err)
    passed = worst.max_rel_err < args.tol
    emit({"worst": worst.to_dict(), "tol": args.tol, "pass": passed})
    return 0 if passed else 1


# -- gen-data ------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    ds = generate_synthetic(args.n_classes, args.dims, args.per_class, args.sigma,
                            args.confusable_pairs, args.seed, args.spread)
    write_csv(ds, args.out)
    digest = hashlib.sha256(Path(args.out).read_bytes()).hexdigest()
    emit({"out": args.out, "rows": len(ds.labels), "dims": ds.dims, "n_classes": ds.n_classes,
          "sha256": digest})
    return 0


# -- train ---------------------------------------------------------------------------------

CONFIG_KEYS = {
    "data": {"source", "path", "n_classes", "dims", "per_class", "sigma", "confusable_pairs",
             "spread", "seed"},
    "loss": {"mode", "pk", "m"},
    "operator": {"name", "temperature", "epsilon", "tol", "max_iters", "scaling_iters", "network"},
    "train": {"lr", "batch_size", "max_epochs", "patience", "hidden", "seed"},
}


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def load_config(path: str, overrides=()):
    """Parse the key-value config; returns (dataset, TrainConfig).

    Malformed files raise UsageError; values that break a contract raise
    ValueError naming the offending field.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, value)
    for section in cp.sections():
        if section == "pk_per_class":
            continue
        if section not in CONFIG_KEYS:
            raise UsageError(f"unknown config section [{section}]")
        unknown = set(cp[section]) - CONFIG_KEYS[section]
        if unknown:
            raise UsageError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")

    def get(section, key, conv, default):
        if not cp.has_option(section, key) or cp.get(section, key).strip() == "":
            return default
        raw = cp.get(section, key)
        try:
            return conv(raw)
        except ValueError as exc:
            raise UsageError(f"{section}.{key}: cannot parse {raw!r}") from exc

    source = get("data", "source", str, "synthetic")
    data_seed = get("data", "seed", int, 0)
    if source == "synthetic":
        ds = generate_synthetic(get("data", "n_classes", int, 20), get("data", "dims", int, 10),
                                get("data", "per_class", int, 150), get("data", "sigma", float, 1.0),
                                get("data", "confusable_pairs", int, 10), data_seed,
                                get("data", "spread", float, 2.0))
    elif source == "csv":
        ds = read_csv(get("data", "path", str, None), get("data", "n_classes", int, None), data_seed)
    else:
        raise UsageError(f"data.source must be synthetic or csv, got {source!r}")

    pk = RankDistribution.parse(get("loss", "pk", _floats, [1.0]), name="loss.pk")
    if cp.has_section("pk_per_class"):
        per_class = {}
        for cls, text in cp["pk_per_class"].items():
            try:
                c = int(cls)
                values = _floats(text)
            except ValueError as exc:
                raise UsageError(f"pk_per_class.{cls}: cannot parse {text!r}") from exc
            per_class[c] = RankDistribution.parse(values, name=f"pk_per_class.{cls}")
        pk = PerClassRankDistributions(pk, per_class)
    sink = SinkhornConfig(get("operator", "epsilon", float, 1e-2), get("operator", "tol", float, 1e-6),
                          get("operator", "max_iters", int, 500),
                          get("operator", "scaling_iters", int, 10))
    op = OperatorConfig(get("operator", "name", str, "sinkhorn"),
                        get("operator", "temperature", float, 1.0), sink,
                        KIND_ALIASES.get(get("operator", "network", str, "splitter-selection"),
                                         get("operator", "network", str, "splitter-selection")))
    cfg = TrainConfig(pk=pk, operator=op, loss_mode=get("loss", "mode", str, "sm+topk"),
                      m=get("loss", "m", int, None), lr=get("train", "lr", float, 1e-3),
                      batch_size=get("train", "batch_size", int, 100),
                      max_epochs=get("train", "max_epochs", int, 100),
                      patience=get("train", "patience", int, 10),
                      hidden=get("train", "hidden", int, 0), seed=get("train", "seed", int, 0))
    return ds, cfg


def cmd_train(args) -> int:
    ds, cfg = load_config(args.config, args.set)
    metrics = args.metrics
    model, records = train(ds, cfg, metrics_path=metrics)
    if not metrics:
        for rec in records:
            sys.stdout.write(rec.to_json() + "\n")
    ks = [k for k in cfg.eval_ks if k <= ds.n_classes]
    acc = evaluate(model, ds, ks)
    emit({"summary": {"epochs": len(records), "operator": cfg.operator.operator,
                      "loss_mode": cfg.loss_mode,
                      "test": {str(k): v for k, v in acc["test"].items()},
                      "val": {str(k): v for k, v in acc["val"].items()}}})
    return 0


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="difftopk", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-net", help="build and serialise a comparator network")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--k", type=int)
    g.add_argument("--kind", required=True, choices=sorted(KIND_ALIASES) + list(KINDS))
    g.add_argument("--out")
    g.add_argument("--verify", action="store_true")
    g.add_argument("--trials", type=int, default=1000, help="spot checks when n > 20")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_net)

    d = sub.add_parser("depth-table", help="network depths for the reference table")
    d.add_argument("--check", action="store_true", help="exit 1 on any mismatch")
    d.add_argument("--n", type=int, nargs="+", default=[16, 1024, 10450, 65536])
    d.add_argument("--k-max", type=int, default=8)
    d.set_defaults(func=cmd_depth_table)

    b = sub.add_parser("bench-eq3", help="k x n versus n x n rank-matrix products")
    b.add_argument("--n", type=int, nargs="+", default=[16, 64, 256, 1024])
    b.add_argument("--k", type=int, default=5)
    b.add_argument("--tau", type=float, default=1.0)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--omit-timing", action="store_true",
                   help="drop wall-clock fields so output is reproducible")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train", help="train from a key-value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--metrics", help="JSON-lines metrics file (default: stdout)")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--operator", default="all", choices=("all",) + OPERATORS)
    c.add_argument("--mode", default="all", choices=("all",) + MODES)
    c.add_argument("--n", type=int, default=16, help="largest n")
    c.add_argument("--k", type=int, default=5)
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--step", type=float, default=1e-6)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--temperature", type=float, default=1.0)
    c.add_argument("--epsilon", type=float, default=0.05)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("gen-data", help="write a synthetic confusable-pairs CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--n-classes", type=int, default=20)
    s.add_argument("--dims", type=int, default=10)
    s.add_argument("--per-class", type=int, default=150)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--confusable-pairs", type=int, default=10)
    s.add_argument("--spread", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TrainingError, EquivalenceError) as exc:
        print(f"{parser.prog} {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
