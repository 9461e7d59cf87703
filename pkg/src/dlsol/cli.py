"""Command-line batch runner.

Exit codes: 0 when every requested check passed, 1 when one failed (the
failing invariant is printed on stderr), 2 for configuration errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from .core import ConstraintViolation, PreconditionViolation, jsonable
from . import pipeline as pl

log = logging.getLogger("dlsol")

STAGES = {
    "step1": ("step1",),
    "step2": ("step1", "step2"),
    "step3": ("step3",),
    "verdict": ("verdict",),
    "analyze": ("step1", "step2", "step3", "verdict"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: config error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _ledger_item(text: str) -> tuple[str, float]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    try:
        return k.strip(), float(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"ledger value for {k!r} must be a number") from None


def _common(p: argparse.ArgumentParser, space_flag: bool = False) -> None:
    if space_flag:
        p.add_argument("--space", dest="space_src", help="space, e.g. dl:3,2 or sol:1.5,1")
    p.add_argument("--L", type=int, help="box size")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="worker processes (output does not depend on it)")
    p.add_argument("--out", help="write the JSON document here")
    p.add_argument("--csv-dir", help="directory for CSV and text dumps")
    p.add_argument("--config", help="YAML config file; flags override it")
    p.add_argument("--profile", choices=("desk", "paper"))
    p.add_argument("--record-time", action="store_true", default=None,
                   help="store wall-clock seconds in provenance (breaks byte-identical reports)")
    g = p.add_argument_group("pipeline constants")
    for name in pl.PIPELINE_FLAGS:
        g.add_argument(f"--{name}", type=float, dest=f"cfg_{name}")
    g.add_argument("--ledger", action="append", type=_ledger_item, default=[], metavar="KEY=VALUE",
                   help="override one ledger constant (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def _pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--space-src", help="source space, e.g. dl:3,2")
    p.add_argument("--space-dst", help="target space (default: the source)")
    p.add_argument("--map", help="library map (kind or kind:key=val,...) or a vertex table file")
    p.add_argument("--pairs", type=int, help="same-height pairs for the final pairwise check")
    p.add_argument("--kappa", type=float, help="claimed multiplicative constant")
    p.add_argument("--c-add", type=float, help="claimed additive constant")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dlsol", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in (("space-info", "level sizes and measures of a box"),
                           ("distance-selftest", "closed-form distance against an independent oracle"),
                           ("tile", "tilings of the box at every divisor scale"),
                           ("scales", "scale ladder and per-scale failure fractions"),
                           ("lemma-suite", "exhaustive combinatorial checks")):
        sp = sub.add_parser(name, help=helptext)
        _common(sp, space_flag=True)
        if name == "scales":
            _pipeline_args(sp)
    for name in STAGES:
        sp = sub.add_parser(name, help=f"run {' + '.join(STAGES[name])}")
        _common(sp)
        _pipeline_args(sp)
    return p


def _flags(args) -> dict:
    d = vars(args)
    out = {k: d.get(k) for k in ("space_src", "space_dst", "map", "L", "seed", "jobs", "out", "csv_dir",
                                 "profile", "pairs", "record_time")}
    pipe = {name: d[f"cfg_{name}"] for name in pl.PIPELINE_FLAGS if d.get(f"cfg_{name}") is not None}
    for name in ("N", "S", "r0"):
        if name in pipe:
            if pipe[name] != int(pipe[name]):
                raise pl.ConfigError(f"{name} must be an integer")
            pipe[name] = int(pipe[name])
    if d.get("ledger"):
        pipe["ledger"] = dict(d["ledger"])
    out["pipeline"] = pipe or None
    if d.get("kappa") is not None or d.get("c_add") is not None:
        out["qi"] = {"kappa": d.get("kappa") or 1.0, "c_add": d.get("c_add") or 0.0}
    return out


def _emit(sc: pl.Scenario, text: str) -> None:
    if sc.out:
        pl.write_json(sc.out, text)
    else:
        sys.stdout.write(text)


def _fail(names: list[str]) -> int:
    for f in names:
        print(f"FAIL {f}", file=sys.stderr)
    return 1


def _simple(command: str, sc: pl.Scenario, started: float) -> int:
    if command == "space-info":
        body, bad = pl.space_info(sc), []
    elif command == "distance-selftest":
        body = pl.distance_selftest(sc)
        bad = [] if body["ok"] else ["distance oracle: closed form disagrees with the oracle"]
    elif command == "tile":
        body = pl.tiling_check(sc)
        bad = [f"tiling at R={R}" for R, v in sorted((body.get("exact") or body.get("sol")).items())
               if not v["ok"]]
    elif command == "lemma-suite":
        body = pl.lemma_suite(sc)
        bad = [f"lemma-suite: {k}" for k, v in body.items() if not v["ok"]]
    else:  # scales
        body, bad = _scales(sc)
    doc = {"command": command, "params": sc.params(), "result": body,
           "provenance": {"seed": sc.cfg.seed, "versions": pl.versions(),
                          "wall_clock_s": round(time.perf_counter() - started, 3) if sc.record_time else None}}
    if sc.csv_dir and command == "space-info" and sc.source.is_dl:
        import os

        os.makedirs(sc.csv_dir, exist_ok=True)
        with open(os.path.join(sc.csv_dir, "box_edges.txt"), "w") as fh:
            fh.write(pl.source_box(sc).dump_edges())
    _emit(sc, json.dumps(jsonable(doc), sort_keys=True, indent=2) + "\n")
    return _fail(bad) if bad else 0


def _scales(sc: pl.Scenario):
    from .coarse_diff import scale_scan

    pl._require_dl(sc, "scales")
    phi = pl.load_map(sc)
    qi = sc.qi or phi.claimed
    vc = pl.validated(sc, qi)
    ladder = pl.ladder_for(sc, vc)
    stats = scale_scan(pl.source_box(sc), phi, ladder, sc.cfg, qi.kappa if qi else 1.0, per_path=True)
    body = {"validated": vc.to_dict(), "ladder": list(ladder), "scale_stats": stats.to_dict()}
    if sc.csv_dir:
        pl.write_csvs(sc.csv_dir, pl.StageResults(s1=_StatsOnly(stats)))
    bad = [f"scales: sum of delta_s exceeds {stats.sum_bound:g} on {stats.violations} paths"] if stats.violations else []
    return body, bad


class _StatsOnly:
    # minimal stand-in so write_csvs dumps the per-path table only
    def __init__(self, stats):
        self.stats = stats
        self.report = None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        settings = pl.merge_settings(args.config, _flags(args))
        stages = STAGES.get(args.command, ("geometry",))
        sc = pl.make_scenario(settings, stages)
        if args.command not in STAGES:
            return _simple(args.command, sc, started)
        res = pl.run_stages(sc)
        rep = pl.build_report(sc, res, args.command, started)
        _emit(sc, rep.to_json())
        if sc.csv_dir:
            pl.write_csvs(sc.csv_dir, res)
        verdict = rep.verdict["result"] if rep.verdict else None
        log.info("%s done in %.2fs%s", args.command, time.perf_counter() - started,
                 f", verdict {verdict}" if verdict else "")
        bad = pl.failures_of(sc, res)
        return _fail(bad) if bad else 0
    except (pl.ConfigError, ConstraintViolation) as exc:
        print(f"dlsol: config error: {exc}", file=sys.stderr)
        return 2
    except (AssertionError, PreconditionViolation) as exc:
        name = getattr(exc, "invariant", type(exc).__name__)
        print(f"FAIL {name}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
