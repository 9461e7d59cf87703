"""Scenarios, stage runners and report assembly behind the command line."""
from __future__ import annotations

import csv
import itertools
import logging
import multiprocessing
import os
import platform
import time
from dataclasses import dataclass, field, fields
from fractions import Fraction

import numpy as np

from . import __version__
from .core import (ConstraintViolation, ModelParams, PipelineConfig, QiConstants, Report, desk_config,
                   desk_scale_factors, jsonable, load_yaml, paper_config, validate_config)

log = logging.getLogger("dlsol")

STAGE_ORDER = ("geometry", "step1", "step2", "step3", "verdict")


class ConfigError(ValueError):
    pass


class InvariantFailure(AssertionError):
    """A requested check failed; ``invariant`` names it."""

    def __init__(self, invariant: str, detail: str = ""):
        super().__init__(f"{invariant}: {detail}" if detail else invariant)
        self.invariant = invariant


# scenario ------------------------------------------------------------------------

DEFAULTS = {
    "space_src": "dl:3,2",
    "space_dst": None,       # same as the source when omitted
    "map": "identity",
    "L": 8,
    "seed": 7,
    "jobs": 1,
    "profile": "desk",       # desk | paper
    "pairs": 60,
    "record_time": False,
    "out": None,
    "csv_dir": None,
    "pipeline": {},          # PipelineConfig overrides, including a nested ledger mapping
    "qi": None,              # {kappa, c_add}: overrides the map's claimed constants
}


@dataclass
class Scenario:
    source: ModelParams
    target: ModelParams
    map_spec: object
    L: int
    cfg: PipelineConfig
    qi: QiConstants | None
    stages: tuple
    jobs: int = 1
    pairs: int = 60
    profile: str = "desk"
    record_time: bool = False
    out: str | None = None
    csv_dir: str | None = None
    extra: dict = field(default_factory=dict)

    def params(self) -> dict:
        # everything that determines the numbers; jobs and output paths are excluded
        return {"source": self.source.to_dict(), "target": self.target.to_dict(),
                "map": self.map_spec, "L": self.L, "seed": self.cfg.seed, "profile": self.profile,
                "stages": list(self.stages), "pairs": self.pairs,
                "qi": None if self.qi is None else {"kappa": self.qi.kappa, "c_add": self.qi.c_add}}


def merge_settings(config_path: str | None, flags: dict) -> dict:
    """Defaults, then the config file, then explicit flags."""
    out = dict(DEFAULTS)
    out["pipeline"] = {}
    if config_path:
        try:
            data = load_yaml(config_path)
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for k, v in data.items():
            out[k] = dict(v or {}) if k == "pipeline" else v
    pipe = out["pipeline"]
    for k, v in flags.items():
        if v is None:
            continue
        if k == "pipeline":
            led = dict(pipe.get("ledger") or {})
            led.update(v.pop("ledger", {}))
            pipe.update(v)
            if led:
                pipe["ledger"] = led
        else:
            out[k] = v
    return out


def build_config(settings: dict) -> PipelineConfig:
    profile = settings["profile"]
    seed = int(settings["seed"])
    if profile == "desk":
        base = desk_config(seed)
    elif profile == "paper":
        base = paper_config(seed=seed)
    else:
        raise ConfigError(f"unknown profile {profile!r}")
    over = dict(settings.get("pipeline") or {})
    d = base.to_dict()
    led = dict(d.pop("ledger"))
    new_led = over.pop("ledger", None) or {}
    unknown = set(new_led) - set(led)
    if unknown:
        raise ConfigError(f"unknown ledger keys {sorted(unknown)}")
    led.update(new_led)
    d.update(over)
    d["seed"] = seed
    d["ledger"] = led
    try:
        return PipelineConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def make_scenario(settings: dict, stages) -> Scenario:
    try:
        src = ModelParams.parse(str(settings["space_src"]))
        dst = ModelParams.parse(str(settings["space_dst"])) if settings.get("space_dst") else src
    except ConstraintViolation as exc:
        raise ConfigError(str(exc)) from None
    L = settings["L"]
    if int(L) != L or L < 1:
        raise ConfigError(f"L must be a positive integer, got {L!r}")
    cfg = build_config(settings)
    qi = settings.get("qi")
    if qi is not None:
        qi = QiConstants(float(qi.get("kappa", 1.0)), float(qi.get("c_add", 0.0)))
    for a, b in zip(stages, stages[1:]):
        if STAGE_ORDER.index(a) > STAGE_ORDER.index(b):
            raise ConfigError(f"stage {b} cannot run before {a}")
    return Scenario(src, dst, settings["map"], int(L), cfg, qi, tuple(stages), int(settings["jobs"]),
                    int(settings["pairs"]), settings["profile"], bool(settings["record_time"]),
                    settings.get("out"), settings.get("csv_dir"))


def parse_map_spec(spec) -> tuple[str, dict]:
    """``kind`` or ``kind:key=value,key=value`` or a mapping with a ``kind`` entry."""
    import yaml

    if isinstance(spec, dict):
        spec = dict(spec)
        return str(spec.pop("kind")), spec
    text = str(spec)
    if ":" not in text:
        return text, {}
    kind, rest = text.split(":", 1)
    params = {}
    for part in filter(None, rest.split(",")):
        if "=" not in part:
            raise ConfigError(f"map parameter {part!r} is not key=value")
        k, v = part.split("=", 1)
        params[k.strip()] = yaml.safe_load(v)
    return kind, params


def load_map(sc: Scenario):
    from .maps import BadParams, library_map, load_table

    spec = sc.map_spec
    if isinstance(spec, str) and os.path.isfile(spec):
        with open(spec) as fh:
            text = fh.read()
        try:
            return load_table(text, sc.source, sc.target)
        except (BadParams, ValueError) as exc:
            raise ConfigError(f"map table {spec}: {exc}") from None
    kind, params = parse_map_spec(spec)
    try:
        return library_map(kind, sc.source, sc.target, **params)
    except BadParams as exc:
        raise ConfigError(str(exc)) from None


# parallel plumbing -----------------------------------------------------------------

_TASKS: list = []


def _call(k: int):
    return _TASKS[k]()


def run_tasks(tasks: list, jobs: int) -> list:
    """Run zero-argument callables with at most ``jobs`` worker processes.

    Results come back in task order, so the output does not depend on jobs.
    Workers are forked, so tasks may close over unpicklable state.
    """
    global _TASKS
    if jobs <= 1 or len(tasks) <= 1 or "fork" not in multiprocessing.get_all_start_methods():
        return [t() for t in tasks]
    _TASKS = list(tasks)
    try:
        with multiprocessing.get_context("fork").Pool(min(jobs, len(tasks))) as pool:
            return pool.map(_call, range(len(tasks)))
    finally:
        _TASKS = []


# stages ---------------------------------------------------------------------------

def _require_dl(sc: Scenario, what: str) -> None:
    if not (sc.source.is_dl and sc.target.is_dl):
        raise ConfigError(f"{what} runs on DL spaces only; got {sc.source} -> {sc.target}")


def validated(sc: Scenario, qi: QiConstants | None = None):
    try:
        return validate_config(sc.source, sc.target, qi or QiConstants(), sc.cfg)
    except ConstraintViolation as exc:
        raise ConfigError(f"constraint {exc.name}: {exc.detail}") from None


def ladder_for(sc: Scenario, vc) -> tuple[int, ...]:
    if vc.ladder is None:
        raise ConfigError("scale ladder too long to materialize")
    lad = tuple(r for r in vc.ladder if sc.L % r == 0 and r <= sc.L)
    if not lad:
        raise ConfigError(f"no ladder scale divides L={sc.L} (ladder {list(vc.ladder)})")
    return lad


def source_box(sc: Scenario):
    from .dl_geometry import box_at, dl_origin

    return box_at(dl_origin(sc.source.m, sc.source.n), sc.L)


def space_info(sc: Scenario) -> dict:
    p = sc.source
    if p.is_dl:
        from .dl_geometry import ball_size

        box = source_box(sc)
        return {
            "space": str(p), "L": sc.L, "vertices": box.size, "geodesics": box.geodesic_count,
            "level_sizes": [box.level_size(t) for t in range(sc.L + 1)],
            "level_mu": [box.mu(box.level_ids(t)) for t in range(sc.L + 1)],
            "ball_sizes": {r: ball_size(p.m, p.n, r) for r in range(0, 5)},
            "top": str(box.top), "bottom": str(box.bottom),
        }
    from .sol_geometry import SolBox, SolPoint

    b = SolBox(SolPoint(0.0, 0.0, 0.0), float(sc.L), p.m, p.n)
    return {"space": str(p), "L": sc.L, "width_x": b.width_x, "width_y": b.width_y, "mu": b.mu(),
            "volume": b.volume()}


def distance_selftest(sc: Scenario, collar: int = 2) -> dict:
    if sc.source.is_dl:
        from .oracles import distance_oracle

        res = distance_oracle(source_box(sc), collar)
        res["ok"] = res["mismatches"] == 0
        return res
    from .oracles import sol_sandwich_check

    res = sol_sandwich_check(sc.source.m, sc.source.n, pairs=100, seed=sc.cfg.seed)
    res["ok"] = res["fraction"] >= 0.99
    return res


def tiling_check(sc: Scenario, sizes=None) -> dict:
    out = {}
    if sc.source.is_dl:
        from .dl_geometry import band_tile_count, tile_box
        from .oracles import band_components

        box = source_box(sc)
        sizes = sizes or [R for R in range(1, sc.L + 1) if sc.L % R == 0]
        for R in sizes:
            til = tile_box(box, R)
            owner = til.owner()
            owned = sum(len(til.owned_ids(k)) for k in range(len(til.tiles)))
            comps = [band_components(box, b * R, (b + 1) * R) for b in range(sc.L // R)]
            counts = [band_tile_count(box, R, b) for b in range(sc.L // R)]
            out[R] = {"tiles": len(til.tiles), "uncovered": int((owner < 0).sum()),
                      "owned_total": owned, "box_size": box.size, "remainder": int(len(til.remainder)),
                      "components_match": comps == counts,
                      "ok": bool((owner >= 0).all() and owned == box.size and comps == counts
                                 and len(til.remainder) == 0)}
        return {"exact": out, "ok": all(v["ok"] for v in out.values())}
    from .sol_geometry import SolBox, SolPoint, sol_tile_box

    b = SolBox(SolPoint(0.0, 0.0, 0.0), float(sc.L), sc.source.m, sc.source.n)
    sizes = sizes or [R for R in range(1, sc.L + 1) if sc.L % R == 0 and R < sc.L]
    for R in sizes:
        t = sol_tile_box(b, float(R))
        out[R] = {"tiles": t.tile_count, "upsilon_mu": t.upsilon_mu, "c_realized": t.c_realized,
                  "c_certified": t.c_certified, "exact": t.exact,
                  "ok": t.c_realized <= t.c_certified * (1 + 1e-9)}
    return {"sol": out, "ok": all(v["ok"] for v in out.values())}


def bipartite_check() -> dict:
    from .coarse_diff import classify_bipartite_orientation
    from .oracles import all_bipartite_orientations, bipartite_case_by_enumeration

    cases: dict = {}
    mismatches = []
    for edges in all_bipartite_orientations():
        got = classify_bipartite_orientation(edges)["case"]
        want = bipartite_case_by_enumeration(edges)
        cases[got] = cases.get(got, 0) + 1
        if got != want:
            mismatches.append({"edges": edges, "classified": got, "enumerated": want})
    return {"digraphs": 16, "cases": cases, "mismatches": mismatches, "ok": not mismatches}


def quadrilateral_check(m: int, n: int, L: int) -> dict:
    from .coarse_diff import quadrilateral_search
    from .dl_geometry import box_at, dl_origin

    res = quadrilateral_search(box_at(dl_origin(m, n), L))
    res["L"] = L
    res["ok"] = res["counts"]["mixed"] == 0 and res["c1"] == {"up": 0, "down": 0}
    return res


def trapping_family(m: int, n: int, ks=(1, 2, 3), max_u: int = 9) -> dict:
    """Exact minimal blocking sets for every nonempty single-level U of a size-2 box."""
    from .dl_geometry import box_at, dl_origin
    from .oracles import minimal_blocking_size

    box = box_at(dl_origin(m, n), 2)
    instances = 0
    failures = []
    worst = None
    for t in range(box.L + 1):
        level = [box.vertex(int(tt), int(a), int(b)) for tt, a, b in
                 zip(*(c[box.level_ids(t)] for c in box.coords))]
        for size in range(1, min(max_u, len(level)) + 1):
            for U in itertools.combinations(level, size):
                for k in ks:
                    ell = minimal_blocking_size(list(U), k)
                    instances += 1
                    ratio = Fraction(ell * n ** k, m ** k * size)
                    if worst is None or ratio < worst[0]:
                        worst = (ratio, t, size, k, ell)
                    if ell * n ** k < m ** k * size:
                        failures.append({"level": t, "U": [str(u) for u in U], "k": k, "ell": ell})
    return {"space": f"dl:{m},{n}", "instances": instances, "failures": failures[:10],
            "failure_count": len(failures),
            "worst_ratio": float(worst[0]) if worst else None,
            "worst_instance": {"level": worst[1], "size": worst[2], "k": worst[3], "ell": worst[4]} if worst else None,
            "ok": not failures}


def lemma_suite(sc: Scenario) -> dict:
    _require_dl(sc, "lemma-suite")
    m, n, L = sc.source.m, sc.source.n, sc.L
    names = ["distance_oracle", "tiling", "bipartite_table", "quadrilaterals", "trapping"]
    tasks = [
        lambda: distance_selftest(sc),
        lambda: tiling_check(sc),
        bipartite_check,
        lambda: quadrilateral_check(m, n, min(L, 4)),
        lambda: trapping_family(m, n),
    ]
    results = run_tasks(tasks, sc.jobs)
    return dict(zip(names, results))


@dataclass
class StageResults:
    phi: object = None
    box: object = None
    ladder: tuple = ()
    s1: object = None
    s2: object = None
    drift: object = None
    drift_error: str | None = None
    verdict: object = None


def _drift_or_none(box, phi, cfg):
    from .rigidity_checks import StageDataMissing, multiscale_drift

    try:
        return multiscale_drift(box, phi, cfg, seed=cfg.seed), None
    except StageDataMissing as exc:
        return None, str(exc)


def run_stages(sc: Scenario) -> StageResults:
    """Run the requested pipeline stages in dependency order."""
    from .coarse_diff import step_one
    from .rigidity_checks import StageDataMissing, global_height_verdict, step_two

    _require_dl(sc, "the pipeline")
    phi = load_map(sc)
    qi = sc.qi or phi.claimed
    vc = validated(sc, qi)
    ladder = ladder_for(sc, vc)
    box = source_box(sc)
    kappa = qi.kappa if qi is not None else 1.0
    res = StageResults(phi, box, ladder)
    want = set(sc.stages)

    def first():
        s1 = step_one(box, phi, sc.cfg, ladder, kappa, per_path=True)
        s2 = None
        if {"step2", "verdict"} & want and s1.report is not None:
            try:
                s2 = step_two(box, phi, sc.cfg, s1, ladder, qi)
            except StageDataMissing:
                s2 = None
        return s1, s2

    tasks = []
    if {"step1", "step2", "verdict"} & want:
        tasks.append(first)
    if {"step3", "verdict"} & want:
        tasks.append(lambda: _drift_or_none(box, phi, sc.cfg))
    out = run_tasks(tasks, sc.jobs)
    if {"step1", "step2", "verdict"} & want:
        res.s1, res.s2 = out.pop(0)
    if {"step3", "verdict"} & want:
        res.drift, res.drift_error = out.pop(0)
    if "verdict" in want:
        res.verdict = global_height_verdict(box, phi, sc.cfg, ladder, qi, pairs=sc.pairs, seed=sc.cfg.seed,
                                            s1=res.s1, s2=res.s2, drift=res.drift)
    return res


# report ---------------------------------------------------------------------------

def versions() -> dict:
    import numba
    import scipy

    return {"dlsol": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def build_report(sc: Scenario, res: StageResults | None, command: str, started: float,
                 extra: dict | None = None) -> Report:
    params = sc.params()
    params["command"] = command
    if res is not None and res.phi is not None:
        params["map_description"] = res.phi.describe()
    cfg = sc.cfg.to_dict()
    cfg["desk_overrides"] = desk_scale_factors() if sc.profile == "desk" else {}
    prov = {"seed": sc.cfg.seed, "versions": versions(),
            "wall_clock_s": round(time.perf_counter() - started, 3) if sc.record_time else None}
    if extra:
        prov.update(extra)
    rep = Report(params, cfg, provenance=prov)
    if res is None:
        return rep
    if res.s1 is not None:
        rep.scale_stats = res.s1.stats
        rep.good_boxes = {"ok": res.s1.ok, "failures": res.s1.failures, "c_fit": res.s1.c_fit,
                          "report": res.s1.report}
    if res.s2 is not None:
        rep.orientation = res.s2
    if res.drift is not None:
        rep.drift = res.drift
    elif res.drift_error is not None:
        rep.drift = {"ok": False, "reason": res.drift_error}
    if res.verdict is not None:
        rep.verdict = {"result": "yes" if res.verdict.height_respecting else "no", **res.verdict.to_dict()}
    return rep


def failures_of(sc: Scenario, res: StageResults) -> list[str]:
    """Invariants named for each failing requested stage, in stage order."""
    out = []
    if "step1" in sc.stages and res.s1 is not None and not res.s1.ok:
        out.append("step1: " + "; ".join(res.s1.failures))
    if "step2" in sc.stages:
        if res.s2 is None:
            out.append("step2: no good tiles to orient")
        elif not res.s2.ok:
            fired = [r.violation["stage"] for r in res.s2.refutations if r.fired]
            out.append("step2: " + (f"no-flips refutation at {fired[0]}" if fired else "orientation inconsistent"))
    if "step3" in sc.stages:
        if res.drift is None:
            out.append(f"step3: {res.drift_error}")
        elif not res.drift.ok:
            out.append("step3: " + res.drift.failures[0])
    if "verdict" in sc.stages and res.verdict is not None and not res.verdict.height_respecting:
        first = res.verdict.diagnostics[0] if res.verdict.diagnostics else "no diagnostics"
        out.append(f"verdict: not height-respecting ({first})")
    return out


def write_csvs(csv_dir: str, res: StageResults, path_limit: int = 2000) -> list[str]:
    os.makedirs(csv_dir, exist_ok=True)
    written = []

    def dump(name, rows):
        path = os.path.join(csv_dir, name)
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        written.append(path)

    if res.s1 is not None:
        rows = [["path_id", "s", "r_s", "delta_s"]]
        rows += [list(r) for r in res.s1.stats.csv_rows(path_limit)]
        dump("scale_stats.csv", rows)
        if res.s1.report is not None:
            rep = res.s1.report
            good = set(rep.good)
            rows = [["tile", "band", "i1", "i2", "average", "good", "orientation", "c_fit"]]
            for k, t in enumerate(rep.tiles):
                vote = rep.votes.get(k)
                fit = rep.fits.get(k)
                rows.append([k, t.band, t.i1, t.i2, t.average, int(k in good),
                             vote.dominant if vote else "", fit.c_fit if fit else ""])
            dump("good_boxes.csv", rows)
    if res.s2 is not None:
        for j, ref in enumerate(res.s2.refutations):
            if ref.fired:
                path = os.path.join(csv_dir, f"witness_{j}.txt")
                with open(path, "w") as fh:
                    fh.write("\n".join(str(v) for v in ref.witness) + "\n")
                written.append(path)
    if res.drift is not None:
        dump("drift.csv", list(res.drift.csv_rows()))
    if res.box is not None:
        path = os.path.join(csv_dir, "box_edges.txt")
        with open(path, "w") as fh:
            fh.write(res.box.dump_edges())
        written.append(path)
    return written


def write_json(path: str, doc) -> None:
    import json

    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(doc if isinstance(doc, str) else json.dumps(jsonable(doc), sort_keys=True, indent=2) + "\n")


PIPELINE_FLAGS = tuple(f.name for f in fields(PipelineConfig) if f.name not in ("seed", "ledger"))
