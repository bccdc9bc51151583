"""Batch driver: ``gradcone <subcommand> --config scenario.json --out DIR``.

Every subcommand collects its reports and CSV tables in memory and writes
them once at the end.  Exit codes: 0 when every executed check passes, 2 when
a check fails, 1 for configuration or runtime errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .branching import (Atoms, BranchingMechanism, StableTail, phi_eval, simulate_coupled_branching,
                        stable_tail_constant, stable_tail_integral_quad, write_snapshot_csv)
from .errors import ConfigError, GradconeError
from .geometry import ObtuseTriangleSpec, PolygonalDomain, build_obtuse_triangle, theorem_cones
from .pde import (InitialData, SolverConfig, Trajectory, assemble_operator, check_initial_data,
                  gradient_angles, initial_data, refine_mesh, solve_semilinear, write_field_csv,
                  write_mesh_csv)
from .reflected import (PURPOSE_BRANCH, PURPOSE_COUPLE, RngStream, coupling_monitors, map_replicates,
                        simulate_coupled_pair, write_trace_csv)
from .verify import (SCHEMA_VERSION, clip_line, check_cone, check_duality, check_monotone_along_lines,
                     check_pathwise_domination, feller_check, to_jsonable, verify_phi_hypothesis)

log = logging.getLogger("gradcone")

SUBCOMMANDS = ("solve", "couple", "branch", "duality", "cone", "calibrate", "all")

_DEFAULTS: dict[str, dict[str, Any]] = {
    "domain": {"a": -math.pi / 6, "b": math.pi / 6, "base_length": 1.0},
    "mechanism": {"a1": 0.0, "b1": 1.0, "nu": None},
    "initial_data": {"kind": "x1"},
    "theorem": {"c": -math.pi / 4, "d": math.pi / 4},
    "solver": {"level": 5, "dt": 1e-4, "t_end": 0.5, "scheme": "imex", "n_outputs": 10,
               "output_schedule": "uniform", "picard_tol": 1e-10, "picard_max_iter": 100},
    "simulation": {"N": 500, "M": 100, "dt": 1e-4, "t_end": 0.25},
    "coupling": {"x": [0.3, 0.1], "y": [0.5, 0.1], "scheme": "project", "M": None, "dt": None,
                 "t_end": None, "series_points": 500},
    "branching": {"x": [0.3, 0.1], "y": [0.5, 0.1], "n_outputs": 10, "offspring": "exact",
                  "N": None, "M": None, "dt": None, "t_end": None},
    "duality": {"x": [0.4, 0.1], "rel_tol": 0.05, "N": None, "M": None, "dt": None, "t_end": None},
    "calibration": {"betas": [0.25, 0.5, 0.75], "lams": [0.5, 1.0, 2.0], "tol": 1e-6,
                    "N": 1000, "M": 400, "dt": 1e-3, "t": 0.5, "lam": 1.0},
    "cone": {"slack": None, "min_grad": None, "n_lines": 8, "n_samples": 64, "n_offsets": 9,
             "histogram_bins": 180, "transect_slices": [0.25, 0.5, 0.75], "transect_points": 101},
}


@dataclass(frozen=True)
class Scenario:
    """Validated scenario; ``settings`` holds every section with defaults filled in."""

    settings: dict
    seed: int
    output_dir: str | None
    triangle: ObtuseTriangleSpec
    mechanism: BranchingMechanism
    phi: InitialData

    @property
    def domain(self) -> PolygonalDomain:
        return build_obtuse_triangle(self.triangle)

    def section(self, name: str) -> dict:
        """Section values, falling back to ``simulation`` for unset run sizes."""
        out = dict(self.settings[name])
        for key in ("N", "M", "dt", "t_end"):
            if key in out and out[key] is None:
                out[key] = self.settings["simulation"][key]
        return out

    def cones(self):
        th = self.settings["theorem"]
        return theorem_cones(self.triangle.a, self.triangle.b, th["c"], th["d"])


def _merge(name: str, raw: Any) -> dict:
    base = dict(_DEFAULTS[name])
    if raw is None:
        return base
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    if name == "initial_data":
        return dict(raw)
    unknown = set(raw) - set(base)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    base.update(raw)
    return base


def _mechanism(spec: dict) -> BranchingMechanism:
    nu = spec.get("nu")
    if nu is not None:
        kind = nu.get("kind")
        if kind == "stable":
            beta = float(nu["beta"])
            c1 = nu.get("c1")
            nu = StableTail(stable_tail_constant(beta) if c1 is None else float(c1), beta)
        elif kind == "atoms":
            nu = Atoms(tuple(tuple(a) for a in nu["atoms"]))
        else:
            raise ConfigError(f"unknown nu kind {kind!r}; use 'stable' or 'atoms'")
    return BranchingMechanism(float(spec["a1"]), float(spec["b1"]), nu)


def load_scenario(source: str | Path | dict, out: str | None = None) -> Scenario:
    """Parse and validate a scenario from a JSON file path or an already-loaded dict."""
    if isinstance(source, dict):
        raw = source
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {source} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    allowed = set(_DEFAULTS) | {"seed", "output_dir"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    seed = raw.get("seed")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("'seed' is mandatory and must be a nonnegative integer")
    settings = {name: _merge(name, raw.get(name)) for name in _DEFAULTS}
    try:
        tri = ObtuseTriangleSpec(float(settings["domain"]["a"]), float(settings["domain"]["b"]),
                                 float(settings["domain"]["base_length"]))
        mech = _mechanism(settings["mechanism"])
        init = dict(settings["initial_data"])
        kind = init.pop("kind", None)
        if kind is None:
            raise ConfigError("initial_data needs a 'kind'")
        phi = initial_data(kind, **init)
        settings["initial_data"] = phi.describe()
        SolverConfig(**{k: v for k, v in settings["solver"].items() if k != "level"})
        if int(settings["solver"]["level"]) < 1:
            raise ConfigError("solver.level must be at least 1")
        check_initial_data(phi, build_obtuse_triangle(tri))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid scenario: {exc!r}") from exc
    except ValueError as exc:
        if isinstance(exc, GradconeError):
            raise
        raise ConfigError(f"invalid scenario: {exc}") from exc
    return Scenario(settings, seed, out or raw.get("output_dir"), tri, mech, phi)


class Artifacts:
    """Pending outputs, written in insertion order by :meth:`flush`."""

    def __init__(self):
        self._items: list[tuple[str, Callable[[Path], None]]] = []

    def add(self, name: str, writer: Callable[[Path], None]) -> None:
        self._items.append((name, writer))

    def json(self, name: str, doc: dict) -> None:
        text = json.dumps(to_jsonable({"schema_version": SCHEMA_VERSION, **doc}), indent=2, sort_keys=True)
        self.add(name, lambda p: p.write_text(text + "\n"))

    def rows(self, name: str, header, rows) -> None:
        def write(p: Path):
            with open(p, "w", newline="") as fh:
                out = csv.writer(fh)
                out.writerow(header)
                out.writerows(rows)
        self.add(name, write)

    def flush(self, out_dir: Path) -> list[str]:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, writer in self._items:
            writer(out_dir / name)
        return [name for name, _ in self._items]


def _g(x: float) -> str:
    return f"{x:.17g}"


def _solver_config(sc: Scenario, t_end: float | None = None) -> tuple[int, SolverConfig]:
    s = dict(sc.settings["solver"])
    level = int(s.pop("level"))
    if t_end is not None:
        s["t_end"] = t_end
    return level, SolverConfig(**s)


def _solve(sc: Scenario, t_end: float | None = None) -> Trajectory:
    level, cfg = _solver_config(sc, t_end)
    mesh = refine_mesh(sc.domain, level)
    log.info("solving on level %d (%d nodes), dt=%g, t_end=%g", level, mesh.n_nodes, cfg.dt, cfg.t_end)
    return solve_semilinear(mesh, sc.phi, sc.mechanism, cfg, assemble_operator(mesh))


def _transect_rows(sc: Scenario, traj: Trajectory):
    opts = sc.settings["cone"]
    field = traj.final
    domain = field.mesh.domain
    top = float(domain.vertices[:, 1].max())
    for frac in opts["transect_slices"]:
        x2 = float(frac) * top
        span = clip_line(domain, np.array([0.0, x2]), np.array([1.0, 0.0]))
        if span is None:
            continue
        x1 = np.linspace(span[0], span[1], int(opts["transect_points"]))
        u = field.interpolate(np.column_stack([x1, np.full_like(x1, x2)]))
        for a, b in zip(x1, u):
            yield [_g(field.time), _g(x2), _g(a), _g(b)]


def _emit_solution(sc: Scenario, traj: Trajectory, art: Artifacts) -> dict:
    mesh = traj.mesh
    art.add("mesh_nodes.csv", lambda p: write_mesh_csv(mesh, p, p.with_name("mesh_elements.csv")))
    for i, f in enumerate(traj.fields):
        art.add(f"field_{i:03d}.csv", lambda p, f=f: write_field_csv(f, p))
    art.rows("transect.csv", ("t", "x2", "x1", "u"), list(_transect_rows(sc, traj)))
    mass = assemble_operator(mesh).mass
    return {
        "mesh": {"level": mesh.level, "n_nodes": mesh.n_nodes, "n_elements": mesh.n_elements, "h": mesh.h},
        "times": traj.times,
        "min_u": traj.values.min(axis=1),
        "max_u": traj.values.max(axis=1),
        "integral_u": traj.values @ mass,
    }


def run_solve(sc: Scenario, art: Artifacts, threads: int) -> bool:
    traj = _solve(sc)
    summary = _emit_solution(sc, traj, art)
    art.json("report_solve.json", {"scenario": sc.settings, "seed": sc.seed, "solution": summary})
    return True


def run_cone(sc: Scenario, art: Artifacts, threads: int, traj: Trajectory | None = None) -> bool:
    grad_cone, line_cone = sc.cones()
    th = sc.settings["theorem"]
    verify_phi_hypothesis(sc.phi, sc.domain, th["c"], th["d"])
    opts = sc.settings["cone"]
    if traj is None:
        traj = _solve(sc)
        summary = _emit_solution(sc, traj, art)
    else:
        summary = None
    rep = check_cone(traj, grad_cone, opts["min_grad"], opts["slack"])
    mono = check_monotone_along_lines(traj.final, line_cone, int(opts["n_lines"]), int(opts["n_samples"]),
                                      int(opts["n_offsets"]))
    edges = np.linspace(-math.pi, math.pi, int(opts["histogram_bins"]) + 1)
    hist = []
    for f in traj.fields:
        ang, _ = gradient_angles(f, opts["min_grad"])
        counts, _ = np.histogram(ang[np.isfinite(ang)], bins=edges)
        hist.extend([_g(f.time), _g(lo), _g(hi), int(n)] for lo, hi, n in zip(edges[:-1], edges[1:], counts))
    art.rows("angle_histogram.csv", ("t", "bin_lo", "bin_hi", "count"), hist)
    doc = {"scenario": sc.settings, "seed": sc.seed, "line_cone": line_cone, "cone_report": rep,
           "monotone_report": mono, "passed": rep.passed and mono.passed}
    if summary is not None:
        doc["solution"] = summary
    art.json("report_cone.json", doc)
    log.info("cone: max_violation=%.3g slack=%.3g pass=%s; monotone pass=%s",
             rep.max_violation, rep.slack, rep.passed, mono.passed)
    return rep.passed and mono.passed


def run_couple(sc: Scenario, art: Artifacts, threads: int) -> bool:
    _, line_cone = sc.cones()
    opts = sc.section("coupling")
    domain = sc.domain
    M = int(opts["M"])

    def one(i):
        path = simulate_coupled_pair(domain, opts["x"], opts["y"], opts["dt"], opts["t_end"],
                                     RngStream(sc.seed, i, PURPOSE_COUPLE), opts["scheme"])
        return path, coupling_monitors(path, line_cone)

    results = map_replicates(one, range(M), threads)
    reports = [r for _, r in results]
    series = []
    for i, (path, _) in enumerate(results):
        stride = max(1, math.ceil(len(path.K_angle) / int(opts["series_points"])))
        idx = np.unique(np.r_[np.arange(0, len(path.K_angle), stride), len(path.K_angle) - 1])
        series.extend([i, _g(path.times[k]), _g(path.K_angle[k])] for k in idx)
    art.rows("k_series.csv", ("replicate", "t", "K_angle"), series)
    if results:
        first = results[0][0]
        art.add("trace_replicate000.csv", lambda p: write_trace_csv(first, p))
    passed = all(r.passed for r in reports)
    failing = [i for i, r in enumerate(reports) if not r.passed]
    for i in failing[:1]:
        bad = results[i][0]
        art.add(f"counterexample_trace_replicate{i:03d}.csv", lambda p, bad=bad: write_trace_csv(bad, p))
    art.json("report_couple.json", {
        "scenario": sc.settings, "seed": sc.seed, "line_cone": line_cone, "n_replicates": M,
        "n_passed": M - len(failing), "failing_replicates": failing,
        "min_separation": min((r.min_separation for r in reports), default=None),
        "max_excursion": max((r.max_excursion for r in reports), default=None),
        "replicates": [dict(to_jsonable(r), passed=r.passed) for r in reports],
        "passed": passed,
    })
    log.info("couple: %d/%d replicates pass", M - len(failing), M)
    return passed


def run_branch(sc: Scenario, art: Artifacts, threads: int) -> bool:
    opts = sc.section("branching")
    th = sc.settings["theorem"]
    domain = sc.domain

    def one(i):
        return simulate_coupled_branching(domain, opts["x"], opts["y"], sc.mechanism, int(opts["N"]),
                                          opts["dt"], opts["t_end"], RngStream(sc.seed, i, PURPOSE_BRANCH),
                                          n_outputs=int(opts["n_outputs"]), offspring=opts["offspring"])

    runs = map_replicates(one, range(int(opts["M"])), threads)
    rep = check_pathwise_domination(runs, sc.phi, domain, opts["x"], opts["y"], sc.triangle.a,
                                    sc.triangle.b, th["c"], th["d"])
    if rep.failures:
        r = rep.failures[0]["replicate"]
        name = f"counterexample_replicate{r:03d}.csv"
        rep.counterexample_file = name
        art.add(name, lambda p: write_snapshot_csv(runs[r], p))
    if runs:
        art.add("branch_snapshots_replicate000.csv", lambda p: write_snapshot_csv(runs[0], p))
    ok = rep.passed and rep.sandwich_ok
    art.json("report_branch.json", {"scenario": sc.settings, "seed": sc.seed, "domination_report": rep,
                                    "passed": ok})
    log.info("branch: %d comparisons, min gap %.3g, pass=%s", rep.n_comparisons, rep.min_gap, ok)
    return ok


def run_duality(sc: Scenario, art: Artifacts, threads: int) -> bool:
    opts = sc.section("duality")
    t_end = float(opts["t_end"])
    traj = _solve(sc, t_end)
    rep = check_duality(sc.domain, opts["x"], sc.phi, sc.mechanism, int(opts["N"]), int(opts["M"]),
                        opts["dt"], t_end, traj, sc.seed, rel_tol=float(opts["rel_tol"]), threads=threads)
    art.json("report_duality.json", {"scenario": sc.settings, "seed": sc.seed, "duality_report": rep,
                                     "passed": rep.passed})
    log.info("duality: pde=%.6g mc=%.6g +- %.2g pass=%s", rep.pde_value, rep.mc_estimate,
             rep.mc_standard_error, rep.passed)
    return rep.passed


def run_calibrate(sc: Scenario, art: Artifacts, threads: int) -> bool:
    opts = sc.settings["calibration"]
    tol = float(opts["tol"])
    rows, ok = [], True
    for beta in opts["betas"]:
        c1 = stable_tail_constant(float(beta))
        mech = BranchingMechanism(nu=StableTail(c1, float(beta)))
        for lam in opts["lams"]:
            closed = phi_eval(mech, float(lam))
            quad = stable_tail_integral_quad(float(beta), float(lam), c1)
            target = -float(lam) ** (1.0 + float(beta))
            good = abs(closed - target) <= tol and abs(quad - target) <= tol
            ok &= good
            rows.append({"beta": beta, "lam": lam, "c1": c1, "closed_form": closed, "quadrature": quad,
                         "target": target, "passed": good})
    feller = feller_check(sc.mechanism, int(opts["N"]), int(opts["M"]), float(opts["dt"]), float(opts["t"]),
                          float(opts["lam"]), sc.seed, threads)
    art.json("report_calibrate.json", {"scenario": sc.settings, "seed": sc.seed, "stable_tail": rows,
                                       "feller": feller, "passed": ok and feller.passed})
    log.info("calibrate: stable tail pass=%s, feller z=%.2f", ok, feller.z_score)
    return ok and feller.passed


def run_all(sc: Scenario, art: Artifacts, threads: int) -> bool:
    traj = _solve(sc)
    art.json("report_solve.json", {"scenario": sc.settings, "seed": sc.seed,
                                   "solution": _emit_solution(sc, traj, art)})
    results = [run_cone(sc, art, threads, traj), run_couple(sc, art, threads), run_branch(sc, art, threads),
               run_duality(sc, art, threads), run_calibrate(sc, art, threads)]
    return all(results)


RUNNERS = {"solve": run_solve, "couple": run_couple, "branch": run_branch, "duality": run_duality,
           "cone": run_cone, "calibrate": run_calibrate, "all": run_all}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradcone", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="scenario JSON file")
        p.add_argument("--out", help="output directory (overrides the config's output_dir)")
        p.add_argument("--threads", type=int, default=1, help="replicate workers, 0 = one per CPU")
        p.add_argument("--verbose", action="store_true")
    return parser


def _origin(exc: BaseException) -> str:
    frames = traceback.extract_tb(exc.__traceback__)
    return Path(frames[-1].filename).stem if frames else "cli"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 0:
            raise ConfigError("--threads must be >= 0")
        sc = load_scenario(args.config, args.out)
        art = Artifacts()
        passed = RUNNERS[args.command](sc, art, args.threads)
        written = art.flush(Path(sc.output_dir or "out"))
    except (GradconeError, ValueError, OSError) as exc:
        print(f"gradcone {args.command}: [{_origin(exc)}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    log.info("wrote %d files", len(written))
    if not passed:
        print(f"gradcone {args.command}: check failed", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
