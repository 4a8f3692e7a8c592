"""Command-line pipeline: grid, outer map, Morse graph, Lyapunov function, homology.

Exit codes: 0 success, 1 operational error, 2 certificate failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import combdyn, cubgrid, flowsim, morsegraph

STAGES = ("morse", "lyapunov", "homology")
EXIT_OK, EXIT_ERROR, EXIT_CERT = 0, 1, 2


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage {stage}: {message}")


@dataclass
class RunConfig:
    system: str = "circle-attractor"
    lower: list[float] = dataclasses.field(default_factory=lambda: [-2.0, -2.0])
    upper: list[float] = dataclasses.field(default_factory=lambda: [2.0, 2.0])
    depth: list[int] = dataclasses.field(default_factory=lambda: [64, 64])
    tau: float = 2.0
    h: float = 0.01
    samples_per_axis: int = 3
    bloat_rings: int = 1
    lam: float = 1.0
    t_max: float | None = None
    field: str = "Z2"
    output: str = "morse-out"
    stages: list[str] = dataclasses.field(default_factory=lambda: list(STAGES))
    seed: int = 0
    dini_samples: int = 1000

    def __post_init__(self):
        dim = len(self.lower)
        if isinstance(self.depth, (int, float)):
            self.depth = [int(self.depth)] * dim
        elif len(self.depth) == 1:
            self.depth = list(self.depth) * dim
        self.lower = [float(v) for v in self.lower]
        self.upper = [float(v) for v in self.upper]
        self.depth = [int(v) for v in self.depth]
        if not (len(self.upper) == dim == len(self.depth)) or dim == 0:
            raise ConfigError("lower, upper and depth must have the same length")
        for name in ("tau", "h", "lam"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.t_max is not None and not self.t_max > 0:
            raise ConfigError("t_max must be positive")
        if self.samples_per_axis < 2:
            raise ConfigError("samples_per_axis must be at least 2")
        if self.bloat_rings < 0:
            raise ConfigError("bloat_rings must be nonnegative")
        if any(d < 1 for d in self.depth):
            raise ConfigError("depth must be positive")
        if self.field not in ("Z2", "Q"):
            raise ConfigError("field must be Z2 or Q")
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stage {unknown[0]!r}; choose from {', '.join(STAGES)}")
        if self.dini_samples < 1:
            raise ConfigError("dini_samples must be positive")

    @property
    def horizon(self) -> float:
        return self.t_max if self.t_max is not None else 50.0 * self.tau

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path, overrides: dict[str, Any] | None = None) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: expected a JSON object")
        data.update(overrides or {})
        return cls.from_dict(data)


# ---------------------------------------------------------------- pipeline


@dataclass
class PipelineResult:
    config: RunConfig
    grid: Any = None
    outer_map: Any = None
    graph: Any = None
    filtration: Any = None
    lyapunov: Any = None
    field_values: Any = None
    homology: dict | None = None
    certificates: dict[str, bool] = dataclasses.field(default_factory=dict)
    details: dict[str, Any] = dataclasses.field(default_factory=dict)
    files: list[str] = dataclasses.field(default_factory=list)

    @property
    def status(self) -> int:
        return EXIT_OK if all(self.certificates.values()) else EXIT_CERT


def _stage(name: str):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except (ValueError, RuntimeError, OSError, ArithmeticError) as exc:
                raise StageError(name, str(exc)) from exc
        return run
    return wrap


@_stage("morse")
def stage_morse(cfg: RunConfig, res: PipelineResult) -> None:
    spec = flowsim.load_field(cfg.system, len(cfg.lower))
    grid = cubgrid.build_grid(cfg.lower, cfg.upper, cfg.depth)
    f = combdyn.build_outer_map(grid, spec, cfg.tau, cfg.samples_per_axis, cfg.bloat_rings, cfg.h)
    g = morsegraph.condense(f)
    if g.size == 0:
        raise ValueError("no recurrent components found")
    filt = morsegraph.filtration(g, f)
    res.grid, res.outer_map, res.graph, res.filtration = grid, f, g, filt
    res.details["spec"] = spec
    res.details["morse"] = {
        "components": g.size,
        "boxes": [len(c) for c in g.components],
        "edges": [[j + 1, i + 1] for j, i in sorted(g.edges)],
        "attractor_boxes": [len(a) for a in filt.attractors],
        "neighborhood_boxes": [len(w) for w in filt.neighborhoods],
    }


@_stage("lyapunov")
def stage_lyapunov(cfg: RunConfig, res: PipelineResult) -> None:
    from . import lyap

    spec, filt, f = res.details["spec"], res.filtration, res.outer_map
    ml = lyap.strict_ml(spec, filt, f, lam=cfg.lam, h=cfg.h, t_max=cfg.horizon)
    table = lyap.box_table(ml)
    res.lyapunov, res.field_values = ml, table
    crit = [(lo, hi) for lo, hi in ml.critical_values()]
    ordered = all(crit[k][1] < crit[k + 1][0] for k in range(len(crit) - 1))
    near = max(max(abs(lo - k), abs(hi - k)) for k, (lo, hi) in enumerate(crit))

    rng = np.random.default_rng(cfg.seed)
    allowed = ~lyap.dini_exclusion(filt)
    pts = lyap.sample_points(res.grid, allowed, cfg.dini_samples, rng)
    dini = lyap.dini_certificate(ml, pts)
    basin = filt.neighborhood(filt.size)
    contraction = {}
    for tau in (0.1, 0.5):
        c = lyap.psi_contraction(ml, lyap.sample_points(res.grid, basin, 200, rng), tau)
        contraction[tau] = c
    res.certificates["critical_values_ordered"] = ordered
    res.certificates["critical_values_match"] = near <= 0.05
    res.certificates["dini"] = dini.ok
    res.certificates["psi_contraction"] = all(c.ok for c in contraction.values())
    res.details["lyapunov"] = {
        "lambda": cfg.lam,
        "t_max": cfg.horizon,
        "critical_values": [[lo, hi] for lo, hi in crit],
        "dini": {"samples": dini.n_points, "failed": dini.n_failed, "worst_log_margin": dini.worst_margin},
        "psi_contraction": {str(t): c.worst_ratio for t, c in contraction.items()},
        "truncated_boxes": int(table.truncated.sum()),
    }


@_stage("homology")
def stage_homology(cfg: RunConfig, res: PipelineResult) -> None:
    from . import homol

    filt, f = res.filtration, res.outer_map
    table = homol.critical_group_table(filt, f, cfg.field)
    m = homol.morse_numbers(table.groups, res.grid.dim)
    beta = homol.basin_betti(filt, cfg.field)
    report = homol.verify_inequalities(m, beta.as_tuple())
    mq = homol.morse_numbers(table.quotient, res.grid.dim)
    bq = homol.quotient_basin_betti(filt, cfg.field)
    qreport = homol.verify_inequalities(mq, bq.as_tuple())
    res.homology = homol.homology_summary(table, report, qreport)
    res.certificates["morse_inequalities"] = report.ok
    res.certificates["quotient_morse_inequalities"] = qreport.ok


def _write(res: PipelineResult, out: Path, name: str, text: str) -> None:
    path = out / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    res.files.append(name)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def summary_rows(res: PipelineResult) -> list[tuple[str, str, str]]:
    rows = [("config", k, _fmt(v)) for k, v in sorted(res.config.as_dict().items()) if v is not None]
    for section in ("morse", "lyapunov"):
        for k, v in res.details.get(section, {}).items():
            if isinstance(v, dict):
                for k2, v2 in v.items():
                    rows.append((section, f"{k}.{k2}", _fmt(v2)))
            else:
                rows.append((section, k, _fmt(v)))
    if res.homology:
        h = res.homology
        for k in ("morse_numbers", "betti_numbers", "gamma", "euler"):
            rows.append(("homology", k, _fmt(h[k])))
        for k, g in enumerate(h["critical_groups"], 1):
            rows.append(("homology", f"C(M{k})", _fmt(g)))
        q = h["quotient"]
        for k, g in enumerate(q["critical_groups"], 1):
            rows.append(("quotient", f"C(M{k})", _fmt(g)))
        rows.append(("quotient", "morse_numbers", _fmt(q["morse_numbers"])))
        rows.append(("quotient", "betti_numbers", _fmt(q["betti_numbers"])))
    for k, ok in res.certificates.items():
        rows.append(("certificate", k, "pass" if ok else "FAIL"))
    return rows


def write_artifacts(res: PipelineResult, out: Path) -> None:
    from . import render

    out.mkdir(parents=True, exist_ok=True)
    cfg = res.config
    _write(res, out, "config.json", json.dumps(cfg.as_dict(), indent=2, sort_keys=True) + "\n")
    if res.outer_map is not None:
        combdyn.save_map(res.outer_map, out / "map.txt")
        res.files.append("map.txt")
        _write(res, out, "morse.dot", morsegraph.to_dot(res.graph))
        filt = res.filtration
        for k in range(1, filt.size + 1):
            _write(res, out, f"sets/M{k}.txt", filt.morse_set(k).dumps())
            _write(res, out, f"sets/A{k}.txt", filt.attractor(k).dumps())
            _write(res, out, f"sets/basin{k}.txt", filt.basin(k).dumps())
            _write(res, out, f"sets/W{k}.txt", filt.neighborhood(k).dumps())
            _write(res, out, f"sets/repeller{k}.txt", filt.repellers[k - 1].dumps())
    if res.field_values is not None:
        res.field_values.write_csv(out / "lyapunov.csv")
        res.files.append("lyapunov.csv")
        comps = res.graph.components
        if res.grid.dim == 2:
            if max(res.grid.shape) <= render.SVG_MAX_DEPTH:
                _write(res, out, "lyapunov.svg", render.svg_heatmap(res.field_values.V, comps))
            render.plot_lyapunov(res.field_values.V, comps, out / "lyapunov.png", f"V for {cfg.system}")
            res.files.append("lyapunov.png")
    if res.filtration is not None and res.grid.dim == 2:
        render.plot_filtration(res.filtration.neighborhoods, res.graph.components, out / "filtration.png")
        res.files.append("filtration.png")
    report = {
        "system": cfg.system,
        "morse": res.details.get("morse"),
        "lyapunov": res.details.get("lyapunov"),
        "homology": res.homology,
        "certificates": res.certificates,
        "status": res.status,
    }
    _write(res, out, "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    lines = ["section\tkey\tvalue"] + ["\t".join(r) for r in summary_rows(res)]
    _write(res, out, "summary.tsv", "\n".join(lines) + "\n")


def run_pipeline(cfg: RunConfig, write: bool = True) -> PipelineResult:
    res = PipelineResult(cfg)
    stage_morse(cfg, res)
    if "lyapunov" in cfg.stages:
        stage_lyapunov(cfg, res)
    if "homology" in cfg.stages:
        stage_homology(cfg, res)
    if write:
        try:
            write_artifacts(res, Path(cfg.output))
        except (OSError, ValueError) as exc:
            raise StageError("report", str(exc)) from exc
    return res


def print_table(res: PipelineResult, stream=None) -> None:
    stream = stream or sys.stdout
    rows = [r for r in summary_rows(res) if r[0] != "config"]
    width = max((len(f"{a}.{b}") for a, b, _ in rows), default=10)
    print(f"system: {res.config.system}   grid: {'x'.join(map(str, res.config.depth))}", file=stream)
    for sec, key, val in rows:
        print(f"  {sec + '.' + key:<{width + 1}} {val}", file=stream)


# ---------------------------------------------------------------- extra checks


def independence_checks(res: PipelineResult) -> dict[str, bool]:
    """Critical groups from shrunk neighbourhoods and from Lyapunov sublevel covers."""
    from . import homol, lyap

    cfg, filt, f = res.config, res.filtration, res.outer_map
    base = [g.as_tuple() for g in homol.critical_group_table(filt, f, cfg.field).groups]
    shrunk = homol.neighborhood_variants(filt, f)
    alt = []
    for k in range(1, filt.size + 1):
        lower = shrunk[k - 2] if k > 1 else cubgrid.CubicalSet.empty(res.grid)
        alt.append(homol.betti(shrunk[k - 1], lower, cfg.field).as_tuple())
    out = {"neighbourhood_independence": alt == base}
    for lam, scale in ((1.0, 1.0), (2.0, 2.0)):
        ml = lyap.strict_ml(res.details["spec"], filt, f, lam=lam, scale=scale, h=cfg.h, t_max=cfg.horizon)
        table = lyap.box_table(ml)
        groups = [
            homol.betti(table.sublevel(k - 0.5), table.sublevel(k - 1.5), cfg.field).as_tuple()
            for k in range(1, filt.size + 1)
        ]
        out[f"sublevel_groups_lambda{lam:g}"] = groups == base
    return out


def retraction_check(res: PipelineResult, n: int = 100) -> dict[str, bool]:
    from . import lyap

    ml = res.lyapunov
    crit = ml.critical_values()
    if len(crit) < 1:
        return {}
    lo = crit[0][1]
    hi = crit[1][0] if len(crit) > 1 else 1.0
    a, b = lo + 0.25 * (hi - lo), lo + 0.75 * (hi - lo)
    rng = np.random.default_rng(res.config.seed + 1)
    cand = lyap.sample_points(res.grid, res.filtration.neighborhood(1), 4 * n, rng)
    vals = ml(cand)
    pts = cand[vals <= b][:n]
    y = lyap.retract(ml, 1.0, pts, a, b)
    v0 = vals[vals <= b][:n]
    fixed = np.array_equal(y[v0 <= a], pts[v0 <= a])
    landed = bool(np.all(ml(y) <= a + 1e-6 * (b - a)))
    return {"retraction_lands": landed, "retraction_fixes_sublevel": fixed}


# ---------------------------------------------------------------- commands


def compare_depths(cfg: RunConfig, depth_a: int, depth_b: int) -> dict:
    if not depth_a < depth_b:
        raise ConfigError("depth_a must be smaller than depth_b")
    rows = {}
    for d in (depth_a, depth_b):
        c = dataclasses.replace(cfg, depth=[d] * len(cfg.lower), stages=["morse", "homology"])
        res = PipelineResult(c)
        try:
            stage_morse(c, res)
            stage_homology(c, res)
            rows[d] = {
                "components": res.graph.size,
                "morse_numbers": list(res.homology["morse_numbers"]),
                "betti_numbers": list(res.homology["betti_numbers"]),
            }
        except StageError as exc:
            rows[d] = {"error": str(exc)}
    a, b = rows[depth_a], rows[depth_b]
    agree = "error" not in a and a == b
    return {"depths": [depth_a, depth_b], "results": {str(k): v for k, v in rows.items()}, "agree": agree}


def _overrides(ns: argparse.Namespace) -> dict[str, Any]:
    keys = ("system", "lower", "upper", "depth", "tau", "h", "samples_per_axis", "bloat_rings", "lam",
            "t_max", "field", "output", "stages", "seed", "dini_samples")
    out = {}
    for k in keys:
        v = getattr(ns, k, None)
        if v is not None:
            out[k] = v
    return out


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    over = _overrides(ns)
    if getattr(ns, "config", None):
        return RunConfig.load(ns.config, over)
    return RunConfig.from_dict(over)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",")]


def _stages(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morsecrit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--system", help="builtin name or polynomial field file")
        sp.add_argument("--lower", type=_floats, help="domain lower corner, e.g. -2,-2")
        sp.add_argument("--upper", type=_floats, help="domain upper corner")
        sp.add_argument("--depth", type=_ints, help="boxes per axis (one value or one per axis)")
        sp.add_argument("--tau", type=float)
        sp.add_argument("--h", type=float, help="RK4 step")
        sp.add_argument("--samples-per-axis", dest="samples_per_axis", type=int)
        sp.add_argument("--bloat-rings", dest="bloat_rings", type=int)
        sp.add_argument("--lam", type=float, help="exponential weight lambda")
        sp.add_argument("--t-max", dest="t_max", type=float)
        sp.add_argument("--field", choices=("Z2", "Q"))
        sp.add_argument("--output", "-o", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--dini-samples", dest="dini_samples", type=int)

    for name, help_ in (
        ("analyze", "run every stage and write all artifacts"),
        ("morse-graph", "outer map, Morse graph and filtration only"),
        ("lyapunov", "Morse graph plus the Lyapunov function and its certificates"),
        ("homology", "Morse graph plus critical groups and Morse inequalities"),
        ("verify", "full run plus independence and retraction checks"),
    ):
        sp = sub.add_parser(name, help=help_)
        run_flags(sp)
        if name == "analyze":
            sp.add_argument("--stages", type=_stages, help="comma list of morse,lyapunov,homology")
    sp = sub.add_parser("compare-depths", help="Morse structure at two depths")
    run_flags(sp)
    sp.add_argument("--depth-a", dest="depth_a", type=int, required=True)
    sp.add_argument("--depth-b", dest="depth_b", type=int, required=True)
    sp = sub.add_parser("export", help="re-export DOT, CSV or SVG from a run directory")
    sp.add_argument("format", choices=("dot", "csv", "svg"))
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--out", required=True)
    return p


COMMAND_STAGES = {
    "morse-graph": ["morse"],
    "lyapunov": ["morse", "lyapunov"],
    "homology": ["morse", "homology"],
    "verify": list(STAGES),
}


def export(fmt: str, run_dir: str | Path, out: str | Path) -> None:
    from . import lyap, render

    run = Path(run_dir)
    map_path = run / "map.txt"
    if not map_path.exists():
        raise StageError("export", f"no outer map in {run}; run the morse stage first")
    f = combdyn.load_map(map_path)
    g = morsegraph.condense(f)
    if fmt == "dot":
        Path(out).write_text(morsegraph.to_dot(g))
        return
    csv_path = run / "lyapunov.csv"
    if not csv_path.exists():
        raise StageError("export", f"no Lyapunov table in {run}; run the lyapunov stage first")
    cols = lyap.read_csv_values(csv_path)
    if len(cols["V"]) != f.grid.size:
        raise StageError("export", "Lyapunov table does not match the outer map grid")
    if fmt == "csv":
        Path(out).write_text(csv_path.read_text())
    else:
        Path(out).write_text(render.svg_heatmap(cols["V"], g.components))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        if ns.command == "export":
            export(ns.format, ns.run_dir, ns.out)
            return EXIT_OK
        cfg = resolve_config(ns)
        if ns.command in COMMAND_STAGES:
            cfg = dataclasses.replace(cfg, stages=COMMAND_STAGES[ns.command])
        if ns.command == "compare-depths":
            rep = compare_depths(cfg, ns.depth_a, ns.depth_b)
            print("depth\tcomponents\tmorse_numbers\tbetti_numbers")
            for d, row in rep["results"].items():
                if "error" in row:
                    print(f"{d}\terror\t{row['error']}\t")
                else:
                    print(f"{d}\t{row['components']}\t{_fmt(row['morse_numbers'])}\t{_fmt(row['betti_numbers'])}")
            print(f"agree\t{'yes' if rep['agree'] else 'no'}")
            return EXIT_OK
        res = run_pipeline(cfg)
        if ns.command == "verify":
            res.certificates.update(independence_checks(res))
            res.certificates.update(retraction_check(res))
            write_artifacts(res, Path(cfg.output))
            for k, ok in res.certificates.items():
                print(f"{'PASS' if ok else 'FAIL'}\t{k}")
        else:
            print_table(res)
        return res.status
    except (ConfigError, StageError, FileNotFoundError, cubgrid.GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
