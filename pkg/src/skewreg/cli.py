"""Command line: configuration-driven experiments, TSV reports and field snapshots.

Exit status: 0 when every asserted invariant holds, 1 when one fails (the
first failure is named on stderr), 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__

KINDS = ("gauge", "hodge", "wente", "hardy-bmo", "system", "h-surface", "morrey", "boundary", "sweep")

DEFAULT_TOLERANCES = {
    "newton": 1e-8,
    "gauge_residual": 1e-4,
    "solver": 1e-9,
    "picard": 1e-6,
    "hodge": 1e-8,
    "harmonic": 1e-6,
    "min_order": 1.8,
    "fit_r2": 0.9,
    "min_mu": 0.2,
    "system_error": 1e-2,
    "wente_rel": 0.02,
    "monotone_slack": 0.1,
}

PROBLEM_DEFAULTS = {
    "gauge": {"omega": "manufactured", "amplitude": 0.02, "omega_l2": 0.2, "eps_threshold": 0.5},
    "hodge": {"cases": 3, "modes": 4},
    "wente": {"case": "closed-form", "cases": 5, "modes": 3},
    "hardy-bmo": {"cases": 3, "modes": 3, "margin": 1.0, "bmo_radius": 0.5},
    "system": {"omega": "manufactured", "omega_l2": 0.2, "amplitude": 1.0, "omega_file": None,
               "boundary": [[[1, 1.0, 0.0]], [[1, 0.0, 1.0]], [[0, 0.0, 0.0]]]},
    "h-surface": {"H": 1.0, "scale": 0.5, "resolutions": [65, 129], "max_iter": 60, "damping": 0.5},
    "morrey": {"omega_l2": 0.2, "centers": [[0.0, 0.0], [0.3, 0.3], [-0.4, 0.1]], "radii": None,
               "smallness_delta": 0.5, "audit_constant": 1.0},
    "boundary": {"omega_l2": 0.2, "theta1": 0.3, "deltas": [0.2, 0.1, 0.05, 0.025], "delta": None},
    "sweep": {},
}

TOP_KEYS = {"experiment", "resolution", "m", "p", "s", "seed", "tolerances", "problem", "output", "sweep"}
SWEEP_KEYS = {"experiment", "parameter", "values", "workers", "bisect", "problem"}


class ConfigError(Exception):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


# ---------------------------------------------------------------------------
# Configuration


def _line_map(node, path=(), out=None):
    """Map key paths of a composed YAML document to 1-based line numbers."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = path + (k.value,)
            out[p] = k.start_mark.line + 1
            _line_map(v, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out[path + (i,)] = v.start_mark.line + 1
            _line_map(v, path + (i,), out)
    return out


@dataclass
class ExperimentConfig:
    experiment: str
    resolution: int = 65
    m: int = 3
    p: float = 1.5
    s: float = 1.25
    seed: int = 0
    tolerances: dict = field(default_factory=dict)
    problem: dict = field(default_factory=dict)
    output: str = "out"
    sweep: dict | None = None

    def canonical(self) -> dict:
        d = {"experiment": self.experiment, "resolution": self.resolution, "m": self.m, "p": self.p,
             "s": self.s, "seed": self.seed, "tolerances": self.tolerances, "problem": self.problem}
        if self.sweep is not None:
            d["sweep"] = self.sweep
        return d

    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_value(self, dotted: str, value) -> "ExperimentConfig":
        c = copy.deepcopy(self)
        parts = dotted.split(".")
        if parts[0] == "problem":
            c.problem[parts[1]] = value
        elif parts[0] == "tolerances":
            c.tolerances[parts[1]] = value
        else:
            setattr(c, parts[0], value)
        return c


def _num(v, name, line, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name} must be a number, got {v!r}", line)
    if integer and (not float(v).is_integer()):
        raise ConfigError(f"{name} must be an integer, got {v!r}", line)
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(f"{name} = {v!r} is out of range (lower bound {lo})", line)
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(f"{name} = {v!r} is out of range (upper bound {hi})", line)
    return int(v) if integer else float(v)


def _check_resolution(v, line, name="resolution"):
    v = _num(v, name, line, 17, 1025, integer=True)
    if v % 2 == 0:
        raise ConfigError(f"{name} must be odd, got {v}", line)
    return v


def _parse_problem(kind, raw, lines, prefix):
    defaults = PROBLEM_DEFAULTS[kind]
    prob = copy.deepcopy(defaults)
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("problem must be a mapping", lines.get(prefix))
    for k, v in raw.items():
        if k not in defaults:
            raise ConfigError(f"unknown problem key {k!r} for experiment {kind!r}", lines.get(prefix + (k,)))
        prob[k] = v
    ln = lambda k: lines.get(prefix + (k,))
    if kind == "h-surface":
        if not isinstance(prob["resolutions"], list) or len(prob["resolutions"]) < 1:
            raise ConfigError("resolutions must be a non-empty list", ln("resolutions"))
        prob["resolutions"] = [_check_resolution(r, ln("resolutions"), "resolutions entry")
                               for r in prob["resolutions"]]
        _num(prob["damping"], "damping", ln("damping"), 0, 1, lo_open=True)
        _num(prob["max_iter"], "max_iter", ln("max_iter"), 1, 10000, integer=True)
        _num(prob["scale"], "scale", ln("scale"), 0, 1, lo_open=True)
        _num(prob["H"], "H", ln("H"))
    if kind == "gauge":
        if prob["omega"] not in ("zero", "manufactured", "random", "abelian"):
            raise ConfigError(f"omega must be zero, manufactured, random or abelian, got {prob['omega']!r}",
                              ln("omega"))
        _num(prob["amplitude"], "amplitude", ln("amplitude"), 0)
        _num(prob["omega_l2"], "omega_l2", ln("omega_l2"), 0)
        _num(prob["eps_threshold"], "eps_threshold", ln("eps_threshold"), 0, lo_open=True)
    if kind == "system":
        if prob["omega"] not in ("manufactured", "zero", "file"):
            raise ConfigError(f"omega must be manufactured, zero or file, got {prob['omega']!r}", ln("omega"))
        if prob["omega"] == "file" and not isinstance(prob["omega_file"], str):
            raise ConfigError("omega: file needs omega_file", ln("omega"))
        b = prob["boundary"]
        ok = isinstance(b, list) and all(isinstance(c, list) and all(
            isinstance(t, list) and len(t) == 3 and all(isinstance(x, (int, float)) for x in t) for t in c) for c in b)
        if not ok:
            raise ConfigError("boundary must list, per component, [k, cos, sin] terms", ln("boundary"))
    if kind == "wente" and prob["case"] not in ("closed-form", "random"):
        raise ConfigError(f"case must be closed-form or random, got {prob['case']!r}", ln("case"))
    for key in ("cases", "modes"):
        if key in prob:
            _num(prob[key], key, ln(key), 1, 1000, integer=True)
    for key in ("omega_l2",):
        if key in prob:
            _num(prob[key], key, ln(key), 0)
    if kind == "boundary":
        ds = [prob["delta"]] if prob["delta"] is not None else prob["deltas"]
        if not isinstance(ds, list) or not ds:
            raise ConfigError("deltas must be a non-empty list", ln("deltas"))
        for d in ds:
            _num(d, "delta", ln("deltas") or ln("delta"), 0, 1, lo_open=True, hi_open=True)
    if kind == "morrey":
        if not isinstance(prob["centers"], list) or not prob["centers"]:
            raise ConfigError("centers must be a non-empty list of points", ln("centers"))
        for c in prob["centers"]:
            if not (isinstance(c, list) and len(c) == 2):
                raise ConfigError(f"center {c!r} must be a pair", ln("centers"))
        if prob["radii"] is not None and (not isinstance(prob["radii"], list) or len(prob["radii"]) < 3):
            raise ConfigError("radii must list at least 3 radii", ln("radii"))
    return prob


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate YAML text; raises ``ConfigError`` with a line number."""
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigError(f"YAML parse error: {exc.problem}", mark.line + 1 if mark else None) from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping", 1)
    lines = _line_map(node)
    for k in raw:
        if k not in TOP_KEYS:
            raise ConfigError(f"unknown key {k!r}", lines.get((k,)))
    kind = raw.get("experiment")
    if kind not in KINDS:
        raise ConfigError(f"experiment must be one of {', '.join(KINDS)}, got {kind!r}",
                          lines.get(("experiment",), 1))
    ln = lambda *k: lines.get(k)
    cfg = ExperimentConfig(kind)
    if "resolution" in raw:
        cfg.resolution = _check_resolution(raw["resolution"], ln("resolution"))
    if "m" in raw:
        cfg.m = _num(raw["m"], "m", ln("m"), 2, 8, integer=True)
    if "p" in raw:
        cfg.p = _num(raw["p"], "p", ln("p"), 1, 2, lo_open=True)
    if "s" in raw:
        cfg.s = _num(raw["s"], "s", ln("s"), 1, 4 / 3, lo_open=True, hi_open=True)
    if "seed" in raw:
        cfg.seed = _num(raw["seed"], "seed", ln("seed"), 0, integer=True)
    if "output" in raw:
        if not isinstance(raw["output"], str):
            raise ConfigError("output must be a path", ln("output"))
        cfg.output = raw["output"]
    tols = dict(DEFAULT_TOLERANCES)
    for k, v in (raw.get("tolerances") or {}).items():
        if k not in DEFAULT_TOLERANCES:
            raise ConfigError(f"unknown tolerance {k!r}", ln("tolerances", k))
        tols[k] = _num(v, f"tolerances.{k}", ln("tolerances", k), 0, lo_open=True)
    cfg.tolerances = tols
    if kind == "sweep":
        sw = raw.get("sweep")
        if not isinstance(sw, dict):
            raise ConfigError("sweep experiments need a 'sweep' section", lines.get(("experiment",), 1))
        for k in sw:
            if k not in SWEEP_KEYS:
                raise ConfigError(f"unknown sweep key {k!r}", ln("sweep", k))
        base = sw.get("experiment")
        if base not in KINDS or base == "sweep":
            raise ConfigError(f"sweep.experiment must name a non-sweep experiment, got {base!r}",
                              ln("sweep", "experiment") or ln("sweep"))
        param = sw.get("parameter")
        if not isinstance(param, str) or param.split(".")[0] not in ("problem", "tolerances", "resolution", "seed",
                                                                     "m", "p", "s"):
            raise ConfigError(f"sweep.parameter must be a dotted config path, got {param!r}",
                              ln("sweep", "parameter") or ln("sweep"))
        values = sw.get("values")
        if not isinstance(values, list) or not values:
            raise ConfigError("sweep grid is empty", ln("sweep", "values") or ln("sweep"))
        workers = _num(sw.get("workers", 1), "sweep.workers", ln("sweep", "workers"), 1, 64, integer=True)
        bisect = _num(sw.get("bisect", 0), "sweep.bisect", ln("sweep", "bisect"), 0, 20, integer=True)
        prob = _parse_problem(base, sw.get("problem"), lines, ("sweep", "problem"))
        cfg.sweep = {"experiment": base, "parameter": param, "values": values, "workers": workers,
                     "bisect": bisect}
        cfg.problem = prob
        # validate every grid point up front
        for v in values:
            probe = cfg.with_value(param, v)
            probe.experiment = base
            _validate_point(probe, ln("sweep", "values"))
    else:
        if raw.get("sweep") is not None:
            raise ConfigError("'sweep' section is only valid for experiment: sweep", ln("sweep"))
        cfg.problem = _parse_problem(kind, raw.get("problem"), lines, ("problem",))
    return cfg


def _validate_point(cfg: ExperimentConfig, line):
    text = yaml.safe_dump({k: v for k, v in cfg.canonical().items() if k != "sweep"})
    try:
        parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"sweep value invalid: {exc}", line) from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None) from None
    return parse_config(text, str(path))


# ---------------------------------------------------------------------------
# Results and report writing


@dataclass
class Result:
    columns: list
    rows: list = field(default_factory=list)
    invariants: list = field(default_factory=list)     # (name, ok, detail)
    fields: dict = field(default_factory=dict)
    summary: list = field(default_factory=list)

    def check(self, name: str, ok: bool, detail: str = ""):
        self.invariants.append((name, bool(ok), detail))

    @property
    def first_failure(self):
        for name, ok, detail in self.invariants:
            if not ok:
                return name, detail
        return None


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".10g")
    return str(v)


def _meta_lines(cfg: ExperimentConfig) -> list:
    tol = ",".join(f"{k}={_fmt(v)}" for k, v in sorted(cfg.tolerances.items()))
    return [f"experiment={cfg.experiment}", f"config_hash={cfg.config_hash()}", f"seed={cfg.seed}",
            f"resolution={cfg.resolution}", f"tolerances={tol}"]


def write_reports(cfg: ExperimentConfig, res: Result, out: Path) -> Path:
    from .grid import write_field

    out.mkdir(parents=True, exist_ok=True)
    table = out / f"{cfg.experiment}.tsv"
    lines = [f"# {m}" for m in _meta_lines(cfg)]
    lines.append("\t".join(res.columns))
    for row in res.rows:
        lines.append("\t".join(_fmt(row.get(c, "")) for c in res.columns))
    table.write_text("\n".join(lines) + "\n", encoding="utf-8")
    summ = [*_meta_lines(cfg), ""]
    summ += res.summary
    summ.append("")
    for name, ok, detail in res.invariants:
        summ.append(f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))
    (out / f"{cfg.experiment}_summary.txt").write_text("\n".join(summ) + "\n", encoding="utf-8")
    if res.fields:
        fd = out / "fields"
        fd.mkdir(exist_ok=True)
        for name, f in sorted(res.fields.items()):
            write_field(fd / f"{name}.tsv", f)
    return table


# ---------------------------------------------------------------------------
# Experiments


def _grid(cfg):
    from .grid import build_grid
    return build_grid(cfg.resolution)


def _solver_errors():
    from .elliptic import SolverFailure
    from .gauge import DecompositionFailed, SmallnessViolation
    from .grid import GridError
    from .systems import HSurfaceFailure
    return (SolverFailure, DecompositionFailed, SmallnessViolation, HSurfaceFailure, GridError)


def exp_gauge(cfg: ExperimentConfig) -> Result:
    from .gauge import (GaugeConfig, audit_estimates, decompose, l2_norm, manufactured_potential,
                        random_divfree_potential, structure_defects)
    from .grid import Field

    cols = ["omega", "resolution", "amplitude", "omega_l2", "residual", "relative_residual", "orth_defect",
            "xi_skew_defect", "xi_mean", "boundary_P_defect", "grad_ratio", "steps", "newton_total", "status"]
    res = Result(cols)
    pr, t = cfg.problem, cfg.tolerances
    g = _grid(cfg)
    rng = np.random.default_rng(cfg.seed)
    kind = pr["omega"]
    if kind == "zero":
        Om = Field(g, np.zeros(g.shape + (cfg.m, cfg.m, 2)), "skew")
    elif kind == "manufactured":
        Om = manufactured_potential(g, pr["amplitude"], cfg.seed)[0]
    elif kind == "abelian":
        Om = random_divfree_potential(g, 2, pr["omega_l2"], rng, abelian=True)
    else:
        Om = random_divfree_potential(g, cfg.m, pr["omega_l2"], rng)
    row = {"omega": kind, "resolution": g.resolution, "amplitude": pr["amplitude"], "omega_l2": l2_norm(Om)}
    gc = GaugeConfig(tol=t["newton"], residual_tol=t["gauge_residual"], eps_threshold=pr["eps_threshold"])
    try:
        gp = decompose(Om, config=gc)
    except _solver_errors() as exc:
        row["status"] = f"failed: {exc}"
        res.rows.append(row)
        res.check("gauge.decomposition_accepted", False, str(exc))
        return res
    sd = structure_defects(gp)
    au = audit_estimates(gp, Om)
    row.update(residual=gp.residual, relative_residual=gp.relative_residual, grad_ratio=au.grad_ratio,
               steps=len(gp.t_history), newton_total=int(sum(gp.newton_history)), status="ok",
               **{k: sd[k] for k in ("orth_defect", "xi_skew_defect", "xi_mean", "boundary_P_defect")})
    res.rows.append(row)
    res.fields = {"gauge_P": gp.P, "gauge_xi": gp.xi}
    res.summary.append(f"gauge decomposition of {kind} Ω: residual {gp.residual:.3e} "
                       f"(relative {gp.relative_residual:.3e}) after {len(gp.t_history)} continuation steps")
    res.check("gauge.relative_residual", gp.relative_residual <= t["gauge_residual"],
              f"{gp.relative_residual:.3e}")
    res.check("gauge.orthogonality", sd["orth_defect"] <= 1e-8, f"{sd['orth_defect']:.3e}")
    res.check("gauge.xi_skew", sd["xi_skew_defect"] <= 1e-12, f"{sd['xi_skew_defect']:.3e}")
    res.check("gauge.xi_mean", sd["xi_mean"] <= 1e-8 * max(sd["xi_l2"], 1e-300) or sd["xi_l2"] == 0.0,
              f"{sd['xi_mean']:.3e}")
    res.check("gauge.boundary_P", sd["boundary_P_defect"] <= 1e-6, f"{sd['boundary_P_defect']:.3e}")
    return res


def exp_hodge(cfg: ExperimentConfig) -> Result:
    from .elliptic import harmonic_residual, hodge_decompose
    from .gauge import l2_norm
    from .grid import Field
    from .random_fields import band_limited

    res = Result(["case", "resolution", "chi_l2", "reconstruction_defect", "harmonic_residual", "status"])
    g = _grid(cfg)
    t = cfg.tolerances
    rng = np.random.default_rng(cfg.seed)
    worst_d, worst_h = 0.0, 0.0
    for k in range(cfg.problem["cases"]):
        chi = Field(g, band_limited(g, rng, cfg.problem["modes"], components=2)[..., None, None, :])
        tri = hodge_decompose(chi, tol=1e-10)
        cn = l2_norm(chi)
        dfc = l2_norm(chi - tri.reconstruct()) / cn
        hr = harmonic_residual(tri.h)
        worst_d, worst_h = max(worst_d, dfc), max(worst_h, hr)
        res.rows.append({"case": k, "resolution": g.resolution, "chi_l2": cn, "reconstruction_defect": dfc,
                         "harmonic_residual": hr, "status": "ok"})
        if k == 0:
            res.fields = {"hodge_f": tri.f, "hodge_g": tri.g, "hodge_h": tri.h}
    res.summary.append(f"{cfg.problem['cases']} random fields: max relative reconstruction defect {worst_d:.3e}, "
                       f"max interior |Δh| {worst_h:.3e}")
    res.check("hodge.reconstruction", worst_d <= t["hodge"], f"{worst_d:.3e}")
    res.check("hodge.harmonic", worst_h <= t["harmonic"], f"{worst_h:.3e}")
    return res


def exp_wente(cfg: ExperimentConfig) -> Result:
    from .grid import Field
    from .hardy import wente_check
    from .random_fields import band_limited

    res = Result(["case", "resolution", "ratio", "expected", "relative_error", "status"])
    g = _grid(cfg)
    pr = cfg.problem
    if pr["case"] == "closed-form":
        rep = wente_check(Field.scalar(g, g.X.copy()), Field.scalar(g, g.Y.copy()), 2.0)
        exp = math.sqrt(math.pi / 8) / math.pi
        rel = abs(rep.ratio - exp) / exp
        res.rows.append({"case": "closed-form", "resolution": g.resolution, "ratio": rep.ratio, "expected": exp,
                         "relative_error": rel, "status": "ok"})
        res.summary.append(f"closed-form ratio {rep.ratio:.6f} vs {exp:.6f} (relative error {rel:.2e})")
        res.check("wente.closed_form", rel <= cfg.tolerances["wente_rel"], f"{rel:.3e}")
        return res
    rng = np.random.default_rng(cfg.seed)
    ratios = []
    for k in range(pr["cases"]):
        a = Field.scalar(g, band_limited(g, rng, pr["modes"]))
        b = Field.scalar(g, band_limited(g, rng, pr["modes"]))
        rep = wente_check(a, b, 2.0)
        ratios.append(rep.ratio)
        res.rows.append({"case": k, "resolution": g.resolution, "ratio": rep.ratio, "expected": "nan",
                         "relative_error": "nan", "status": "ok"})
    res.summary.append(f"{len(ratios)} random pairs: max ratio {max(ratios):.4f}")
    res.check("wente.finite", all(np.isfinite(ratios)), "")
    return res


def exp_hardy_bmo(cfg: ExperimentConfig) -> Result:
    from .grid import Field
    from .hardy import MaximalConfig, bmo_seminorm, div_curl_hardy_check, div_curl_product, duality_check
    from .random_fields import band_limited

    res = Result(["case", "resolution", "quantity", "value", "status"])
    g = _grid(cfg)
    pr = cfg.problem
    rng = np.random.default_rng(cfg.seed)
    mc = MaximalConfig.for_grid(g, margin=pr["margin"])
    pairs = [(Field.scalar(g, band_limited(g, rng, pr["modes"])), Field.scalar(g, band_limited(g, rng, pr["modes"])))
             for _ in range(pr["cases"])]
    dc = div_curl_hardy_check(pairs, mc)
    prods = [div_curl_product(a, b) for a, b in pairs]
    fs = [Field.scalar(g, band_limited(g, rng, pr["modes"])) for _ in pairs]
    du = duality_check(list(zip(fs, prods)), mc, bmo_radius=pr["bmo_radius"])
    for k, (r, n) in enumerate(zip(dc.ratios, dc.notes)):
        res.rows.append({"case": k, "resolution": g.resolution, "quantity": "div_curl_hardy_ratio", "value": r,
                         "status": n})
    for k, (r, n) in enumerate(zip(du.ratios, du.notes)):
        res.rows.append({"case": k, "resolution": g.resolution, "quantity": "duality_ratio",
                         "value": "nan" if r is None else r, "status": n})
    bx = bmo_seminorm(Field.scalar(g, g.X.copy()), pr["bmo_radius"])
    res.rows.append({"case": 0, "resolution": g.resolution, "quantity": "bmo_x1", "value": bx, "status": "ok"})
    res.summary.append(f"div-curl Hardy ratio max {dc.max_ratio:.4f}; duality ratio max {du.max_ratio:.4f}; "
                       f"[x¹]_BMO {bx:.4f}")
    res.check("hardy.div_curl_finite", np.isfinite(dc.max_ratio), "")
    res.check("hardy.duality_finite", np.isfinite(du.max_ratio), "")
    return res


def _solved_system(cfg):
    from .systems import manufactured_system, solve_linear_system
    g = _grid(cfg)
    prob, ustar = manufactured_system(g, cfg.m, cfg.problem["omega_l2"], cfg.seed,
                                      cfg.problem.get("amplitude", 1.0))
    u = solve_linear_system(prob, tol=cfg.tolerances["solver"])
    return g, prob, u, ustar


def exp_system(cfg: ExperimentConfig) -> Result:
    from .gauge import l2_norm
    from .grid import Field, read_field
    from .systems import SystemProblem, fourier_boundary, solve_linear_system

    res = Result(["resolution", "m", "omega", "omega_l2", "max_error", "status"])
    pr = cfg.problem
    if pr["omega"] != "manufactured":
        g = _grid(cfg)
        if pr["omega"] == "zero":
            Om = Field(g, np.zeros(g.shape + (cfg.m, cfg.m, 2)), "skew")
        else:
            Om = read_field(pr["omega_file"])
            if Om.grid != g or Om.arity != (cfg.m, cfg.m, 2):
                raise ConfigError(f"omega_file must hold an ({cfg.m}, {cfg.m}, 2) field at resolution {g.resolution}")
        if len(pr["boundary"]) != cfg.m:
            raise ConfigError(f"boundary needs {cfg.m} components")
        prob = SystemProblem(Om, None, fourier_boundary(pr["boundary"]), m=cfg.m)
        u = solve_linear_system(prob, g, tol=cfg.tolerances["solver"])
        res.rows.append({"resolution": g.resolution, "m": cfg.m, "omega": pr["omega"], "omega_l2": l2_norm(Om),
                         "max_error": "nan", "status": "ok"})
        res.fields = {"system_u": u}
        res.summary.append(f"system with {pr['omega']} Ω solved at resolution {g.resolution}")
        res.check("system.solved", True)
        return res
    g, prob, u, ustar = _solved_system(cfg)
    err = float(np.abs(u.flat() - ustar.flat())[g.interior].max())
    res.rows.append({"resolution": g.resolution, "m": cfg.m, "omega": "manufactured", "omega_l2": l2_norm(prob.Omega),
                     "max_error": err,
                     "status": "ok"})
    res.fields = {"system_u": u}
    res.summary.append(f"manufactured system (m={cfg.m}): interior max error {err:.3e}")
    res.check("system.error", err <= cfg.tolerances["system_error"], f"{err:.3e}")
    return res


def exp_h_surface(cfg: ExperimentConfig) -> Result:
    from .grid import build_grid
    from .systems import HSurfaceFailure, HSurfaceProblem, solve_h_surface, stereographic_boundary, stereographic_sphere

    pr = cfg.problem
    res = Result(["resolution", "H", "scale", "iterations", "converged", "last_increment", "max_error", "order",
                  "status"])
    errs = []
    ok_all = True
    for n in pr["resolutions"]:
        g = build_grid(n)
        hp = HSurfaceProblem(pr["H"], stereographic_boundary(pr["scale"]), g, pr["max_iter"], pr["damping"],
                             cfg.tolerances["picard"])
        row = {"resolution": n, "H": pr["H"], "scale": pr["scale"]}
        try:
            u, log = solve_h_surface(hp)
        except HSurfaceFailure as exc:
            ok_all = False
            row.update(iterations=len(exc.increments), converged=False, last_increment=exc.increments[-1],
                       max_error="nan", order="nan", status="failed")
            res.rows.append(row)
            res.check(f"h_surface.picard_converged[{n}]", False, str(exc))
            continue
        err = float(np.abs(u.flat() - stereographic_sphere(g, pr["scale"]).flat())[g.interior].max())
        order = "nan"
        if errs and errs[-1][1] > 0 and err > 0:
            order = math.log(errs[-1][1] / err) / math.log((n - 1) / (errs[-1][0] - 1))
        errs.append((n, err))
        row.update(iterations=log.iterations, converged=True, last_increment=log.increments[-1], max_error=err,
                   order=order, status="ok")
        res.rows.append(row)
        res.check(f"h_surface.picard_converged[{n}]", True, f"{log.iterations} iterations")
        res.fields[f"h_surface_u_{n}"] = u
    if ok_all and len(errs) >= 2:
        order = res.rows[-1]["order"]
        res.summary.append(f"H-surface (H={pr['H']}, scale {pr['scale']}): observed order {order:.3f}")
        res.check("h_surface.order", order >= cfg.tolerances["min_order"], f"{order:.3f}")
    return res


def exp_morrey(cfg: ExperimentConfig) -> Result:
    from .morrey import decay_fit, smallness_radius

    res = Result(["center_x", "center_y", "radius", "J", "M", "mu", "r2", "j_exponent", "constant", "accepted"])
    g, prob, u, _ = _solved_system(cfg)
    pr = cfg.problem
    radii = pr["radii"]
    if radii is None:
        radii = [0.25, 0.125, 0.0625, 0.03125] if g.resolution >= 129 else [0.4, 0.2, 0.1, 0.05]
    rep = decay_fit(u, prob.e, cfg.p, cfg.s, [tuple(c) for c in pr["centers"]], radii,
                    min_r2=cfg.tolerances["fit_r2"])
    for f in rep.fits:
        for r, J, M in zip(f.radii, f.J, f.M):
            res.rows.append({"center_x": f.center[0], "center_y": f.center[1], "radius": r, "J": J, "M": M,
                             "mu": f.mu, "r2": f.r2, "j_exponent": f.j_exponent, "constant": f.constant,
                             "accepted": f.accepted})
    sm = smallness_radius(prob.Omega, pr["smallness_delta"], pr["audit_constant"])
    par = rep.params
    res.summary.append(f"fitted μ (min over centres) {rep.mu:.4f}; l = {par['l']:.4f}, γ̃ = {par['gamma_tilde']:.4f}, "
                       f"θ = {par['theta']:.4f}, θl = {par['mu_theory']:.4f}")
    res.summary.append(f"smallness radius R₀ = {sm.R0:g} ({'passed' if sm.passed else 'no radius passed'})")
    for f in rep.fits:
        res.check(f"morrey.fit[{f.center[0]:g},{f.center[1]:g}]",
                  f.accepted and f.mu > cfg.tolerances["min_mu"], f"μ = {f.mu:.4f}, R² = {f.r2:.4f}")
    return res


def exp_boundary(cfg: ExperimentConfig) -> Result:
    from .morrey import boundary_probe

    res = Result(["delta", "sigma", "theta_good", "annulus_energy", "radial_energy", "threshold", "gap", "bound",
                  "good_angle_ok", "gap_ok"])
    g, prob, u, _ = _solved_system(cfg)
    pr = cfg.problem
    deltas = [pr["delta"]] if pr["delta"] is not None else pr["deltas"]
    gaps = []
    for d in deltas:
        b = boundary_probe(u, prob.boundary, pr["theta1"], d)
        gaps.append(b.gap)
        res.rows.append({"delta": d, "sigma": b.sigma, "theta_good": b.theta_good, "annulus_energy": b.annulus_energy,
                         "radial_energy": b.radial_energy, "threshold": b.threshold, "gap": b.gap, "bound": b.bound,
                         "good_angle_ok": b.good_angle_ok, "gap_ok": b.gap_ok})
        res.check(f"boundary.good_angle[{d:g}]", b.good_angle_ok, f"{b.radial_energy:.4e} ≤ {b.threshold:.4e}")
        res.check(f"boundary.gap_bound[{d:g}]", b.gap_ok, f"{b.gap:.4e} ≤ {b.bound:.4e}")
    slack = cfg.tolerances["monotone_slack"]
    mono = all(b <= (1 + slack) * a for a, b in zip(gaps, gaps[1:]))
    if len(gaps) > 1:
        res.check("boundary.gap_monotone", mono, " ".join(f"{x:.4e}" for x in gaps))
    res.summary.append("boundary probe gaps: " + ", ".join(f"δ={d:g}: {x:.4e}" for d, x in zip(deltas, gaps)))
    return res


EXPERIMENTS = {
    "gauge": exp_gauge, "hodge": exp_hodge, "wente": exp_wente, "hardy-bmo": exp_hardy_bmo,
    "system": exp_system, "h-surface": exp_h_surface, "morrey": exp_morrey, "boundary": exp_boundary,
}


def run_experiment(cfg: ExperimentConfig) -> Result:
    if cfg.experiment == "sweep":
        return run_sweep(cfg)
    return EXPERIMENTS[cfg.experiment](cfg)


def _sweep_point(args):
    cfg, param, value = args
    point = cfg.with_value(param, value)
    point.experiment = cfg.sweep["experiment"]
    point.sweep = None
    try:
        r = EXPERIMENTS[point.experiment](point)
    except _solver_errors() as exc:
        r = Result(["status"], [{"status": f"failed: {exc}"}], [(f"{point.experiment}.run", False, str(exc))])
    return value, r


def run_sweep(cfg: ExperimentConfig) -> Result:
    sw = cfg.sweep
    param, values = sw["parameter"], list(sw["values"])
    jobs = [(cfg, param, v) for v in values]
    if sw["workers"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(sw["workers"], len(jobs))) as pool:
            out = list(pool.map(_sweep_point, jobs))
    else:
        out = [_sweep_point(j) for j in jobs]
    base = sw["experiment"]

    def failed(r):
        return r.first_failure is not None

    if base == "gauge" and sw["bisect"] and isinstance(values[0], (int, float)):
        ok_vals = [v for v, r in out if not failed(r)]
        bad_vals = [v for v, r in out if failed(r)]
        if ok_vals and bad_vals and min(bad_vals) > max(v for v in ok_vals if v < min(bad_vals)):
            lo = max(v for v in ok_vals if v < min(bad_vals))
            hi = min(bad_vals)
            for _ in range(sw["bisect"]):
                mid = 0.5 * (lo + hi)
                v, r = _sweep_point((cfg, param, mid))
                out.append((v, r))
                if failed(r):
                    hi = mid
                else:
                    lo = mid
    if all(isinstance(v, (int, float)) for v, _ in out):
        out.sort(key=lambda t: t[0])
    cols = ["sweep_value"]
    for _, r in out:
        for c in r.columns:
            if c not in cols:
                cols.append(c)
    cols.append("point_status")
    res = Result(cols)
    for v, r in out:
        status = "ok" if not failed(r) else f"failed: {r.first_failure[0]}"
        for row in r.rows or [{}]:
            res.rows.append({"sweep_value": v, **row, "point_status": status})
    res.summary.append(f"sweep over {param} for {base}: {len(out)} points")
    if base == "gauge":
        bad = sorted(v for v, r in out if failed(r))
        thr = bad[0] if bad else "none"
        res.summary.append(f"empirical continuation threshold (first failing value): {thr}")
    elif base == "boundary":
        pts = sorted(((v, r.rows[0]["gap"]) for v, r in out if r.rows and "gap" in r.rows[0]), key=lambda t: -t[0])
        gaps = [x for _, x in pts]
        slack = cfg.tolerances["monotone_slack"]
        res.check("sweep.gap_monotone", all(b <= (1 + slack) * a for a, b in zip(gaps, gaps[1:])),
                  " ".join(f"{x:.4e}" for x in gaps))
        for v, r in out:
            res.invariants.extend((f"{n}@{_fmt(v)}", ok, d) for n, ok, d in r.invariants)
    else:
        for v, r in out:
            res.invariants.extend((f"{n}@{_fmt(v)}", ok, d) for n, ok, d in r.invariants)
    return res


# ---------------------------------------------------------------------------
# Entry point


def _diag(path, exc: ConfigError) -> str:
    return f"{path}:{exc.line if exc.line is not None else 1}: {exc}"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="skewreg", description="Gauge, Hardy/BMO and Morrey experiments on the unit disc.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--seed", type=int)
    common.add_argument("--resolution", type=int)
    common.add_argument("--quiet", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one experiment")
    sub.add_parser("sweep", parents=[common], help="run a parameter sweep")
    sub.add_parser("validate-config", parents=[common], help="parse and validate a config")
    sub.add_parser("version", help="print the version")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "version":
        print(f"skewreg {__version__}")
        return 0
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = _num(args.seed, "--seed", None, 0, integer=True)
        if args.resolution is not None:
            cfg.resolution = _check_resolution(args.resolution, None, "--resolution")
    except ConfigError as exc:
        print(_diag(args.config, exc), file=sys.stderr)
        return 2
    if args.command == "validate-config":
        if not args.quiet:
            print(f"ok {cfg.experiment} config_hash={cfg.config_hash()}")
        return 0
    if args.command == "sweep" and cfg.experiment != "sweep":
        print(f"{args.config}:1: the sweep command needs experiment: sweep", file=sys.stderr)
        return 2
    if args.command == "run" and cfg.experiment == "sweep":
        print(f"{args.config}:1: use the sweep command for experiment: sweep", file=sys.stderr)
        return 2
    out = Path(args.out or cfg.output)
    try:
        res = run_experiment(cfg)
    except ConfigError as exc:
        print(_diag(args.config, exc), file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"{args.config}:1: cannot read input: {exc}", file=sys.stderr)
        return 2
    except _solver_errors() as exc:
        res = Result(["status"], [{"status": f"failed: {exc}"}], [(f"{cfg.experiment}.run", False, str(exc))])
    table = write_reports(cfg, res, out)
    if not args.quiet:
        for line in res.summary:
            print(line)
        print(f"report: {table}")
    fail = res.first_failure
    if fail is not None:
        print(f"FAILED invariant {fail[0]}" + (f": {fail[1]}" if fail[1] else ""), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
