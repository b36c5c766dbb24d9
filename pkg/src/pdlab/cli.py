"""Batch experiment runner: ``pdlab <command> --system NAME --out DIR``.

Every run writes ``summary.json`` (sorted keys), ``report.txt`` and
``config.json``; ``evolve`` adds ``evolve.csv`` and ``diffusion`` adds
``diffusion.csv``. Re-running from the emitted ``config.json`` reproduces
``summary.json`` byte for byte.

Exit codes: 0 all checks pass, 2 acceptance failure, 3 configuration or
IO error, 4 numerical failure.
"""

import os

_THREADS = os.environ.get("PDLAB_THREADS")
if _THREADS and _THREADS.isdigit() and int(_THREADS) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.linalg

from . import diagonalizer as dg
from . import diffusion as df
from . import lyapunov as ly
from . import propagator as pr
from . import symbols as sb
from . import system as sy
from .config import DEFAULT
from .errors import ConfigError, NumericalError, PdlabError, PositivityViolation

log = logging.getLogger("pdlab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("check", "diagonalize", "evolve", "lyapunov", "diffusion", "all")
STAGES = ("check", "diagonalize", "evolve", "lyapunov", "diffusion")


class BaselineMissing(ConfigError):
    pass


# --------------------------------------------------------------------------
# configuration

@dataclass
class RunConfig:
    command: str = "all"
    system: str = None
    system_config: dict = None
    out: str = "pdlab-out"
    seed: int = 0
    orders: list = field(default_factory=lambda: [1, 2, 3])
    width: float = 1.0
    chi_c: float = None
    window: list = field(default_factory=lambda: [1e2, 1e4])
    reference: str = None
    sensitivity: bool = True
    baseline: str = None
    tolerances: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; choose from {', '.join(COMMANDS)}")
        if (self.system is None) == (self.system_config is None):
            raise ConfigError("give exactly one of a builtin system name or a system config")
        if self.system is not None and self.system not in sy.BUILTINS:
            raise ConfigError(f"unknown builtin {self.system!r}; known: {', '.join(sorted(sy.BUILTINS))} "
                              "(or pass a path to a system JSON file)")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        if len(self.window) != 2 or not 0 < self.window[0] < self.window[1]:
            raise ConfigError("window must be [t_min, t_max] with 0 < t_min < t_max")
        if not self.orders or any(int(k) < 1 for k in self.orders):
            raise ConfigError("orders must be a non-empty list of integers >= 1")
        known = set(DEFAULT.to_dict())
        bad = set(self.tolerances) - known
        if bad:
            raise ConfigError(f"unknown tolerance keys {sorted(bad)}")

    @classmethod
    def from_dict(cls, cfg):
        if not isinstance(cfg, dict):
            raise ConfigError("run config must be a JSON object")
        names = {f.name for f in fields(cls)}
        extra = set(cfg) - names
        if extra:
            raise ConfigError(f"unknown run config keys {sorted(extra)}")
        return cls(**cfg)

    def to_dict(self):
        return asdict(self)

    def spec(self):
        if self.system is not None:
            return sy.builtin(self.system)
        return sy.system_from_dict(self.system_config, self.tol())

    def tol(self):
        return DEFAULT.with_(**self.tolerances)


# --------------------------------------------------------------------------
# artifacts

def jsonable(obj):
    """Plain JSON types; complex -> [re, im], non-finite floats -> strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return [jsonable(float(obj.real)), jsonable(float(obj.imag))]
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else ("nan" if math.isnan(x) else ("inf" if x > 0 else "-inf"))
    if hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    return obj


def dumps(obj):
    return json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n"


def emit_plotdata(path, t, value, model=None, extra=None):
    """CSV with columns t, value, model (+ ``extra`` columns), one row per sample.

    Floats are written with ``repr`` so parsing the file returns the exact
    values. ``model`` may be None, which leaves the column empty.
    """
    t = [] if t is None else list(t)
    cols = {"value": list(value) if value is not None else []}
    cols["model"] = list(model) if model is not None else [None] * len(t)
    for name, vals in (extra or {}).items():
        cols[name] = list(vals)
    for name, vals in cols.items():
        if len(vals) != len(t):
            raise ValueError(f"column {name!r} has {len(vals)} rows, expected {len(t)}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + list(cols))
        for i, ti in enumerate(t):
            w.writerow([repr(float(ti))] + ["" if v[i] is None else repr(float(v[i])) for v in cols.values()])


def read_plotdata(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {h: [float(r[i]) if r[i] != "" else None for r in body] for i, h in enumerate(header)}


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def compare_baseline(current, baseline, exponent_tol=0.05, relative_tol=0.20):
    """Drift report between two metric dicts (nested dicts are flattened).

    Keys ending in ``exponent`` may move by ``exponent_tol`` in absolute
    terms; every other number by ``relative_tol`` relative to the baseline.
    """
    cur, base = _flatten(current), _flatten(baseline)
    flagged = []
    for key in sorted(set(cur) & set(base)):
        a, b = base[key], cur[key]
        if isinstance(a, bool) or isinstance(b, bool) or not isinstance(a, (int, float)) \
                or not isinstance(b, (int, float)):
            if a != b:
                flagged.append({"key": key, "baseline": a, "current": b, "rule": "equal"})
            continue
        if key.endswith("exponent"):
            drift, limit, rule = abs(b - a), exponent_tol, "absolute"
        else:
            drift = abs(b - a) / abs(a) if a != 0 else abs(b)
            limit, rule = relative_tol, "relative"
        if not drift <= limit:
            flagged.append({"key": key, "baseline": a, "current": b, "drift": drift, "rule": rule})
    return {"flagged": flagged, "new": sorted(set(cur) - set(base)),
            "missing": sorted(set(base) - set(cur)), "ok": not flagged}


def load_baseline(path, system):
    p = Path(path)
    if not p.exists():
        raise BaselineMissing(
            f"no baseline at {p}. Record one with: pdlab all --system {system} --record-baseline {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"baseline {p} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
    if system not in data:
        raise BaselineMissing(
            f"baseline {p} has no entry for {system!r}. Record one with: "
            f"pdlab all --system {system} --record-baseline {p}")
    return data[system]


def record_baseline(path, system, metrics):
    p = Path(path)
    data = json.loads(p.read_text()) if p.exists() else {}
    data[system] = jsonable(metrics)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dumps(data))


# --------------------------------------------------------------------------
# stages

class Stage:
    def __init__(self, name):
        self.name = name
        self.checks = {}
        self.metrics = {}
        self.details = {}
        self.series = {}
        self.error = None

    def check(self, label, ok, **info):
        self.checks[label] = {"ok": bool(ok), **info}

    @property
    def ok(self):
        return self.error is None and all(c["ok"] for c in self.checks.values())

    def first_failure(self):
        if self.error is not None:
            return f"{self.name}: {self.error}"
        for label, c in self.checks.items():
            if not c["ok"]:
                return f"{self.name}.{label}"
        return None

    def to_dict(self):
        return {"checks": self.checks, "metrics": self.metrics, "details": self.details,
                "error": self.error}


class Context:
    """Shared, lazily built objects for one run."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.tol = cfg.tol()
        self.spec = cfg.spec()
        self._sd = None
        self._dr = {}

    @property
    def sd(self):
        if self._sd is None:
            self._sd = dg.build_slow_diagonalizer(self.spec, tol=self.tol)
        return self._sd

    def dr(self, k):
        if k not in self._dr:
            self._dr[k] = dg.hierarchy_run(self.spec, k, sd=self.sd, tol=self.tol)
        return self._dr[k]


def stage_check(ctx, st):
    rep = sy.certify(ctx.spec, tol=ctx.tol)
    st.details = rep.summary()
    st.metrics = {"kappa": rep.kappa, "kalman_sigma_min": rep.kalman_sigma_min}
    st.check("B1", rep.b1_ok)
    st.check("B2", rep.b2_ok, kappa=rep.kappa)
    st.check("B3", rep.b3_ok, kalman_sigma_min=rep.kalman_sigma_min)


def stage_diagonalize(ctx, st):
    tol = ctx.tol
    orders = sorted({int(k) for k in ctx.cfg.orders} | {2})
    st.details["cond_M"] = {"t": ctx.sd.report["t"], "cond": ctx.sd.report["cond"]}
    runs = {}
    for k in orders:
        dr = ctx.dr(k)
        res = dr.diagnostics["sylvester_residual"]
        fit = sb.estimate_order(lambda t, x, dr=dr: dr.conjugation_defect(t, x), dr.zone)
        rem = sb.estimate_order(lambda t, x, dr=dr: dr.R(t, x), dr.zone)
        margin = dg.invertibility_margin(dr, tol)
        runs[str(k)] = {"zone_c": dr.zone.c, "zone_t0": dr.zone.t0, "sylvester_residual": res,
                        "defect_order": fit.s_exponent, "remainder_order": rem.s_exponent,
                        "invertibility_margin": margin}
        st.metrics[f"k{k}.zone_c"] = dr.zone.c
        st.metrics[f"k{k}.defect_order_exponent"] = fit.s_exponent
        st.check(f"sylvester_k{k}", res <= tol.sylvester_residual, value=res)
        st.check(f"defect_order_k{k}", abs(fit.s_exponent - (k + 1)) <= tol.order_slope,
                 value=fit.s_exponent, expected=k + 1)
        st.check(f"margin_k{k}", margin <= tol.invertibility_margin, value=margin)
    st.details["orders"] = runs
    t_grid = sy.default_t_grid(ctx.spec.t0)
    try:
        par = dg.extract_parabolic(ctx.dr(2), t_grid, tol)
    except PositivityViolation as exc:
        st.check("alpha_positive", False, reason=str(exc))
        return
    st.details["parabolic"] = {
        "t": t_grid, "alpha": [par.alpha(t) for t in t_grid], "beta": [par.beta(t) for t in t_grid],
        "gamma": [par.gamma(t) for t in t_grid], "alpha_limit": par.alpha_limit,
        "min_alpha_ratio": par.min_alpha_ratio, "decay_order": par.report["decay_order"]}
    lim = float(np.linalg.eigvalsh(0.5 * (par.alpha_limit + par.alpha_limit.conj().T)).min())
    st.metrics["alpha_limit_min_eig"] = lim
    st.check("alpha_positive", min(par.report["min_eig_re_alpha"]) > 0,
             min_eig=min(par.report["min_eig_re_alpha"]))


def _evolve_grid(spec):
    radii = np.geomspace(1e-3, 8.0, 24)
    direction = np.zeros(spec.n)
    direction[0] = 1.0
    return radii[:, None] * direction[None, :]


def stage_evolve(ctx, st):
    spec, tol, cfg = ctx.spec, ctx.tol, ctx.cfg
    xis = _evolve_grid(spec)
    ts = 2.0 ** np.arange(0, int(math.log2(tol.t_max)) + 1)
    E = pr.evolve_batch(spec, 0.0, xis, ts, tol.rk_tol, method="magnus")
    norms = np.linalg.norm(E, 2, axis=(-2, -1))
    cols = np.linalg.norm(E, axis=-2)
    rows = []
    for i, t in enumerate(ts):
        for j, x in enumerate(xis):
            rows.append([t, *x, norms[i, j], *cols[i, j]])
    st.series["evolve"] = {"header": ["t"] + [f"xi{k}" for k in range(spec.n)] + ["norm"]
                           + [f"col{k}" for k in range(spec.d)], "rows": rows}
    st.metrics["max_norm"] = float(norms.max())
    st.check("energy", norms.max() <= 1 + 1e-7, max_norm=float(norms.max()))

    if spec.is_constant:
        rng = np.random.default_rng(cfg.seed)
        worst = 0.0
        for _ in range(50):
            s, dt = rng.uniform(0, 5), rng.uniform(0.1, 20)
            x = rng.uniform(-4, 4, size=spec.n)
            got = pr.evolve(spec, s, x, [s + dt], tol=1e-11).E_samples[-1]
            ref = scipy.linalg.expm(spec.generator(s, x) * dt)
            worst = max(worst, float(np.linalg.norm(got - ref) / np.linalg.norm(ref)))
        st.check("expm_oracle", worst <= 1e-8, worst_relative=worst)

    dr2, dr3 = ctx.dr(2), ctx.dr(3)
    ub = pr.uniform_xi_bound(dr2, tol=tol)
    st.details["uniform_bound"] = ub
    st.metrics["uniform_bound_C"] = ub["C"]
    st.check("uniform_bound", ub["ok"], C=ub["C"], relative_change=ub["relative_change"])

    s0 = dr2.zone.t0
    worst_rel, worst_ratio = 0.0, 0.0
    for frac in (0.1, 0.2, 0.4):
        x = np.zeros(spec.n)
        x[0] = frac * dr2.zone.c
        ts_v = np.linspace(s0, s0 + min(1 / x[0] ** 2, 40.0), 5)[1:]
        v = pr.volterra_solve(dr2, s0, x, ts_v, tol=tol)
        e = pr.evolve(dr2, s0, x, ts_v, tol=1e-11)
        rel = np.linalg.norm(v.E_samples - e.E_samples, 2, axis=(1, 2)) / np.linalg.norm(e.E_samples, 2, axis=(1, 2))
        worst_rel = max(worst_rel, float(rel.max()))
        worst_ratio = max(worst_ratio, float(v.info["bound_ratio"]))
    st.check("volterra_vs_direct", worst_rel <= 1e-6, worst_relative=worst_rel)
    st.check("volterra_bound", worst_ratio <= 1 + 1e-6, bound_ratio=worst_ratio)

    rows_w = {}
    for s in (1.0, 10.0):
        w2, w3 = pr.limit_row_W(dr2, s, tol=tol), pr.limit_row_W(dr3, s, tol=tol)
        diff = float(np.linalg.norm(w2.row - w3.row))
        rows_w[str(s)] = {"W2": w2.row, "W3": w3.row, "difference": diff, "error_budget": w2.error + w3.error}
        st.check(f"W_consistency_s{s:g}", diff <= w2.error + w3.error, difference=diff,
                 budget=w2.error + w3.error)
    st.details["limit_row"] = rows_w


def stage_lyapunov(ctx, st):
    spec, tol = ctx.spec, ctx.tol
    w, rep = ly.find_epsilon(spec, tol=tol)
    cert = ly.certify_decay(spec, w, ly.decay_trajectories(spec, tol=tol), tol,
                            equivalence=(rep["lower"], rep["upper"]))
    spot = ly.derivative_spot_check(spec, w, count=100, seed=ctx.cfg.seed)
    xs = (0.02, 0.05, 0.1)
    small = {}
    for x in xs:
        T = min(tol.t_max, 5 / x**2)
        tt = np.linspace(50, T, 12)
        xi = np.zeros(spec.n)
        xi[0] = x
        traj = {"t": tt, "E": pr.evolve(spec, 0.0, xi, tt, tol.rk_tol).E_samples[:, None]}
        small[str(x)] = ly.norm_decay_rate(traj, 0, (50, T)) / x**2
    st.details = {"epsilon": w.to_dict(), "equivalence": rep, "decay": cert.to_dict(),
                  "spot_check": spot, "small_xi_rate_over_xi2": small}
    st.metrics = {"lower": rep["lower"], "upper": rep["upper"], "gamma": cert.gamma}
    st.check("equivalence", rep["ok"], lower=rep["lower"], upper=rep["upper"])
    st.check("gamma_positive", cert.ok, gamma=cert.gamma)
    st.check("derivative_spot_check", spot["ok"], failures=spot["failures"])


def _gap_for(spec, ctx):
    dr = dg.hierarchy_run(spec, 2, tol=ctx.tol) if spec is not ctx.spec else ctx.dr(2)
    data = df.gaussian_data(spec, ctx.cfg.width)
    return dr, data, df.diffusion_gap(spec, dr, data, chi_c=ctx.cfg.chi_c,
                                      window=tuple(ctx.cfg.window), tol=ctx.tol)


def stage_diffusion(ctx, st):
    spec, tol, cfg = ctx.spec, ctx.tol, ctx.cfg
    dr, data, gap = _gap_for(spec, ctx)
    st.details["gap"] = gap.to_dict()
    st.metrics["gap_exponent"] = gap.fit.exponent
    st.metrics["gap_log_exponent"] = gap.fit_log.exponent
    st.series["diffusion"] = {"t": gap.t, "value": gap.gap, "model": gap.fit.model(gap.t),
                              "extra": {"model_log": gap.fit_log.model(gap.t)}}
    st.check("gap_ceiling", gap.ceiling_ok)
    st.check("gap_decay", gap.fit_log.exponent <= -0.45, exponent=gap.fit_log.exponent)
    if cfg.sensitivity:
        st.details["sensitivity"] = df.diffusion_sensitivity(spec, dr, data, window=tuple(cfg.window), tol=tol)
    if cfg.reference:
        ref = sy.builtin(cfg.reference)
        _, _, rgap = _gap_for(ref, ctx)
        margin = rgap.fit_log.exponent - gap.fit_log.exponent
        st.details["reference"] = {"system": cfg.reference, "gap": rgap.to_dict(), "steeper_by": margin}
        st.check("steeper_than_reference", margin >= 0.8, steeper_by=margin)
    if spec.n == 1:
        lp = {}
        for p, q in ((2, 2), (1, 2), (1, math.inf)):
            r = df.lp_lq_experiment(spec, data, p, q, window=tuple(cfg.window), tol=tol)
            key = f"{p}-{r['q']}"
            lp[key] = {"exponent": r["fit"].exponent, "target": r["target"], "ok": r["ok"],
                       "surrogate": r["surrogate"]}
            st.metrics[f"lp_{key}_exponent"] = r["fit"].exponent
            st.check(f"lp_lq_{key}", r["ok"], exponent=r["fit"].exponent, target=r["target"])
        st.details["lp_lq"] = lp
    hf = df.highfreq_decay_check(spec, tol=tol)
    st.details["highfreq"] = {k: hf[k] for k in ("inf_rate", "worst_xi", "threshold", "inf_rate_over_bracket", "ok")}
    st.metrics["highfreq_inf_rate"] = hf["inf_rate"]
    st.check("highfreq", hf["ok"], inf_rate=hf["inf_rate"])


_RUNNERS = {"check": stage_check, "diagonalize": stage_diagonalize, "evolve": stage_evolve,
            "lyapunov": stage_lyapunov, "diffusion": stage_diffusion}


# --------------------------------------------------------------------------
# run

def _report(cfg, spec, stages, baseline, first):
    lines = [f"pdlab {cfg.command} on {spec.name} (d={spec.d}, n={spec.n})", ""]
    for st in stages:
        lines.append(f"[{st.name}]")
        if st.error is not None:
            lines.append(f"  ERROR {st.error}")
        for label, c in st.checks.items():
            info = ", ".join(f"{k}={_fmt(v)}" for k, v in c.items() if k != "ok")
            lines.append(f"  {'PASS' if c['ok'] else 'FAIL'} {label}" + (f" ({info})" if info else ""))
        for key, v in st.metrics.items():
            lines.append(f"  {key} = {_fmt(v)}")
        lines.append("")
    if baseline is not None:
        lines.append("[baseline]")
        lines.append(f"  {'PASS' if baseline['ok'] else 'FAIL'} drift check, {len(baseline['flagged'])} flagged, "
                     f"{len(baseline['new'])} new, {len(baseline['missing'])} missing")
        for f in baseline["flagged"]:
            lines.append(f"  flagged {f['key']}: {_fmt(f['baseline'])} -> {_fmt(f['current'])}")
        lines.append("")
    lines.append("result: PASS" if first is None else f"result: FAIL (first failure: {first})")
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def run(cfg, record=None):
    """Execute ``cfg``; returns (exit code, summary dict). Artifacts go to ``cfg.out``."""
    spec = cfg.spec()
    ctx = Context(cfg)
    names = STAGES if cfg.command == "all" else (cfg.command,)
    stages, code, first = [], EXIT_OK, None
    for name in names:
        st = Stage(name)
        t_start = time.perf_counter()
        try:
            _RUNNERS[name](ctx, st)
        except NumericalError as exc:
            st.error = f"{type(exc).__name__}: {exc}"
        log.info("stage %s finished in %.1f s", name, time.perf_counter() - t_start)
        stages.append(st)
        if first is None and not st.ok:
            first = st.first_failure()
            code = EXIT_NUMERIC if st.error is not None else EXIT_FAIL
    metrics = {f"{st.name}.{k}": v for st in stages for k, v in st.metrics.items()}
    baseline = None
    if cfg.baseline:
        base = load_baseline(cfg.baseline, spec.name)
        base = {k: v for k, v in base.items() if k.split(".", 1)[0] in names}
        baseline = compare_baseline(jsonable(metrics), base)
        if first is None and not baseline["ok"]:
            first, code = "baseline drift", EXIT_FAIL
    summary = {"command": cfg.command, "system": spec.name, "stages": {st.name: st for st in stages},
               "metrics": metrics, "baseline": baseline, "passed": first is None,
               "first_failure": first, "exit_code": code}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(dumps(summary))
    (out / "config.json").write_text(dumps(cfg.to_dict()))
    (out / "report.txt").write_text(_report(cfg, spec, stages, baseline, first))
    for st in stages:
        if "evolve" in st.series:
            ser = st.series["evolve"]
            with open(out / "evolve.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(ser["header"])
                w.writerows([[repr(float(v)) for v in row] for row in ser["rows"]])
        if "diffusion" in st.series:
            ser = st.series["diffusion"]
            emit_plotdata(out / "diffusion.csv", ser["t"], ser["value"], ser["model"], ser["extra"])
    if record:
        record_baseline(record, spec.name, jsonable(metrics))
    return code, summary


def build_parser():
    p = argparse.ArgumentParser(prog="pdlab", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--system", help="builtin system name or path to a system JSON file")
    p.add_argument("--config", help="run config JSON (for example a previous run's config.json)")
    p.add_argument("--out", help="output directory (default pdlab-out)")
    p.add_argument("--seed", type=int, help="seed for randomized samples (default 0)")
    p.add_argument("--orders", help="comma-separated hierarchy orders for diagonalize (default 1,2,3)")
    p.add_argument("--width", type=float, help="Gaussian data width for diffusion (default 1)")
    p.add_argument("--chi-c", type=float, help="cutoff radius for the prepared data")
    p.add_argument("--window", help="fit window t_min,t_max (default 100,10000)")
    p.add_argument("--reference", help="builtin whose gap exponent the diffusion run is compared with")
    p.add_argument("--no-sensitivity", action="store_true", help="skip the t0 / cutoff sensitivity reruns")
    p.add_argument("--baseline", help="baseline JSON to compare metrics against")
    p.add_argument("--record-baseline", metavar="PATH", help="store this run's metrics as the baseline in PATH")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args):
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read run config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"run config {args.config}: {exc.msg} (line {exc.lineno})") from exc
        if not isinstance(base, dict):
            raise ConfigError("run config must be a JSON object")
    base["command"] = args.command
    if args.system:
        path = Path(args.system)
        if args.system in sy.BUILTINS or not path.suffix:
            base["system"], base["system_config"] = args.system, None
        else:
            try:
                base["system_config"] = json.loads(path.read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read system file {path}: {exc.strerror}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"system file {path}: {exc.msg} (line {exc.lineno})") from exc
            base["system"] = None
    for key in ("out", "seed", "width", "chi_c", "reference", "baseline"):
        v = getattr(args, key)
        if v is not None:
            base[key] = v
    if args.orders:
        try:
            base["orders"] = [int(k) for k in args.orders.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--orders expects integers, got {args.orders!r}") from exc
    if args.window:
        try:
            base["window"] = [float(v) for v in args.window.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--window expects two numbers, got {args.window!r}") from exc
    if args.no_sensitivity:
        base["sensitivity"] = False
    return RunConfig.from_dict(base)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if _THREADS is not None and not (_THREADS.isdigit() and int(_THREADS) > 0):
        print(f"error: PDLAB_THREADS must be a positive integer, got {_THREADS!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = config_from_args(args)
        code, summary = run(cfg, record=args.record_baseline)
    except (ConfigError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PdlabError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    status = "PASS" if code == EXIT_OK else f"FAIL ({summary['first_failure']})"
    print(f"{summary['system']} {summary['command']}: {status}; artifacts in {cfg.out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
