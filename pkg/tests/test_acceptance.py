"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py`` (or ``python
tests/test_acceptance.py``); the lines appear under "acceptance criteria"
in the terminal summary.
"""

import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg

from pdlab import cli
from pdlab import diagonalizer as dg
from pdlab import diffusion as df
from pdlab import lyapunov as ly
from pdlab import propagator as pr
from pdlab import symbols as sb
from pdlab import system as sy

PASSING = ["damped_wave", "damped_wave_bt", "telegraph", "chain3"]
BASELINE = Path(__file__).parent / "data" / "baseline.json"


@pytest.fixture(scope="module")
def runs():
    out = {}
    for name in PASSING + ["uncoupled_bad"]:
        spec = sy.builtin(name)
        sd = dg.build_slow_diagonalizer(spec)
        out[name] = {k: dg.hierarchy_run(spec, k, sd=sd) for k in (1, 2, 3)}
    return out


@pytest.fixture(scope="module")
def weights():
    return {name: ly.find_epsilon(sy.builtin(name)) for name in PASSING + ["uncoupled_bad"]}


def test_c01_hypotheses(record):
    reps = {n: sy.certify(sy.builtin(n)) for n in PASSING + ["uncoupled_bad"]}
    ok = all(reps[n].all_ok and reps[n].kappa >= 1 - 1e-12 for n in PASSING)
    ok &= abs(reps["damped_wave"].kappa - 1) <= 1e-12
    ok &= abs(reps["damped_wave"].kalman_sigma_min - 1) <= 1e-12
    bad = reps["uncoupled_bad"]
    ok &= bad.b1_ok and bad.b2_ok and not bad.b3_ok and bad.kalman_sigma_min <= 1e-12
    kap = ", ".join(f"{n} {reps[n].kappa:.3g}" for n in PASSING)
    assert record(1, ok, f"kappa: {kap}; uncoupled sigma_min {bad.kalman_sigma_min:.1e}")


def test_c02_energy(record):
    xis = np.geomspace(1e-3, 8, 24)[:, None]
    ts = 2.0 ** np.arange(0, 14)
    worst = {}
    for n in PASSING:
        E = pr.evolve_batch(sy.builtin(n), 0.0, xis, ts, method="magnus")
        worst[n] = float(np.linalg.norm(E, 2, axis=(-2, -1)).max())
    ok = max(worst.values()) <= 1 + 1e-7
    assert record(2, ok, "max ||E|| " + ", ".join(f"{n} {v:.9f}" for n, v in worst.items()))


def test_c03_expm_oracle(record):
    worst = 0.0
    for n in ("damped_wave", "telegraph"):
        spec = sy.builtin(n)
        rng = np.random.default_rng(2024)
        for _ in range(50):
            s, dt, x = rng.uniform(0, 5), rng.uniform(0.1, 20), rng.uniform(-4, 4)
            E = pr.evolve(spec, s, [x], [s + dt], tol=1e-11).E_samples[-1]
            ref = scipy.linalg.expm(spec.generator(s, [x]) * dt)
            worst = max(worst, float(np.linalg.norm(E - ref) / np.linalg.norm(ref)))
    assert record(3, worst <= 1e-8, f"worst relative error {worst:.2e} over 100 samples")


def test_c04_hierarchy(runs, record):
    ok, orders, margins, res = True, [], [], 0.0
    for n in ("damped_wave", "chain3"):
        for k in (1, 2, 3):
            dr = runs[n][k]
            res = max(res, dr.diagnostics["sylvester_residual"])
            fit = sb.estimate_order(lambda t, x, dr=dr: dr.conjugation_defect(t, x), dr.zone)
            orders.append(fit.s_exponent - (k + 1))
            margins.append(dg.invertibility_margin(dr))
    ok = res <= 1e-12 and max(abs(o) for o in orders) <= 0.25 and max(margins) <= 0.5
    assert record(4, ok, f"sylvester {res:.1e}, max |order - (k+1)| {max(abs(o) for o in orders):.3f}, "
                         f"max ||N-I|| {max(margins):.4f}")


def test_c05_parabolic(runs, record):
    par = dg.extract_parabolic(runs["damped_wave"][2])
    err1 = max(abs(par.alpha(t)[0, 0] - 1) for t in (1e2, 1e3, 1e4))
    par2 = dg.extract_parabolic(dg.hierarchy_run(sy.damped_wave(2.0), 2))
    err2 = max(abs(par2.alpha(t)[0, 0] - 0.5) for t in (1e2, 1e3, 1e4))
    mins = {n: min(dg.extract_parabolic(runs[n][2]).report["min_eig_re_alpha"]) for n in PASSING}
    ok = err1 <= 1e-4 and err2 <= 1e-4 and min(mins.values()) > 0
    assert record(5, ok, f"|alpha-1| {err1:.1e}, |alpha-1/2| {err2:.1e}, min Re alpha "
                         + ", ".join(f"{n} {v:.3g}" for n, v in mins.items()))


def test_c06_pointwise_decay(weights, record):
    gammas = {}
    for n in PASSING + ["uncoupled_bad"]:
        spec = sy.builtin(n)
        w, rep = weights[n]
        cert = ly.certify_decay(spec, w, ly.decay_trajectories(spec), equivalence=(rep["lower"], rep["upper"]))
        gammas[n] = cert.gamma
    spec = sy.builtin("damped_wave")
    ratios = []
    for x in (0.01, 0.02, 0.05, 0.1):
        T = min(1e4, 5 / x**2)
        ts = np.linspace(50, T, 12)
        traj = {"t": ts, "E": pr.evolve(spec, 0.0, [x], ts).E_samples[:, None]}
        ratios.append(ly.norm_decay_rate(traj, 0, (50, T)) / x**2)
    ok = all(gammas[n] > 0 for n in PASSING) and gammas["uncoupled_bad"] == 0
    ok &= all(1.8 <= r <= 2.2 for r in ratios)
    assert record(6, ok, "gamma " + ", ".join(f"{n} {g:.3g}" for n, g in gammas.items())
                  + f"; r/xi^2 in [{min(ratios):.3f}, {max(ratios):.3f}]")


def test_c07_equivalence(weights, record):
    bounds = {n: (weights[n][1]["lower"], weights[n][1]["upper"]) for n in PASSING}
    ok = all(0.25 <= lo and hi <= 4 for lo, hi in bounds.values())
    assert record(7, ok, ", ".join(f"{n} [{lo:.3f}, {hi:.3f}]" for n, (lo, hi) in bounds.items()))


def test_c08_uniform_bound(runs, record):
    reps = {n: pr.uniform_xi_bound(runs[n][2]) for n in PASSING}
    ok = all(r["ok"] for r in reps.values())
    assert record(8, ok, ", ".join(f"{n} C={r['C']:.4f} (change {r['relative_change']:.1e})"
                                   for n, r in reps.items()))


def test_c09_cross_solver(runs, record):
    worst_rel, worst_ratio = 0.0, 0.0
    for n in PASSING:
        dr = runs[n][2]
        s = dr.zone.t0
        for frac in (0.1, 0.2, 0.4):
            x = frac * dr.zone.c
            ts = np.linspace(s, s + min(1 / x**2, 40.0), 5)[1:]
            v = pr.volterra_solve(dr, s, [x], ts)
            e = pr.evolve(dr, s, [x], ts, tol=1e-11)
            rel = np.linalg.norm(v.E_samples - e.E_samples, 2, axis=(1, 2)) / np.linalg.norm(e.E_samples, 2, axis=(1, 2))
            worst_rel = max(worst_rel, float(rel.max()))
            worst_ratio = max(worst_ratio, v.info["bound_ratio"])
    ok = worst_rel <= 1e-6 and worst_ratio <= 1 + 1e-6
    assert record(9, ok, f"worst relative gap {worst_rel:.1e}, worst ||E_2|| / exp(int ||R||) {worst_ratio:.4f}")


def test_c10_limit_row(runs, record):
    ok, worst = True, 0.0
    for n in PASSING:
        for s in (1.0, 10.0):
            w2, w3 = pr.limit_row_W(runs[n][2], s), pr.limit_row_W(runs[n][3], s)
            diff = float(np.linalg.norm(w2.row - w3.row))
            ok &= diff <= w2.error + w3.error
            worst = max(worst, diff / (w2.error + w3.error))
    w = pr.limit_row_W(runs["damped_wave"][2], 1.0).row
    dw = float(np.linalg.norm(w - np.array([1, 0])))
    ok &= dw <= 1e-10
    assert record(10, ok, f"max ||W2-W3|| / budget {worst:.2e}; damped wave ||W-(1,0)|| {dw:.1e}")


def test_c11_diffusion(runs, record):
    def gap(n):
        spec = sy.builtin(n)
        return df.diffusion_gap(spec, runs[n][2], df.gaussian_data(spec))

    chain, wave, bad = gap("chain3"), gap("damped_wave"), gap("uncoupled_bad")
    c_exp, w_exp = chain.fit_log.exponent, wave.fit_log.exponent
    part = {
        "chain3 <= -0.45": c_exp <= -0.45,
        "damped wave >= 0.8 steeper than chain3": w_exp <= c_exp - 0.8,
        "uncoupled >= -0.05": bad.fit.exponent >= -0.05,
    }
    detail = (f"chain3 {c_exp:.3f}, damped wave {w_exp:.3f} (needs <= {c_exp - 0.8:.3f}), "
              f"uncoupled {bad.fit.exponent:.3f}; failed: "
              + (", ".join(k for k, v in part.items() if not v) or "none"))
    assert record(11, all(part.values()), detail)


def test_c12_lp_lq(record):
    spec = sy.builtin("damped_wave")
    data = df.gaussian_data(spec)
    e12 = df.lp_lq_experiment(spec, data, 1, 2)["fit"].exponent
    e1i = df.lp_lq_experiment(spec, data, 1, math.inf)["fit"].exponent
    ok = e12 <= -0.18 and e1i <= -0.43
    assert record(12, ok, f"(1,2) {e12:.4f}, (1,inf) {e1i:.4f}")


def test_c13_determinism_and_baseline(tmp_path, record):
    same, drift = True, []
    for cmd in ("check", "diffusion"):
        outs = []
        for rep in range(2):
            out = tmp_path / f"{cmd}{rep}"
            cfg = cli.RunConfig(command=cmd, system="chain3", out=str(out), sensitivity=False,
                                baseline=str(BASELINE))
            code, summary = cli.run(cfg)
            drift += [f["key"] for f in summary["baseline"]["flagged"]]
            outs.append((out / "summary.json").read_bytes())
        same &= outs[0] == outs[1]
    stored = json.loads(BASELINE.read_text())
    covered = sorted(n for n in PASSING if n in stored)
    ok = same and not drift and covered == sorted(PASSING)
    assert record(13, ok, f"byte-identical {same}; drift {drift or 'none'}; baselines for {len(covered)} systems")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
