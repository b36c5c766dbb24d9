"""Lyapunov functional for the per-frequency system and decay certification.

    L_eps(t, xi; u) = ||u||^2 + m(xi) sum_{j=1}^{d-1} eps_j Im <B A^{j-1} u, B A^j u>

with ``A = A(t, xi/|xi|)``, ``m(xi) = min(|xi|, 1/|xi|)`` and
``<x, y> = x* y``. The correction is the Hermitian form ``u* H u`` where
``H = m sum_j eps_j (P_j* Q_j - Q_j* P_j) / (2i)``, ``P_j = B A^{j-1}``,
``Q_j = B A^j``, so ``L = u* (I + H) u`` and the equivalence constants are
``1 + lambda_min(H)`` and ``1 + lambda_max(H)`` over the grid.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import system as sy
from .config import DEFAULT
from .errors import NoAdmissibleEpsilon
from .propagator import bracket, evolve, evolve_batch


@dataclass(frozen=True)
class EpsilonWeights:
    """Functional weights eps_1..eps_{d-1} and Kalman scan weights eps_0..eps_{d-1}."""

    eps: tuple
    kalman: tuple = ()
    shape: str = "custom"
    sigma: float = math.nan

    def __post_init__(self):
        if any(e <= 0 for e in self.eps) or any(e <= 0 for e in self.kalman):
            raise ValueError("epsilon weights must be strictly positive")

    @classmethod
    def from_shape(cls, d, shape, sigma):
        if shape == "power":
            eps = tuple(sigma ** j for j in range(1, d))
        elif shape == "uniform":
            eps = (sigma,) * (d - 1)
        else:
            raise ValueError(f"unknown epsilon shape {shape!r}")
        return cls(eps, (1.0,) + eps, shape, sigma)

    def halved(self):
        return EpsilonWeights(tuple(e / 2 for e in self.eps), self.kalman, self.shape, self.sigma / 2)

    def to_dict(self):
        return {"eps": list(self.eps), "kalman": list(self.kalman), "shape": self.shape,
                "sigma": self.sigma}


def _eps_array(eps):
    return np.asarray(eps.eps if isinstance(eps, EpsilonWeights) else eps, float)


def correction_matrix(spec, eps, t, xi):
    """Hermitian H(t, xi) with L_eps(u) = u* (I + H) u; batched over rows of xi."""
    xb = np.atleast_2d(np.asarray(xi, float))
    e = _eps_array(eps)
    d = spec.d
    r = np.linalg.norm(xb, axis=1)
    out = np.zeros((xb.shape[0], d, d), dtype=complex)
    live = r > 0
    if not live.any() or not np.any(e):
        return out
    omega = xb[live] / r[live, None]
    a = sy.symbol_A(spec, t, omega)
    b = spec.B(t)
    m = np.minimum(r[live], 1.0 / r[live])
    p = np.broadcast_to(b, a.shape).astype(complex)
    acc = np.zeros_like(a, dtype=complex)
    for j in range(1, d):
        q = p @ a
        ph = np.conj(np.swapaxes(p, -1, -2))
        qh = np.conj(np.swapaxes(q, -1, -2))
        acc += e[j - 1] * (ph @ q - qh @ p) / 2j
        p = q
    out[live] = m[:, None, None] * acc
    return out


def lyap_value(spec, eps, u, t, xi):
    """L_eps(t, xi; u) as a real number (||u||^2 at xi = 0)."""
    u = np.asarray(u, dtype=complex)
    xi = np.atleast_1d(np.asarray(xi, float))
    b, a = spec.B(t), sy.symbol_A(spec, t, xi)
    val = np.vdot(u, u)
    r = float(np.linalg.norm(xi))
    if r > 0:
        a = a / r
        x = b @ u
        for j, e in enumerate(_eps_array(eps), start=1):
            y = b @ a @ np.linalg.matrix_power(a, j - 1) @ u
            val += min(r, 1 / r) * e * np.vdot(x, y).imag
            x = y
    return float(val.real)


def default_grid(spec, t_grid=None, n_radii=24):
    """(t_grid, xi points): dyadic times and |xi| in {0} U [1e-3, 8] on the sphere."""
    t_grid = sy.default_t_grid(spec.t0) if t_grid is None else np.asarray(t_grid, float)
    radii = np.concatenate([[0.0], np.geomspace(1e-3, 8.0, n_radii)])
    sphere = sy.sphere_grid(spec.n, 8)
    xis = (radii[:, None, None] * sphere[None]).reshape(-1, spec.n)
    return t_grid, xis


def equivalence_constants(spec, eps, grid=None):
    """(lower, upper, worst) with lower ||u||^2 <= L_eps <= upper ||u||^2 on the grid."""
    t_grid, xis = default_grid(spec) if grid is None else grid
    lo, hi, worst, where = 1.0, 1.0, 0.0, None
    for t in t_grid:
        ev = np.linalg.eigvalsh(correction_matrix(spec, eps, t, xis))
        lo = min(lo, 1.0 + float(ev[:, 0].min()))
        hi = max(hi, 1.0 + float(ev[:, -1].max()))
        mag = np.abs(ev).max(axis=1)
        k = int(np.argmax(mag))
        if mag[k] > worst:
            worst, where = float(mag[k]), {"t": float(t), "xi": xis[k].tolist()}
    return lo, hi, {"max_correction": worst, "point": where}


def find_epsilon(spec, grid=None, tol=DEFAULT, max_halvings=60, pointwise_halvings=12):
    """Admissible weights: the correction stays below 3/4 ||u||^2 on the grid.

    Both shapes eps_j = sigma^j and eps_j = sigma are searched by halving
    sigma from 1. Once a shape is admissible, sigma keeps halving (at most
    ``pointwise_halvings`` times) until the pointwise rate of L is positive
    on the grid as well. Shapes reaching that are preferred, then the
    larger sigma; ties go to the power shape.
    """
    grid = default_grid(spec) if grid is None else grid
    tried = {}
    cands = []
    for shape in ("power", "uniform"):
        sigma = 1.0
        for _ in range(max_halvings):
            w = EpsilonWeights.from_shape(spec.d, shape, sigma)
            lo, hi, info = equivalence_constants(spec, w, grid)
            if info["max_correction"] <= tol.equivalence_bound:
                break
            sigma /= 2
        else:
            tried[shape] = {"sigma": None, **info}
            continue
        first = (w, lo, hi, info)
        rate, where = pointwise_infimum(spec, w, grid)
        for _ in range(pointwise_halvings):
            if rate > 0:
                break
            w = EpsilonWeights.from_shape(spec.d, shape, w.sigma / 2)
            rate, where = pointwise_infimum(spec, w, grid)
        if rate > 0:
            lo, hi, info = equivalence_constants(spec, w, grid)
        else:
            w, lo, hi, info = first
            rate, where = pointwise_infimum(spec, w, grid)
        tried[shape] = {"sigma": w.sigma, "lower": lo, "upper": hi, "pointwise_rate": rate,
                        "pointwise_point": where, **info}
        cands.append((rate > 0, w.sigma, shape == "power", w, lo, hi, info, rate))
    if not cands:
        raise NoAdmissibleEpsilon("no admissible epsilon for either shape", worst=info["point"])
    _, _, _, w, lo, hi, info, rate = max(cands, key=lambda c: c[:3])
    return w, {"lower": lo, "upper": hi, "ok": bool(lo >= 0.25 and hi <= 4.0),
               "worst": info["point"], "pointwise_rate": rate, "shapes": tried}


# --------------------------------------------------------------------------
# decay certification

@dataclass
class DecayCertificate:
    gamma: float
    ok: bool
    C: float
    per_xi: list = field(default_factory=list)
    worst: dict = field(default_factory=dict)
    pointwise: dict = field(default_factory=dict)

    def to_dict(self):
        return {"gamma": self.gamma, "ok": self.ok, "C": self.C, "worst": self.worst,
                "pointwise": self.pointwise}


def decay_trajectories(spec, xis=None, t_samples=None, s=None, tol=DEFAULT):
    """Fundamental matrices on a frequency grid; columns are the basis data."""
    s = spec.t0 if s is None else float(s)
    if xis is None:
        xis = np.geomspace(1e-2, 4.0, 12)[:, None] * np.ones((1, spec.n)) / math.sqrt(spec.n)
    xis = np.atleast_2d(np.asarray(xis, float))
    if t_samples is None:
        t_samples = s * 2.0 ** np.arange(1, 64)
        t_samples = t_samples[t_samples <= 512.0]
    E = evolve_batch(spec, s, xis, t_samples, tol.rk_tol, floor=1e-30)
    return {"s": s, "xi": xis, "t": np.asarray(t_samples, float), "E": E}


def _lyap_series(spec, eps, traj, k):
    """L at t = s and at every sample for each column of E(., xi_k)."""
    s, t = traj["s"], traj["t"]
    xi = traj["xi"][k]
    d = spec.d
    L0 = np.real(np.einsum("ii->i", np.eye(d) + correction_matrix(spec, eps, s, xi)[0]))
    Ls = []
    for tt, E in zip(t, traj["E"][:, k]):
        K = np.eye(d) + correction_matrix(spec, eps, tt, xi)[0]
        Ls.append(np.real(np.einsum("ai,ab,bi->i", E.conj(), K, E)))
    return L0, np.array(Ls)


def certify_decay(spec, eps, trajectories, tol=DEFAULT, equivalence=None):
    """Largest gamma with L(t) <= L(s) exp(-gamma [xi]^2 (t - s)) on all samples."""
    s, t = trajectories["s"], trajectories["t"]
    gamma, worst = math.inf, {}
    per_xi = []
    for k, xi in enumerate(trajectories["xi"]):
        L0, Ls = _lyap_series(spec, eps, trajectories, k)
        br2 = float(bracket(xi)) ** 2
        with np.errstate(divide="ignore"):
            ratio = np.where(Ls > 0, -np.log(np.maximum(Ls, 1e-300) / L0) / (br2 * (t - s)[:, None]),
                             math.inf)
        g = float(ratio.min())
        per_xi.append({"xi": xi.tolist(), "gamma": g})
        if g < gamma:
            i, j = np.unravel_index(int(np.argmin(ratio)), ratio.shape)
            gamma, worst = g, {"xi": xi.tolist(), "t": float(t[i]), "column": int(j)}
    gamma = max(gamma, 0.0)
    lo, hi = (None, None) if equivalence is None else equivalence
    C = hi / lo if lo else math.nan
    return DecayCertificate(gamma, bool(gamma > tol.gamma_floor), C, per_xi, worst)


def pointwise_rate(spec, eps, t, xi):
    """Exact best gamma in dL/dt <= -gamma [xi]^2 L at (t, xi), all u at once.

    With K = I + H and G the generator, dL/dt = u* (G* K + K G + K') u, so
    the rate is the smallest generalized eigenvalue of -(G* K + K G + K')
    against K.
    """
    xi = np.atleast_1d(np.asarray(xi, float))
    d = spec.d
    K = np.eye(d) + correction_matrix(spec, eps, t, xi)[0]
    h = sy.fd_step(t, 1)
    dK = (correction_matrix(spec, eps, t + h, xi)[0] - correction_matrix(spec, eps, t - h, xi)[0]) / (2 * h)
    G = spec.generator(t, xi)
    S = -(G.conj().T @ K + K @ G + dK)
    S = 0.5 * (S + S.conj().T)
    try:
        lam = scipy.linalg.eigh(S, K, eigvals_only=True)[0]
    except np.linalg.LinAlgError:
        return -math.inf  # L is not a norm here

    return float(lam / float(bracket(xi)) ** 2)


def derivative_spot_check(spec, eps, count=100, seed=0, slack=1e-4, t_hi=100.0):
    """Compare d/dt L along the flow (finite differences) with the pointwise bound."""
    rng = np.random.default_rng(seed)
    d, n = spec.d, spec.n
    worst_excess = -math.inf
    fails = 0
    for _ in range(count):
        t = float(spec.t0 + rng.uniform(0, t_hi - spec.t0))
        omega = rng.normal(size=n)
        xi = omega / np.linalg.norm(omega) * 10 ** rng.uniform(-2, math.log10(4))
        u = rng.normal(size=d) + 1j * rng.normal(size=d)
        h = 1e-3
        E = evolve(spec, t, xi, [t, t + h, t + 2 * h], tol=1e-12).E_samples
        L = [lyap_value(spec, eps, e @ u, tt, xi) for e, tt in zip(E, (t, t + h, t + 2 * h))]
        dL = (-3 * L[0] + 4 * L[1] - L[2]) / (2 * h)
        bound = -pointwise_rate(spec, eps, t, xi) * float(bracket(xi)) ** 2 * L[0]
        excess = (dL - bound) / L[0]
        worst_excess = max(worst_excess, excess)
        fails += excess > slack
    return {"count": count, "failures": int(fails), "worst_excess": float(worst_excess),
            "ok": fails == 0}


def pointwise_infimum(spec, eps, grid=None):
    t_grid, xis = default_grid(spec) if grid is None else grid
    best, where = math.inf, None
    for t in t_grid:
        for xi in xis:
            if not np.any(xi):
                continue
            g = pointwise_rate(spec, eps, t, xi)
            if g < best:
                best, where = g, {"t": float(t), "xi": xi.tolist()}
    return best, where


def norm_decay_rate(traj, k, window):
    """-d/dt log ||E(t, s, xi_k)||^2 fitted over samples inside ``window``."""
    t = traj["t"]
    nrm = np.linalg.norm(traj["E"][:, k], 2, axis=(-2, -1))
    keep = (t >= window[0]) & (t <= window[1]) & (nrm > 0)
    slope = np.polyfit(t[keep], 2 * np.log(nrm[keep]), 1)[0]
    return -float(slope)
