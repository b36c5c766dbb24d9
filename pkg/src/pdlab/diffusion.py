"""Diffusion phenomenon and decay rates measured on the Fourier side.

All spatial norms are evaluated by Plancherel on a radial Gauss-Legendre
grid, so there is no spatial discretization. ``L^inf`` norms are bounded
through ``||U_hat||_{L^1(dxi)}``, which is an upper bound, not a two-sided
estimate. Constant factors of ``(2 pi)^-n`` cancel in every reported ratio
and exponent and are dropped.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import erfc

from . import diagonalizer as dg
from . import system as sy
from .config import DEFAULT
from .errors import UnsupportedPair
from .fitting import fit_decay
from .propagator import bracket, evolve_batch, limit_row_W, theta_block

# --------------------------------------------------------------------------
# quadrature grid and data


@dataclass
class SpectralGrid:
    nodes: np.ndarray
    weights: np.ndarray
    r_max: float

    @property
    def n(self):
        return self.nodes.shape[1]

    def l2(self, values):
        """sqrt(int |v|^2 dxi); ``values`` has the node axis first."""
        v = np.abs(values) ** 2
        v = v.reshape(v.shape[0], -1).sum(axis=1)
        return math.sqrt(float(self.weights @ v))

    def l1(self, values):
        v = np.abs(values) ** 2
        v = np.sqrt(v.reshape(v.shape[0], -1).sum(axis=1))
        return float(self.weights @ v)


def _panels(r_max, small=1e-3, log_panels=24, lin_panels=7):
    edges = np.concatenate([[0.0], np.geomspace(small, 1.0, log_panels + 1),
                            np.linspace(1.0, r_max, lin_panels + 1)[1:]])
    return edges


def radial_grid(n=1, per_panel=8, r_max=8.0, angles=32):
    """Composite Gauss-Legendre grid on |xi| <= r_max (mirrored for n=1, polar for n=2)."""
    x, w = leggauss(per_panel)
    edges = _panels(r_max)
    r, wr = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        r.append(a + (b - a) * (x + 1) / 2)
        wr.append(w * (b - a) / 2)
    r, wr = np.concatenate(r), np.concatenate(wr)
    if n == 1:
        nodes = np.concatenate([-r[::-1], r])[:, None]
        weights = np.concatenate([wr[::-1], wr])
    elif n == 2:
        th = 2 * np.pi * (np.arange(angles) + 0.5) / angles
        nodes = (r[:, None, None] * np.stack([np.cos(th), np.sin(th)], -1)[None]).reshape(-1, 2)
        weights = (wr * r)[:, None].repeat(angles, 1).ravel() * (2 * np.pi / angles)
    else:
        raise ValueError("radial grids support n = 1 and n = 2")
    return SpectralGrid(nodes, weights, r_max)


@dataclass
class SpectralData:
    """Initial Fourier data xi -> U0_hat(xi) (complex d-vector) with its grid."""

    profile: object
    grid: SpectralGrid
    name: str = "data"
    params: dict = field(default_factory=dict)

    def values(self):
        return self.profile(self.grid.nodes)

    def l2(self):
        return self.grid.l2(self.values())


def gaussian_data(spec, width=1.0, grid=None):
    """U0_hat = exp(-width^2 |xi|^2 / 2) (1, ..., 1) / sqrt(d)."""
    grid = radial_grid(spec.n) if grid is None else grid
    d = spec.d
    vec = np.ones(d) / math.sqrt(d)

    def profile(xi):
        r2 = np.sum(np.asarray(xi, float) ** 2, axis=-1)
        return np.exp(-0.5 * width**2 * r2)[:, None] * vec[None, :]

    return SpectralData(profile, grid, "gaussian", {"width": width})


def gaussian_l2_closed_form(n, width=1.0):
    """int exp(-width^2 |xi|^2) dxi."""
    return (math.sqrt(math.pi) / width) ** n


def gaussian_tail_l2(n, width, r_max):
    """int_{|xi| > r_max} exp(-width^2 |xi|^2) dxi, for the truncated part of the grid."""
    a = width * r_max
    if n == 1:
        return math.sqrt(math.pi) / width * erfc(a)
    if n == 2:
        return math.pi / width**2 * math.exp(-a * a)
    raise ValueError("n must be 1 or 2")


# --------------------------------------------------------------------------
# cutoff

def psi(r):
    """Smooth cutoff: 1 on [0, 1/2], 0 on [1, inf), C-infinity in between."""
    r = np.asarray(r, float)
    g = lambda x: np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
    a, b = g(2 - 2 * r), g(2 * r - 1)
    mid = np.where(a + b > 0, a / np.where(a + b > 0, a + b, 1.0), 0.0)
    return np.where(r <= 0.5, 1.0, np.where(r >= 1.0, 0.0, mid))


def chi(xi, chi_c):
    return psi(np.linalg.norm(np.atleast_2d(xi), axis=-1) / chi_c)


# --------------------------------------------------------------------------
# parabolic model and prepared data

def parabolic_propagate(dr, w0hat, s, t, nodes):
    """Xi_k(t, s, xi) w0_hat(xi) on the nodes; zero wherever w0_hat vanishes."""
    w0hat = np.asarray(w0hat, complex)
    out = np.zeros_like(w0hat)
    live = w0hat != 0
    if live.any():
        out[live] = theta_block(dr, s).Xi(t, nodes[live]) * w0hat[live]
    return out


def preparation_time(spec, dr):
    return max(float(spec.t0), float(dr.zone.t0))


def build_w0(dr, W, data, chi_c=None, t0=None, U_t0=None, tol=DEFAULT):
    """w0_hat = chi(xi) W N_k(t0, xi)^-1 M(t0)^-1 E(t0, 0, xi) U0_hat(xi)."""
    spec = dr.spec
    chi_c = dr.zone.c if chi_c is None else chi_c
    if chi_c > dr.zone.c * (1 + 1e-12):
        raise ValueError(f"cutoff radius {chi_c} exceeds the zone constant {dr.zone.c}")
    t0 = preparation_time(spec, dr) if t0 is None else t0
    nodes = data.grid.nodes
    cut = chi(nodes, chi_c)
    live = cut > 0
    row = np.asarray(W.row if hasattr(W, "row") else W, complex)
    out = np.zeros(nodes.shape[0], dtype=complex)
    if not live.any():
        return out
    if U_t0 is None:
        u0 = data.values()[live][..., None]
        u = evolve_batch(spec, 0.0, nodes[live], [t0], tol.rk_tol, initial=u0, method="magnus", floor=1e-30)[0, ..., 0]
    else:
        u = U_t0[live]
    v = u @ dr.sd.Minv(t0).T
    n = dr.engine.N(t0, nodes[live])
    z = np.linalg.solve(n, v[..., None])[..., 0]
    out[live] = cut[live] * (z @ row)
    return out


# --------------------------------------------------------------------------
# diffusion gap

@dataclass
class GapResult:
    t: np.ndarray
    gap: np.ndarray
    energy: np.ndarray
    model_norm: np.ndarray
    fit: object
    fit_log: object
    info: dict = field(default_factory=dict)

    @property
    def ceiling_ok(self):
        """Triangle inequality, pointwise in t and against 2 sup of both energies."""
        top = 2 * max(self.energy.max(), self.model_norm.max())
        return bool(np.all(self.gap <= self.energy + self.model_norm + 1e-12) and np.all(self.gap <= top + 1e-12))

    def to_dict(self):
        return {"fit": self.fit.to_dict(), "fit_log": self.fit_log.to_dict(), **self.info,
                "ceiling_ok": self.ceiling_ok}


def default_gap_times(t_min=1e2, t_max=1e4):
    ts = 2.0 ** np.arange(math.ceil(math.log2(t_min)), math.floor(math.log2(t_max)) + 1)
    return np.unique(np.concatenate([[t_min], ts, [t_max]]))


def diffusion_gap(spec, dr, data, t_samples=None, chi_c=None, t0=None, window=(1e2, 1e4),
                  W=None, tol=DEFAULT):
    """||U_hat(t) - K(t) Xi_2(t, t0) w0_hat|| / ||U0_hat|| with power-law fits.

    ``dr`` must be an order-2 (or higher) diagonalization of ``spec``.
    """
    t_samples = default_gap_times(*window) if t_samples is None else np.asarray(t_samples, float)
    t0 = preparation_time(spec, dr) if t0 is None else t0
    if t_samples.min() < t0:
        raise ValueError(f"sample times must start at or after t0 = {t0}")
    grid = data.grid
    nodes = grid.nodes
    u0 = data.values()
    norm0 = grid.l2(u0)
    times = np.concatenate([[t0], t_samples])
    U = evolve_batch(spec, 0.0, nodes, times, tol.rk_tol, initial=u0[..., None], method="magnus", floor=1e-30)[..., 0]
    W = limit_row_W(dr, t0, tol=tol) if W is None else W
    w0 = build_w0(dr, W, data, chi_c, t0, U_t0=U[0], tol=tol)
    K = dg.build_K(dr)
    th = theta_block(dr, t0)
    live = w0 != 0
    gaps, energy, model = [], [], []
    for t, u in zip(t_samples, U[1:]):
        approx = np.zeros_like(u)
        if live.any():
            w = th.Xi(t, nodes[live]) * w0[live]
            approx[live] = K(t, nodes[live]) * w[:, None]
        gaps.append(grid.l2(u - approx) / norm0)
        energy.append(grid.l2(u) / norm0)
        model.append(grid.l2(approx) / norm0)
    gaps = np.array(gaps)
    fit = fit_decay(t_samples, gaps, window, False, tol)
    fit_log = fit_decay(t_samples, gaps, window, True, tol)
    info = {"t0": t0, "chi_c": dr.zone.c if chi_c is None else chi_c, "W": [str(c) for c in W.row],
            "W_error": W.error, "data_norm": norm0}
    return GapResult(t_samples, gaps, np.array(energy), np.array(model), fit, fit_log, info)


def diffusion_sensitivity(spec, dr, data, t_samples=None, window=(1e2, 1e4), tol=DEFAULT):
    """Gap exponents for the default run, data prepared at 2 t0, and a halved cutoff."""
    base = diffusion_gap(spec, dr, data, t_samples, window=window, tol=tol)
    t0 = base.info["t0"]
    later = diffusion_gap(spec, dr, data, t_samples, t0=2 * t0, window=window, tol=tol)
    narrow = diffusion_gap(spec, dr, data, t_samples, chi_c=dr.zone.c / 2, window=window, tol=tol)
    return {"base": base.fit_log.exponent, "t0_doubled": later.fit_log.exponent,
            "chi_halved": narrow.fit_log.exponent}


# --------------------------------------------------------------------------
# L^p - L^q rates and high frequencies

_TARGET = {(2, 2): 0.0, (1, 2): 0.5, (1, math.inf): 1.0}


def lp_lq_experiment(spec, data, p, q, t_samples=None, window=(1e2, 1e4), slack=0.07, tol=DEFAULT):
    """Fitted decay exponent of ||U(t)||_{L^q} for Gaussian data.

    L^2 norms come from Plancherel; the L^inf norm is replaced by the
    upper bound ||U_hat(t)||_{L^1(dxi)}.
    """
    key = (p, q)
    if key not in _TARGET:
        raise UnsupportedPair(f"(p, q) = {key} not in {sorted(_TARGET, key=str)}")
    target = 0.0 - spec.n / 2 * _TARGET[key]
    t_samples = default_gap_times(*window) if t_samples is None else np.asarray(t_samples, float)
    grid = data.grid
    u0 = data.values()
    U = evolve_batch(spec, 0.0, grid.nodes, t_samples, tol.rk_tol, initial=u0[..., None], method="magnus", floor=1e-30)[..., 0]
    norm = grid.l1 if q == math.inf else grid.l2
    vals = np.array([norm(u) for u in U])
    fit = fit_decay(t_samples, vals, window, False, tol)
    return {"p": p, "q": "inf" if q == math.inf else q, "target": target,
            "fit": fit, "values": vals, "t": t_samples,
            "ok": bool(fit.exponent <= target + slack),
            "surrogate": "L1(dxi) upper bound" if q == math.inf else "Plancherel"}


def highfreq_decay_check(spec, radii=None, window=(5.0, 40.0), threshold=1e-3, tol=DEFAULT):
    """Exponential rate of ||E(t, 0, xi)||^2 for |xi| >= 1, fitted on ``window``."""
    radii = np.geomspace(1.0, 8.0, 8) if radii is None else np.asarray(radii, float)
    sphere = sy.sphere_grid(spec.n, 8)
    xis = (radii[:, None, None] * sphere[None]).reshape(-1, spec.n)
    ts = np.linspace(window[0], window[1], 12)
    E = evolve_batch(spec, 0.0, xis, ts, tol.rk_tol)
    nrm = np.linalg.norm(E, 2, axis=(-2, -1))
    rates = np.array([-np.polyfit(ts, 2 * np.log(nrm[:, k]), 1)[0] for k in range(xis.shape[0])])
    k = int(np.argmin(rates))
    br = bracket(xis) ** 2
    return {"rates": rates.tolist(), "xi": xis.tolist(), "inf_rate": float(rates[k]),
            "worst_xi": xis[k].tolist(), "threshold": threshold,
            "inf_rate_over_bracket": float(np.min(rates / br)),
            "ok": bool(rates[k] >= threshold)}
