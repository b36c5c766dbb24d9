"""Fundamental solutions per frequency.

* :func:`integrate` - embedded Dormand-Prince 5(4) pair with PI step control,
  vectorized over a batch of frequencies.
* :func:`integrate_magnus` - fourth-order Magnus steps with step doubling;
  the step follows the time variation of the coefficients, not |xi|, which
  suits long sweeps over many frequencies.
* :func:`evolve` / :func:`evolve_batch` - the original system or the
  transformed one (pass a :class:`~pdlab.diagonalizer.DiagResult`).
* :class:`ThetaBlock` - the block-diagonal model: the scalar multiplier
  ``Xi`` and the damped block.
* :func:`volterra_solve` - Picard iteration for the full transformed
  propagator around the block-diagonal one.
* :func:`uniform_xi_bound`, :func:`limit_row_W`.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as C
import scipy.linalg
from scipy.integrate import quad_vec

from . import matkernel as mk
from . import symbols as sb
from .config import DEFAULT
from .errors import (NonContraction, NumericalError, QuadratureFailure, StepUnderflow,
                     TailNotIntegrable, ToleranceUnreachable)

# Dormand-Prince 5(4)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4
_A_ROWS = [np.array(row) for row in _A]


def bracket(xi):
    """[xi] = |xi| / sqrt(1 + |xi|^2)."""
    r = np.linalg.norm(np.atleast_1d(xi), axis=-1)
    return r / np.sqrt(1.0 + r * r)


def integrate(gen, t_start, y0, t_samples, tol=DEFAULT.rk_tol, max_steps=500_000, floor=None):
    """Integrate dY/dt = G(t) Y for a batch; returns Y at every sample time.

    ``gen(t)`` returns G of shape (m, d, d); ``y0`` has shape (m, d, c).
    The error norm is the RMS of the scaled local error per batch member,
    maximized over the batch. The absolute part of the scale is ``tol``
    times the member's largest entry, so accuracy is relative to the size
    of the solution even after it has decayed (the system is linear). Members whose
    entries all fall below ``floor`` are set to zero; this is only sound for
    dissipative generators, where norms never grow back.
    """
    if not (1e-12 <= tol <= 1e-4):
        raise ToleranceUnreachable(f"tolerance {tol:g} outside [1e-12, 1e-4]")
    t_samples = np.asarray(t_samples, float)
    if t_samples.size and (np.any(np.diff(t_samples) < 0) or t_samples[0] < t_start):
        raise ValueError("sample times must be increasing and start at or after t_start")
    y = np.array(y0, dtype=complex)
    out = np.zeros((t_samples.size,) + y.shape, dtype=complex)
    idx = 0
    while idx < t_samples.size and t_samples[idx] <= t_start:
        out[idx] = y
        idx += 1
    if idx == t_samples.size:
        return out
    t = float(t_start)
    k1 = gen(t) @ y
    span = t_samples[-1] - t
    d0 = np.abs(y).max()
    d1 = np.abs(k1).max()
    h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-3
    h = min(h, span, 1.0)
    err_prev = 1e-4
    steps = 0
    alive = np.ones(y.shape[0], dtype=bool)
    while idx < t_samples.size:
        target = t_samples[idx]
        h_free = h
        last = h >= target - t
        if last:
            h = target - t
        ks = np.empty((7,) + y.shape, dtype=complex)
        ks[0] = k1
        for i in range(1, 7):
            yi = y + h * np.tensordot(_A_ROWS[i], ks[:i], axes=1)
            ks[i] = gen(t + _C[i] * h) @ yi
        y5 = y + h * np.tensordot(_B5, ks, axes=1)
        e = h * np.tensordot(_E, ks, axes=1)
        mag = np.maximum(np.abs(y), np.abs(y5))
        top = mag.reshape(mag.shape[0], -1).max(axis=1).reshape((-1,) + (1,) * (y.ndim - 1))
        sc = tol * (top + mag) + 1e-300
        per = np.sqrt(np.mean(np.abs(e / sc) ** 2, axis=tuple(range(1, y.ndim))))
        err = float(per.max())
        steps += 1
        if steps > max_steps:
            raise ToleranceUnreachable(f"step cap {max_steps} reached at t = {t:g}")
        if err <= 1.0:
            t = target if last else t + h
            y = y5
            k1 = ks[6]
            while idx < t_samples.size and t_samples[idx] <= t:
                out[idx] = y
                idx += 1
            if floor is not None:
                dead = np.abs(y).reshape(y.shape[0], -1).max(axis=1) < floor
                if np.any(dead & alive):
                    alive &= ~dead
                    y[dead] = 0.0
                    k1[dead] = 0.0
                if not alive.any():
                    break
            fac = 0.9 * max(err, 1e-10) ** (-0.7 / 5) * err_prev ** (0.4 / 5)
            err_prev = max(err, 1e-4)
            h = (h_free if last else h) * min(5.0, max(0.2, fac))
        else:
            h = h * max(0.2, 0.9 * err ** (-0.2))
        if h < 1e-14 * (1.0 + abs(t)):
            raise StepUnderflow(f"step size {h:.2e} underflow at t = {t:g}")
    return out


_GAUSS = (0.5 - math.sqrt(3) / 6, 0.5 + math.sqrt(3) / 6)

_PADE13 = (64764752532480000., 32382376266240000., 7771770303897600., 1187353796428800.,
           129060195264000., 10559470521600., 670442572800., 33522128640., 1323241920.,
           40840800., 960960., 16380., 182., 1.)


def expm_batch(a):
    """Matrix exponential over the leading axes of ``a`` (Pade 13, scaling and squaring).

    Vectorised counterpart of ``scipy.linalg.expm`` for large batches of small
    matrices; each member gets its own scaling exponent.
    """
    a = np.asarray(a, dtype=complex)
    if a.ndim == 2:
        return scipy.linalg.expm(a)
    nrm = np.abs(a).sum(axis=-2).max(axis=-1)
    s = np.maximum(0, np.ceil(np.log2(np.maximum(nrm, 1e-300) / 5.371920351148152))).astype(int)
    a = a / (2.0 ** s)[..., None, None]
    b = _PADE13
    eye = np.broadcast_to(np.eye(a.shape[-1]), a.shape)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2) + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * eye)
    v = a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * eye
    r = np.linalg.solve(v - u, v + u)
    for k in range(int(s.max(initial=0))):
        sq = s > k
        r[sq] = r[sq] @ r[sq]
    return r


def _magnus_step(gen, t, h):
    g1, g2 = gen(t + _GAUSS[0] * h), gen(t + _GAUSS[1] * h)
    omega = 0.5 * h * (g1 + g2) + (math.sqrt(3) / 12) * h * h * (g2 @ g1 - g1 @ g2)
    return expm_batch(omega)


def integrate_magnus(gen, t_start, y0, t_samples, tol=DEFAULT.rk_tol, constant=False,
                     max_steps=200_000, floor=None):
    """dY/dt = G(t) Y by fourth-order Magnus steps; same contract as :func:`integrate`.

    For a constant generator the propagator ``expm(G (t - s))`` is applied
    sample to sample. Otherwise each step is compared with two half steps
    and the scaled difference (same scale as :func:`integrate`) drives the
    step size. Members whose largest entry drops below ``floor`` are set
    to zero and leave the batch.
    """
    if not (1e-12 <= tol <= 1e-4):
        raise ToleranceUnreachable(f"tolerance {tol:g} outside [1e-12, 1e-4]")
    t_samples = np.asarray(t_samples, float)
    if t_samples.size and (np.any(np.diff(t_samples) < 0) or t_samples[0] < t_start):
        raise ValueError("sample times must be increasing and start at or after t_start")
    y = np.array(y0, dtype=complex)
    out = np.zeros((t_samples.size,) + y.shape, dtype=complex)
    t = float(t_start)
    if constant:
        g = gen(t)
        for i, ts in enumerate(t_samples):
            if ts > t:
                y = expm_batch(g * (ts - t)) @ y
                t = float(ts)
            out[i] = y
        return out
    h = 0.05 * (1.0 + abs(t))
    steps = 0
    live = np.arange(y.shape[0])
    sub = lambda tt: gen(tt)[live]
    for i, target in enumerate(t_samples):
        while t < target and live.size:
            last = h >= target - t
            hh = target - t if last else h
            yl = y[live]
            big = _magnus_step(sub, t, hh) @ yl
            half = _magnus_step(sub, t, hh / 2)
            small = _magnus_step(sub, t + hh / 2, hh / 2) @ (half @ yl)
            mag = np.maximum(np.abs(big), np.abs(small))
            top = mag.reshape(mag.shape[0], -1).max(axis=1).reshape((-1,) + (1,) * (y.ndim - 1))
            e = (small - big) / 15.0
            per = np.sqrt(np.mean(np.abs(e / (tol * (top + mag) + 1e-300)) ** 2,
                                  axis=tuple(range(1, y.ndim))))
            err = float(per.max())
            steps += 1
            if steps > max_steps:
                raise ToleranceUnreachable(f"step cap {max_steps} reached at t = {t:g}")
            if err <= 1.0:
                t = float(target) if last else t + hh
                y[live] = small
                if floor is not None:
                    dead = np.abs(small).reshape(live.size, -1).max(axis=1) < floor
                    if dead.any():
                        y[live[dead]] = 0.0
                        live = live[~dead]
                if not last:
                    h = hh * min(4.0, max(0.2, 0.9 * max(err, 1e-12) ** -0.2))
            else:
                h = hh * max(0.2, 0.9 * err ** -0.2)
            if h < 1e-14 * (1.0 + abs(t)):
                raise StepUnderflow(f"step size {h:.2e} underflow at t = {t:g}")
        out[i] = y
    return out


# --------------------------------------------------------------------------
# trajectories

@dataclass
class FrequencyTrajectory:
    xi: np.ndarray
    s: float
    t_samples: np.ndarray
    E_samples: np.ndarray
    norms: np.ndarray = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.norms is None:
            self.norms = mk.opnorm(self.E_samples)

    def at(self, t):
        k = int(np.searchsorted(self.t_samples, t))
        if k >= self.t_samples.size or not np.isclose(self.t_samples[k], t, rtol=1e-14, atol=0):
            raise KeyError(f"time {t} not among samples")
        return self.E_samples[k]


def _is_diag_result(system):
    return hasattr(system, "engine") and hasattr(system, "sd")


def generator_for(system, xi, xi_zero=False):
    """Callable t -> generator batch for the original or transformed system."""
    xi = np.atleast_2d(np.asarray(xi, float))
    if _is_diag_result(system):
        spec = system.spec
        fn = lambda t: np.broadcast_to(system.generator(t, xi, xi_zero), (xi.shape[0], spec.d, spec.d))
    else:
        spec = system
        fn = lambda t: spec.generator(t, xi)
    if spec.is_constant:
        g = np.array(fn(spec.t0))
        return lambda t: g
    return fn


def evolve(system, s, xi, t_samples, tol=DEFAULT.rk_tol, verify_cocycle=False, seed=0,
           floor=None, xi_zero=False):
    """Fundamental matrix E(t, s, xi) at ``t_samples``."""
    xi = np.atleast_1d(np.asarray(xi, float))
    spec = system.spec if _is_diag_result(system) else system
    t_samples = np.asarray(t_samples, float)
    gen = generator_for(system, xi[None, :], xi_zero)
    y0 = np.eye(spec.d, dtype=complex)[None]
    E = integrate(gen, s, y0, t_samples, tol, floor=floor)[:, 0]
    traj = FrequencyTrajectory(xi, float(s), t_samples, E)
    if verify_cocycle and t_samples.size and t_samples[-1] > s:
        rng = np.random.default_rng(seed)
        t2 = float(t_samples[-1])
        worst = 0.0
        for t1 in np.sort(rng.uniform(s, t2, 3)):
            e1 = integrate(gen, s, y0, [t1], tol, floor=floor)[0, 0]
            e21 = integrate(gen, t1, y0, [t2], tol, floor=floor)[0, 0]
            worst = max(worst, float(np.linalg.norm(e21 @ e1 - E[-1], 2)))
        traj.info["cocycle_error"] = worst
        traj.info["cocycle_ok"] = worst <= 10 * tol * max(1.0, float(traj.norms.max()))
    return traj


def _bands(radii, ratio, merge_below=1.0):
    """Group frequencies so each batch shares a sensible step size.

    Below ``merge_below`` the step is limited by stability of the damped
    modes, not by |xi|, so those frequencies form a single batch.
    """
    order = np.argsort(radii, kind="stable")
    low = [int(i) for i in order if radii[i] <= merge_below]
    groups = [low] if low else []
    cur, lo = [], None
    for i in order:
        if radii[i] <= merge_below:
            continue
        r = radii[i]
        if cur and r > lo * ratio:
            groups.append(cur)
            cur = []
        if not cur:
            lo = r
        cur.append(int(i))
    if cur:
        groups.append(cur)
    return groups


def evolve_batch(system, s, xis, t_samples, tol=DEFAULT.rk_tol, band_ratio=4.0, floor=None,
                 initial=None, method="rk"):
    """E(t, s, xi) for many frequencies, integrated band by band.

    Returns an array of shape (len(t_samples), m, d, c) where c = d, or
    the width of ``initial`` (m, d, c) when data vectors are propagated
    instead of the identity. ``method="magnus"`` integrates the whole batch
    with :func:`integrate_magnus` in one batch (no bands).
    """
    spec = system.spec if _is_diag_result(system) else system
    xis = np.atleast_2d(np.asarray(xis, float))
    m = xis.shape[0]
    if initial is None:
        y_all = np.broadcast_to(np.eye(spec.d, dtype=complex), (m, spec.d, spec.d))
    else:
        y_all = np.asarray(initial, dtype=complex)
    if method == "magnus":
        gen = generator_for(system, xis)
        return integrate_magnus(gen, s, y_all, t_samples, tol, constant=spec.is_constant, floor=floor)
    if method != "rk":
        raise ValueError(f"unknown method {method!r}")
    out = np.zeros((len(t_samples),) + y_all.shape, dtype=complex)
    radii = np.linalg.norm(xis, axis=1)
    for grp in _bands(radii, band_ratio):
        gen = generator_for(system, xis[grp])
        out[:, grp] = integrate(gen, s, y_all[grp], t_samples, tol, floor=floor)
    return out


# --------------------------------------------------------------------------
# block-diagonal model

class ThetaBlock:
    """Theta_k = diag(Xi_k, damped block) for a fixed start time ``s``.

    ``Xi(t, xi) = exp(int_s^t F_k[0, 0](theta, xi) dtheta)``. The t-integrals
    of the coefficients of F_k[0, 0] are exact for constant systems.
    Otherwise they use 16-point Gauss-Legendre on panels [a, 2a], checked
    against 10 points, with adaptive vector quadrature as the fallback.
    """

    def __init__(self, dr, s, tol=DEFAULT):
        self.dr, self.s, self.tol = dr, float(s), tol
        self.keys = [k for k, c in dr.F.terms.items() if np.any(c(max(s, dr.spec.t0))[0, 0])
                     or not c.is_constant]
        self._cache = {self.s: np.zeros(len(self.keys), dtype=complex)}

    def _coeffs(self, theta):
        return np.array([self.dr.F.terms[k](theta)[0, 0] for k in self.keys], dtype=complex)

    def _interval(self, a, b):
        if self.dr.spec.is_constant:
            return self._coeffs(a) * (b - a)
        pts = [a]
        while pts[-1] * 2 < b:
            pts.append(max(pts[-1] * 2, pts[-1] + 1.0))
        pts.append(b)
        total = np.zeros(len(self.keys), dtype=complex)
        for lo, hi in zip(pts[:-1], pts[1:]):
            val = self._gauss(lo, hi, 16)
            err = float(np.abs(val - self._gauss(lo, hi, 10)).max())
            if not np.all(np.isfinite(val)) or err > self.tol.quad_tol * max(1.0, np.abs(val).max()):
                val, err = quad_vec(self._coeffs, lo, hi, epsabs=1e-13, epsrel=self.tol.quad_tol, limit=200)
                if not np.all(np.isfinite(val)) or err > 1e-8 * max(1.0, np.abs(val).max()):
                    raise QuadratureFailure(f"quadrature on [{lo:g}, {hi:g}] error {err:.2e}")
            total = total + val
        return total

    def _gauss(self, lo, hi, m):
        x, w = np.polynomial.legendre.leggauss(m)
        th = lo + (hi - lo) * (x + 1) / 2
        return (hi - lo) / 2 * (w @ np.array([self._coeffs(t) for t in th]))

    def integrals(self, t):
        """Vector of int_s^t coeff_key[0, 0], one entry per key."""
        t = float(t)
        if t in self._cache:
            return self._cache[t]
        if t < self.s:
            raise ValueError("t must be >= s")
        prev = max(k for k in self._cache if k <= t)
        val = self._cache[prev] + self._interval(prev, t)
        self._cache[t] = val
        return val

    def log_Xi(self, t, xi):
        xb = np.atleast_2d(np.asarray(xi, float))
        ints = self.integrals(t)
        out = np.zeros(xb.shape[0], dtype=complex)
        for (alpha, _), v in zip(self.keys, ints):
            out += sb.monomial_values(xb, alpha) * v
        return out

    def Xi(self, t, xi):
        single = np.asarray(xi).ndim <= 1
        val = np.exp(self.log_Xi(t, xi))
        return val[0] if single else val

    def damped(self, t_samples, xi, tol=DEFAULT.rk_tol):
        """Damped-block propagator at ``t_samples``: shape (T, m, d-1, d-1)."""
        dr = self.dr
        xb = np.atleast_2d(np.asarray(xi, float))
        d = dr.spec.d

        def gen(t):
            g = -dr.engine.state(t).D[0][1:, 1:] + dr.engine.state(t).F.evaluate(xb, d)[..., 1:, 1:]
            return np.broadcast_to(g, (xb.shape[0], d - 1, d - 1))

        if dr.spec.is_constant:
            g0 = np.array(gen(self.s))
            gen = lambda t: g0
        y0 = np.broadcast_to(np.eye(d - 1, dtype=complex), (xb.shape[0], d - 1, d - 1))
        return integrate(gen, self.s, y0, t_samples, tol)

    def decay_constant(self, t_samples, xi):
        """Fitted c~ in ||damped(t, s)|| <= C exp(-c~ (t - s))."""
        t_samples = np.asarray(t_samples, float)
        nrm = mk.opnorm(self.damped(t_samples, xi)).max(axis=1)
        keep = nrm > 1e-250
        slope, icpt, _ = sb.fit_line(t_samples[keep] - self.s, np.log(nrm[keep]))
        return -slope, math.exp(icpt)


def theta_block(dr, s, tol=DEFAULT):
    return ThetaBlock(dr, s, tol)


# --------------------------------------------------------------------------
# Volterra equation

def _cheb_lobatto(N):
    x = np.cos(np.pi * np.arange(N, -1, -1) / N)
    V = C.chebvander(x, N)
    Q = np.zeros((N + 1, N + 1))
    for k in range(N + 1):
        e = np.zeros(N + 1)
        e[k] = 1.0
        Q[:, k] = C.chebval(x, C.chebint(e, lbnd=-1))
    return x, Q @ np.linalg.inv(V)


def _panel_breaks(s, t_samples, length):
    pts = {float(s)} | {float(t) for t in t_samples}
    pts = sorted(pts)
    out = [pts[0]]
    for b in pts[1:]:
        a = out[-1]
        k = max(1, int(math.ceil((b - a) / length - 1e-12)))
        out.extend(a + (b - a) * np.arange(1, k + 1) / k)
        out[-1] = b
    return np.array(out)


def volterra_solve(dr, s, xi, t_samples, nodes=16, panel=1.0, tol=DEFAULT):
    """E_k(t, s, xi) from E = Theta + int Theta R E by Picard iteration.

    The interval is cut into panels of length <= ``panel`` with
    Chebyshev-Lobatto nodes. Writing J(t) for the integral term,
    J(t) = Theta(t, a) [J(a) + int_a^t Theta(a, tau) R E dtau] on a panel
    [a, b], so only short-range inverses of Theta are ever formed. For
    time-dependent systems the block generator is replaced on each panel by
    its Chebyshev interpolant through the same nodes.
    """
    xi = np.atleast_1d(np.asarray(xi, float))
    spec = dr.spec
    d = spec.d
    t_samples = np.asarray(t_samples, float)
    brk = _panel_breaks(s, t_samples, panel)
    x, S = _cheb_lobatto(nodes)
    P = brk.size - 1
    eng = dr.engine

    def g0(t):
        st = eng.state(t)
        return -st.D[0] + st.F.evaluate(xi, d)

    theta_loc = np.zeros((P, nodes + 1, d, d), dtype=complex)
    R = np.zeros_like(theta_loc)
    taus = np.zeros((P, nodes + 1))
    for p in range(P):
        a, b = brk[p], brk[p + 1]
        tau = a + (b - a) * (x + 1) / 2
        tau[0], tau[-1] = a, b
        taus[p] = tau
        if spec.is_constant:
            g = g0(a)
            theta_loc[p] = [mk.expm(g * (tt - a)) for tt in tau]
        else:
            # the block generator is smooth on a short panel; interpolate it on the nodes
            coef = C.chebfit(x, np.array([g0(tt) for tt in tau]).reshape(nodes + 1, -1), nodes)
            gen = lambda t, a=a, b=b, coef=coef: C.chebval(2 * (t - a) / (b - a) - 1, coef).reshape(1, d, d)
            theta_loc[p] = integrate(gen, a, np.eye(d, dtype=complex)[None], tau, tol=1e-12)[:, 0]
        R[p] = [eng.R(tt, xi) for tt in tau]
    theta_inv = np.linalg.inv(theta_loc)
    theta_start = np.zeros((P, d, d), dtype=complex)
    theta_start[0] = np.eye(d)
    for p in range(1, P):
        theta_start[p] = theta_loc[p - 1, -1] @ theta_start[p - 1]
    theta_s = theta_loc @ theta_start[:, None]
    scale = (brk[1:] - brk[:-1]) / 2

    # a-priori bound exp(int ||R||)
    rn = mk.opnorm(R)
    cum = np.zeros((P, nodes + 1))
    acc = 0.0
    for p in range(P):
        cum[p] = acc + scale[p] * (S @ rn[p])
        acc = cum[p, -1]

    E = theta_s.copy()
    diffs = []
    for it in range(1, tol.volterra_max_iter + 1):
        Jn = np.zeros_like(E)
        Jcur = np.zeros((d, d), dtype=complex)
        for p in range(P):
            g = theta_inv[p] @ R[p] @ E[p]
            c = scale[p] * np.einsum("jk,kab->jab", S, g)
            Jn[p] = theta_loc[p] @ (Jcur + c)
            Jcur = Jn[p, -1]
        new = theta_s + Jn
        diff = float(np.abs(new - E).max() / max(1.0, np.abs(new).max()))
        diffs.append(diff)
        E = new
        if diff <= tol.volterra_tol:
            break
        if it >= 4 and diffs[-1] > diffs[-2] > diffs[-3]:
            raise NonContraction(f"Picard differences growing ({diff:.2e})",
                                 factor=diffs[-1] / diffs[-2])
    else:
        raise NonContraction(f"no convergence after {tol.volterra_max_iter} iterations (last {diffs[-1]:.2e})",
                             factor=diffs[-1] / diffs[-2] if len(diffs) > 1 else None)
    factor = diffs[-1] / diffs[-2] if len(diffs) > 1 and diffs[-2] > 0 else 0.0

    end_times = brk[1:]
    pick = [int(np.flatnonzero(np.isclose(end_times, t, rtol=0, atol=1e-12 * (1 + t)))[0])
            if t > s else -1 for t in t_samples]
    out = np.array([E[p, -1] if p >= 0 else np.eye(d) for p in pick])
    bound = np.array([math.exp(cum[p, -1]) if p >= 0 else 1.0 for p in pick])
    traj = FrequencyTrajectory(xi, float(s), t_samples, out)
    traj.info.update({
        "iterations": len(diffs), "contraction_factor": factor, "last_difference": diffs[-1],
        "int_R": [float(math.log(b)) for b in bound],
        "bound_ratio": float(np.max(mk.opnorm(out) / bound)),
        "panels": P,
    })
    return traj


# --------------------------------------------------------------------------
# uniform bound and limit row

def _transformed_from_original(dr, s, t, E, xi):
    """E_k(t, s) = N(t)^-1 M(t)^-1 E(t, s) M(s) N(s) for a batch of xi."""
    eng = dr.engine
    d = dr.spec.d
    n_t = eng.state(t).N.evaluate(xi, d)
    n_s = eng.state(s).N.evaluate(xi, d)
    m_t, minv_t = dr.sd.M(t), dr.sd.Minv(t)
    m_s = dr.sd.M(s)
    return np.linalg.solve(n_t, minv_t @ E @ m_s @ n_s)


def _xi_bound_once(dr, delta, s, n_xi, n_t, tol):
    spec = dr.spec
    c = dr.zone.c
    t_hi_all = min(tol.t_max, delta / (c * 1e-3) ** 2)
    radii = np.concatenate([[0.0], np.geomspace(c * 1e-3, c, n_xi)])
    sphere = sb_sphere(spec.n)
    worst = 0.0
    where = None
    theta = ThetaBlock(dr, s, tol)
    for w in sphere:
        xis = radii[:, None] * w[None, :]
        for r, xv in zip(radii, xis):
            t_hi = t_hi_all if r == 0 else min(tol.t_max, delta / r ** 2)
            if t_hi <= s:
                continue
            ts = np.geomspace(s, t_hi, n_t + 1)[1:]
            Es = evolve_batch(spec, s, xv[None], ts, tol.rk_tol, method="magnus")[:, 0]
            for t, E in zip(ts, Es):
                ek = _transformed_from_original(dr, s, t, E, xv)
                ratio = float(np.linalg.norm(ek, 2) / abs(theta.Xi(t, xv)))
                if ratio > worst:
                    worst, where = ratio, (float(t), xv.tolist())
    return worst, where


def sb_sphere(n):
    from .system import sphere_grid

    return sphere_grid(n, 8)


def uniform_xi_bound(dr, delta=1.0, s=None, n_xi=8, n_t=8, tol=DEFAULT):
    """sup ||E_k(t, s, xi)|| / |Xi_k(t, s, xi)| over t |xi|^2 <= delta.

    ``E_k`` is obtained by conjugating the directly integrated original
    propagator, so this check does not reuse the Volterra solver. Passes
    if the sup is finite and grows by at most 10% under 2x refinement.
    """
    s = dr.zone.t0 if s is None else float(s)
    coarse, w1 = _xi_bound_once(dr, delta, s, n_xi, n_t, tol)
    fine, w2 = _xi_bound_once(dr, delta, s, 2 * n_xi, 2 * n_t, tol)
    change = abs(fine - coarse) / coarse
    return {"C": fine, "C_coarse": coarse, "relative_change": change, "worst_point": w2,
            "delta": delta, "s": s, "ok": bool(np.isfinite(fine) and change <= 0.10)}


@dataclass
class LimitRow:
    row: np.ndarray
    error: float
    tail: float
    tail_order: float
    T: float


def limit_row_W(dr, s, T=None, tol=DEFAULT):
    """First row of E_k(T, s, 0) plus a tail error estimate.

    The tail int_T^inf ||R(theta, 0)|| is extrapolated from a power-law fit
    on [T/10, T]; the row moves by at most ||row|| (exp(tail) - 1) after T.
    """
    if dr.order < 2:
        raise ValueError("limit row needs order >= 2")
    T = tol.t_max if T is None else float(T)
    xi0 = np.zeros(dr.spec.n)
    traj = evolve(dr, s, xi0, [T], tol.rk_tol, xi_zero=True)
    row = traj.E_samples[-1][0].copy()
    th = np.geomspace(T / 10, T, 9)
    rn = np.array([np.linalg.norm(dr.engine.R(t, xi0, xi_zero=True), 2) for t in th])
    if np.all(rn <= tol.degenerate):
        tail, p = 0.0, math.inf
    else:
        keep = rn > tol.degenerate
        slope, icpt, _ = sb.fit_line(np.log(th[keep]), np.log(rn[keep]))
        p = -slope
        if p <= 1.0 + 1e-3:
            raise TailNotIntegrable(f"||R(t, 0)|| decays like t^-{p:.3f}; not integrable")
        tail = math.exp(icpt) * T ** (1 - p) / (p - 1)
    nrm = float(np.linalg.norm(row))
    err = nrm * math.expm1(tail) + 10 * tol.rk_tol * max(1.0, nrm)
    return LimitRow(row, err, tail, p, T)
