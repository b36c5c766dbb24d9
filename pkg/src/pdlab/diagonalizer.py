"""Block-diagonalization of the small-frequency symbol.

Working convention throughout: ``d/dt U = (i A(t, xi) - B(t)) U``.

1. ``M(t)`` splits off the kernel of ``B``: ``M^-1 B M = D = bdiag(0, Dtil)``.
   With ``V0 = M^-1 U`` we get ``d/dt V0 = (-D + R1) V0`` where
   ``R1 = i M^-1 A(t, xi) M - M^-1 M'``.
2. The hierarchy builds ``N_k = I + N^(1) + ... + N^(k)`` (off-diagonal
   corrections) and block-diagonal ``F_k`` so that ``V0 = N_k W`` and
   ``d/dt W = (-D + F_k + R_{k+1}) W``. The defect

       B_k = [N_k, D] + R1 N_k - N_k F_k - d/dt N_k

   satisfies ``N_k R_{k+1} = B_k`` and is a finite symbol of order >= k + 1.
   Each step removes its leading part: ``F += bdiag(part)`` and
   ``[D, N'] = offdiag(part)``.

Symbols carry keys ``(alpha, ell)`` (see :mod:`pdlab.symbols`). All algebra is
done on jets frozen at one time, cached per ``t``.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np
import scipy.linalg
from scipy.integrate import solve_ivp

from . import matkernel as mk
from . import symbols as sb
from . import system as sy
from .config import DEFAULT
from .errors import (ContinuationFailure, KernelDimensionUnsupported, NumericalError,
                     PositivityViolation, SpectralGapViolation, TruncationOverflow, ZoneCollapse)


def _phase_normalize(v):
    idx = np.flatnonzero(np.abs(v) > 1e-12 * np.abs(v).max())[0]
    return v * (abs(v[idx]) / v[idx])


def _null_vectors(b):
    u, _, vh = np.linalg.svd(b)
    return vh[-1].conj(), u[:, -1]


def _vector_jet(bjet, v0, ref, border):
    """Jet of the null vector v(t) of B(t) normalized by ref* v = ref* v0.

    Differentiating B v = 0 gives B v^(j) = -sum_{i>=1} C(j, i) B^(i) v^(j-i);
    the bordered matrix [[B, border], [ref*, 0]] is invertible when
    ``border`` spans the cokernel and ``ref* v0 != 0``.
    """
    d = v0.size
    J = len(bjet) - 1
    out = np.zeros((J + 1, d), dtype=complex)
    out[0] = v0
    if J == 0 or not np.any(bjet[1:]):
        return out
    big = np.zeros((d + 1, d + 1), dtype=complex)
    big[:d, :d] = bjet[0]
    big[:d, d] = border
    big[d, :d] = ref.conj()
    lu = scipy.linalg.lu_factor(big)
    for j in range(1, J + 1):
        rhs = np.zeros(d + 1, dtype=complex)
        for i in range(1, j + 1):
            rhs[:d] -= comb(j, i) * (bjet[i] @ out[j - i])
        out[j] = scipy.linalg.lu_solve(lu, rhs)[:d]
    return out


def kernel_projector_jet(bjet, v_ref, w_ref):
    """Jet of the spectral projector P0(t) = v w* / (w* v) onto ker B(t)."""
    v0, w0 = _null_vectors(bjet[0])
    v0 = v0 / (v_ref.conj() @ v0)
    w0 = w0 / (w_ref.conj() @ w0)
    bh = np.conj(np.transpose(bjet, (0, 2, 1)))
    unit = lambda x: x / np.linalg.norm(x)
    v = _vector_jet(bjet, v0, v_ref, unit(w0))
    w = _vector_jet(bh, w0, w_ref, unit(v0))
    vj = v[:, :, None]
    wh = w.conj()[:, None, :]
    s = sy.jet_mul(wh, vj)
    return sy.jet_mul(sy.jet_mul(vj, sy.jet_inv(s)), wh)


# --------------------------------------------------------------------------
# slow diagonalizer

class SlowDiagonalizer:
    """M(t) = [P0(t) v_ref, (I - P0(t)) Q_ref] with reference data at t_ref.

    ``P0`` is the spectral projector onto the kernel of ``B(t)``, so the first
    column spans the kernel and the others span the range of ``B(t)``; no
    eigenvector matching between samples is needed. ``report`` holds the
    grid diagnostics (condition numbers, block residuals, column overlaps).
    """

    def __init__(self, spec, t_ref, v_ref, w_ref, q_ref, tol=DEFAULT):
        self.spec = spec
        self.t_ref = t_ref
        self.v_ref, self.w_ref, self.q_ref = v_ref, w_ref, q_ref
        self.tol = tol
        self.is_constant = spec.B.is_constant
        self.M_is_constant = False
        self.report = {}
        self._cached = lru_cache(maxsize=8192)(self._compute)
        d = spec.d
        self.M = sy.JetMF(lambda t, o: self.jets(t, o)[0], (d, d), self.is_constant)
        self.Minv = sy.JetMF(lambda t, o: self.jets(t, o)[1], (d, d), self.is_constant)
        self.D = sy.JetMF(lambda t, o: self.jets(t, o)[2], (d, d), self.is_constant)

    def _compute(self, t, J):
        bjet = self.spec.B.jet(t, J)
        d = self.spec.d
        if self.M_is_constant:
            m = sy.jet_const(self._m_const, J)
            minv = sy.jet_const(self._minv_const, J)
            dj = self._minv_const @ bjet @ self._m_const
        else:
            p0 = kernel_projector_jet(bjet, self.v_ref, self.w_ref)
            m = np.zeros((J + 1, d, d), dtype=complex)
            m[:, :, 0] = p0 @ self.v_ref
            m[:, :, 1:] = -(p0 @ self.q_ref)
            m[0, :, 1:] += self.q_ref
            minv = sy.jet_inv(m)
            dj = sy.jet_mul(sy.jet_mul(minv, bjet), m)
        dm, om = sb.block_masks(d)
        dj = dj * dm
        dj[:, 0, 0] = 0.0
        return m, minv, dj

    def freeze_if_constant(self, t_probe):
        """Switch to a constant M when its derivatives vanish identically.

        This happens whenever the kernel and range of B(t) do not move, as
        for a diagonal B(t); it spares the projector jets at every time.
        """
        if not self.is_constant:
            for t in t_probe:
                m = self._compute(float(t), 3)[0]
                if np.any(m[1:]):
                    return
        m0 = self._compute(float(t_probe[0]), 0)[0][0]
        self._m_const, self._minv_const = m0, np.linalg.inv(m0)
        self.M_is_constant = True
        self._cached.cache_clear()

    def jets(self, t, order=0):
        J = max(order, 4)
        tt = self.t_ref if self.is_constant else float(t)
        m, minv, dj = self._cached(tt, J)
        return m[: order + 1], minv[: order + 1], dj[: order + 1]

    def Dtil(self, t):
        return self.jets(t)[2][0][1:, 1:]

    def block_residual(self, t):
        b = self.spec.B(t)
        m, minv, _ = (x[0] for x in self.jets(t))
        full = minv @ b @ m
        dm, _ = sb.block_masks(self.spec.d)
        target = full * dm
        target[0, 0] = 0.0
        return float(np.linalg.norm(full - target, 2) / max(np.linalg.norm(b, 2), 1e-300))


def _reference_range_basis(w0):
    """Orthonormal basis of w0-perp from Gram-Schmidt on projected unit vectors."""
    d = w0.size
    w = w0 / np.linalg.norm(w0)
    proj = np.eye(d) - np.outer(w, w.conj())
    cols = []
    for j in range(d):
        x = proj[:, j].astype(complex)
        for q in cols:
            x = x - (q.conj() @ x) * q
        nrm = np.linalg.norm(x)
        if nrm > 1e-8:
            cols.append(x / nrm)
        if len(cols) == d - 1:
            break
    return np.column_stack(cols)


def build_slow_diagonalizer(spec, t_grid=None, tol=DEFAULT):
    t_grid = sy.default_t_grid(spec.t0) if t_grid is None else np.asarray(t_grid, float)
    rep = sy.check_b1_b2(spec, t_grid, tol)
    if rep.kernel_dim != 1 or min(p["kernel_dim"] for p in rep.details["b1b2"]["grid"]) != 1:
        raise KernelDimensionUnsupported(f"{spec.name}: B(t) has no kernel on part of the grid")
    t_ref = float(spec.t0)
    v0, w0 = _null_vectors(spec.B(t_ref))
    v_ref = _phase_normalize(v0 / np.linalg.norm(v0))
    w_ref = _phase_normalize(w0 / np.linalg.norm(w0))
    q_ref = _reference_range_basis(w_ref)
    sd = SlowDiagonalizer(spec, t_ref, v_ref, w_ref, q_ref, tol)
    sd.freeze_if_constant(t_grid)

    conds, resid, gaps, overlaps = [], [], [], []
    prev = None
    for t in t_grid:
        m = sd.M(t)
        sv = np.linalg.svd(m, compute_uv=False)
        conds.append(float(sv[0] / sv[-1]))
        resid.append(sd.block_residual(t))
        gaps.append(float(np.linalg.eigvals(sd.Dtil(t)).real.min()))
        cols = m / np.linalg.norm(m, axis=0)
        if prev is not None:
            overlaps.append(float(np.min(np.abs(np.sum(prev.conj() * cols, axis=0)))))
        prev = cols
    sd.report = {"t": t_grid.tolist(), "cond": conds, "block_residual": resid, "gap": gaps,
                 "min_overlap": min(overlaps) if overlaps else 1.0}
    if min(gaps) < tol.kappa_min:
        raise SpectralGapViolation(f"min Re spec(Dtil) = {min(gaps):.3e}")
    if sd.report["min_overlap"] < tol.continuation_overlap or not np.all(np.isfinite(conds)):
        raise ContinuationFailure(
            f"columns of M turn by more than allowed between samples (overlap {sd.report['min_overlap']:.3f})")
    return sd


# --------------------------------------------------------------------------
# first transform

def r1_jets(spec, sd, t, J, xi_zero=False):
    """(D, R1) at time t as jets of depth J. ``xi_zero`` keeps only alpha = 0."""
    m, minv, dj = sd.jets(t, J + 1)
    terms = {}
    if not xi_zero:
        for k, a in enumerate(spec.A):
            aj = a.jet(t, J)
            terms[(sb.unit(spec.n, k), 0)] = 1j * sy.jet_mul(sy.jet_mul(minv[: J + 1], aj), m[: J + 1])
    if not sd.M_is_constant:
        terms[(sb.zero_index(spec.n), 1)] = -sy.jet_mul(minv[:J + 1], m[1:])
    return dj[: J + 1], sb.JetSymbol(terms, spec.n, J)


def first_transform(spec, sd):
    """(D0, R1) as PolySymbols: D0 holds D = M^-1 B M, R1 the remaining generator."""
    d, n = spec.d, spec.n
    D0 = sb.PolySymbol(d, n, {(sb.zero_index(n), 0): sd.D}, declared_order=0)
    terms = {}
    for k, a in enumerate(spec.A):
        def jet(t, o, a=a):
            m, minv, _ = sd.jets(t, o)
            return 1j * sy.jet_mul(sy.jet_mul(minv, a.jet(t, o)), m)
        terms[(sb.unit(n, k), 0)] = sy.JetMF(jet, (d, d), a.is_constant and sd.M_is_constant)
    if not sd.M_is_constant:
        def cjet(t, o):
            m, minv, _ = sd.jets(t, o + 1)
            return -sy.jet_mul(minv[: o + 1], m[1:])
        terms[(sb.zero_index(n), 1)] = sy.JetMF(cjet, (d, d))
    return D0, sb.PolySymbol(d, n, terms, declared_order=1)


def _five_point(f, t, h):
    return (f(t - 2 * h) - 8 * f(t - h) + 8 * f(t + h) - f(t + 2 * h)) / (12 * h)


def first_transform_defect(spec, sd, xi, t_samples, rtol=1e-12):
    """Relative defect of M^-1 U in the transformed equation.

    ``U`` is the fundamental matrix of the original system from an ODE
    solver; the derivative of ``V = M^-1 U`` is taken by finite differences,
    so neither the jets of M nor R1 enter the left-hand side.
    """
    xi = np.atleast_1d(np.asarray(xi, float))
    d = spec.d
    t_samples = np.asarray(t_samples, float)

    def rhs(t, y):
        return (spec.generator(t, xi) @ y.reshape(d, d)).ravel()

    tend = float(t_samples.max()) + 1.0
    sol = solve_ivp(rhs, (spec.t0, tend), np.eye(d, dtype=complex).ravel(), method="DOP853",
                    rtol=rtol, atol=1e-14, dense_output=True)
    D0, R1 = first_transform(spec, sd)
    worst = 0.0
    for t in t_samples:
        h = 1e-3 * (1 + t)
        v = lambda s: np.linalg.inv(sd.M(s)) @ sol.sol(s).reshape(d, d)
        dv = _five_point(v, t, h)
        gen = -sb.poly_eval(D0, t, xi) + sb.poly_eval(R1, t, xi)
        vt = v(t)
        worst = max(worst, float(np.linalg.norm(dv - gen @ vt, 2) / np.linalg.norm(vt, 2)))
    return worst


# --------------------------------------------------------------------------
# hierarchy at a fixed time

@dataclass
class HierarchyState:
    """Everything at one time ``t`` after ``k`` steps."""

    k: int
    N: sb.JetSymbol
    F: sb.JetSymbol
    B: sb.JetSymbol
    R1: sb.JetSymbol
    D: np.ndarray
    sylvester_residual: float = 0.0
    lower_order_residual: float = 0.0


def sylvester_jet(D, R, tol=DEFAULT):
    """Off-diagonal jet N with [D, N] = R derivative by derivative."""
    J = min(len(D), len(R)) - 1
    btil = D[0][1:, 1:]
    out = np.zeros((J + 1,) + R.shape[1:], dtype=complex)
    worst = 0.0
    for j in range(J + 1):
        rhs = R[j].copy()
        for i in range(1, j + 1):
            rhs -= comb(j, i) * mk.commutator(D[i], out[j - i])
        n12, n21 = mk.sylvester_offdiag(btil, rhs[0:1, 1:], rhs[1:, 0:1], tol=tol)
        out[j] = mk.assemble_offdiag(n12, n21)
        if j == 0 and np.any(rhs):
            worst = mk.sylvester_residual(btil, rhs[0:1, 1:], rhs[1:, 0:1], n12, n21)
    return out, worst


def defect(N, F, R1, D):
    """B = [N, D] + R1 N - N F - dN/dt."""
    return N.rmul(D) - N.lmul(D) + (R1 @ N) - (N @ F) - N.dt()


def hierarchy_start(R1, D):
    d = D.shape[1]
    J = R1.J
    N = sb.JetSymbol.identity(d, R1.n, J)
    return HierarchyState(0, N, sb.JetSymbol.zero(R1.n, J), R1, R1, D[: J + 1])


def hierarchy_step(state, tol=DEFAULT):
    order = state.k + 1
    part = state.B.part(order)
    pd, po = part.bdiag_split()
    new = {}
    worst = state.sylvester_residual
    for key, r in po.terms.items():
        new[key], res = sylvester_jet(state.D, r, tol)
        worst = max(worst, res)
    N = state.N + sb.JetSymbol(new, state.N.n, state.B.J)
    F = state.F + pd
    B = defect(N, F, state.R1, state.D)
    scale = max(1.0, state.R1.size())
    low = B.below(order + 1).size() / scale
    if low > tol.lower_order_cancel:
        raise NumericalError(f"hierarchy step {order}: lower-order defect {low:.2e} did not cancel")
    B = B.select(lambda key: sb.key_order(key) > order)
    return HierarchyState(order, N, F, B, state.R1, state.D, worst,
                          max(state.lower_order_residual, low))


def neumann_inverse(N, kmax):
    """Truncated Neumann series of N^-1 keeping terms of order <= kmax."""
    d = N.dim
    eye = sb.JetSymbol.identity(d, N.n, N.J)
    E = eye - N
    acc, term = eye, eye
    for _ in range(kmax):
        term = (term @ E).select(lambda k: sb.key_order(k) <= kmax)
        if not term.terms:
            break
        acc = acc + term
    return acc


class HierarchyEngine:
    """Runs the k-step hierarchy at any time t, with caching."""

    def __init__(self, spec, sd, k, kmax=None, tol=DEFAULT):
        self.spec, self.sd, self.k = spec, sd, k
        self.kmax = 2 * k + 2 if kmax is None else kmax
        self.tol = tol
        self.is_constant = spec.is_constant
        self._states = lru_cache(maxsize=16384)(self._state)
        self._extras = lru_cache(maxsize=4096)(self._extra)

    def _state(self, t, J, xi_zero):
        D, R1 = r1_jets(self.spec, self.sd, t, J + self.k, xi_zero)
        st = hierarchy_start(R1, D)
        if R1.terms:
            for _ in range(self.k):
                st = hierarchy_step(st, self.tol)
        else:
            st.k = self.k
        top = max(st.B.orders(), default=0)
        if top > self.kmax:
            raise TruncationOverflow(f"defect reaches order {top} > K_max = {self.kmax}")
        return st

    def _extra(self, t, J):
        st = self._states(t, J, False)
        ninv = neumann_inverse(st.N, self.kmax)
        prod = ninv @ st.B
        rem = prod.select(lambda key: sb.key_order(key) <= self.kmax)
        tail = prod.select(lambda key: sb.key_order(key) > self.kmax)
        return {"state": st, "Ninv": ninv, "R_rem": rem, "R_tail": tail}

    def _time(self, t):
        return self.sd.t_ref if self.is_constant else float(t)

    def at(self, t, order=0):
        """State plus truncated inverse and remainder symbols at time t."""
        return self._extras(self._time(t), max(order, 1))

    def state(self, t, xi_zero=False, order=0):
        return self._states(self._time(t), max(order, 1), xi_zero)

    def N(self, t, xi):
        st = self.state(t)
        return st.N.evaluate(xi, self.spec.d)

    def R(self, t, xi, xi_zero=False):
        """Exact remainder R_{k+1} = N^-1 B_k, batched over xi."""
        st = self.state(t, xi_zero)
        d = self.spec.d
        n = st.N.evaluate(xi, d)
        b = st.B.evaluate(xi, d)
        return np.linalg.solve(n, b)

    def generator(self, t, xi, xi_zero=False):
        """-D + F_k + R_{k+1} for the transformed unknown W."""
        st = self.state(t, xi_zero)
        d = self.spec.d
        return -st.D[0] + st.F.evaluate(xi, d) + self.R(t, xi, xi_zero)


# --------------------------------------------------------------------------
# results

@dataclass
class Parabolic:
    """F_k(1,1) = -xi^T alpha xi + i beta^T xi + i gamma (+ higher powers of xi)."""

    alpha: object
    beta: object
    gamma: object
    alpha_limit: np.ndarray
    min_alpha_ratio: float
    report: dict = field(default_factory=dict)

    def exponent_rate(self, t, xi):
        xi = np.atleast_2d(np.asarray(xi, float))
        a, b, g = self.alpha(t), self.beta(t), self.gamma(t)
        return -np.einsum("mi,ij,mj->m", xi, a, xi) + 1j * xi @ b + 1j * g


@dataclass
class DiagResult:
    spec: object
    order: int
    sd: SlowDiagonalizer
    engine: HierarchyEngine
    zone: sb.Zone
    N: sb.PolySymbol
    Ninv: sb.PolySymbol
    F: sb.PolySymbol
    R_rem: sb.PolySymbol
    B_defect: sb.PolySymbol
    diagnostics: dict = field(default_factory=dict)
    parabolic: Parabolic = None

    def R(self, t, xi):
        return self.engine.R(t, xi)

    def generator(self, t, xi, xi_zero=False):
        return self.engine.generator(t, xi, xi_zero)

    def conjugation_defect(self, t, xi, h=None):
        """||dN/dt + N(-D + F) - (-D + R1) N|| with dN/dt by finite differences.

        Equals ``||B_k||`` in exact arithmetic but shares no jet algebra with it.
        """
        xi = np.atleast_1d(np.asarray(xi, float))
        h = 1e-3 * (1 + t) if h is None else h
        nfun = lambda s: sb.poly_eval(self.N, s, xi)
        dn = _five_point(nfun, t, h)
        D0, R1 = first_transform(self.spec, self.sd)
        dd = sb.poly_eval(D0, t, xi)
        nn = nfun(t)
        lhs = dn + nn @ (-dd + sb.poly_eval(self.F, t, xi))
        return float(np.linalg.norm(lhs - (-dd + sb.poly_eval(R1, t, xi)) @ nn, 2))


def _margin(engine, c, t_start, sphere, t_max):
    t_lo = max(t_start, 1.0 / c)
    ts = np.unique(np.append(t_lo * 2.0 ** np.arange(0, 64), t_max))
    ts = ts[:1] if engine.is_constant else ts[ts <= t_max]
    radii = np.linspace(c / 8, c, 8)
    xi = (radii[:, None, None] * sphere[None, :, :]).reshape(-1, sphere.shape[1])
    d = engine.spec.d
    worst = 0.0
    for t in ts:
        n = engine.state(t).N.evaluate(xi, d)
        worst = max(worst, float(mk.opnorm(n - np.eye(d)).max()))
    return worst


def find_zone(engine, tol=DEFAULT, sphere=None):
    """Largest c <= 1 (to bisection accuracy) with sup ||N_k - I|| <= margin."""
    spec = engine.spec
    sphere = sy.sphere_grid(spec.n, 16) if sphere is None else sphere
    ok = lambda c: _margin(engine, c, spec.t0, sphere, tol.t_max) <= tol.invertibility_margin
    c = 1.0
    if ok(c):
        return sb.Zone.from_c(c, spec.t0)
    while not ok(c):
        c /= 2
        if c < tol.zone_min:
            raise ZoneCollapse(f"no zone constant above {tol.zone_min} gives ||N - I|| <= "
                               f"{tol.invertibility_margin}")
    lo, hi = c, 2 * c
    for _ in range(8):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return sb.Zone.from_c(lo, spec.t0)


def invertibility_margin(dr, tol=DEFAULT):
    """sup ||N_k - I|| over the zone of ``dr`` (same probe grid as :func:`find_zone`)."""
    sphere = sy.sphere_grid(dr.spec.n, 16)
    return _margin(dr.engine, dr.zone.c, dr.spec.t0, sphere, tol.t_max)


def _poly_from_engine(engine, name, keys, declared):
    spec = engine.spec
    d = spec.d
    terms = {}
    on_state = name in ("N", "F", "B")
    for key in keys:
        def jet(t, o, key=key):
            rec = {"state": engine.state(t, order=o)} if on_state else engine.at(t, o)
            v = _lookup(rec, name).terms.get(key)
            if v is None:
                return np.zeros((o + 1, d, d), dtype=complex)
            return v[: o + 1]
        terms[key] = sy.JetMF(jet, (d, d), engine.is_constant)
    return sb.PolySymbol(d, spec.n, terms, declared_order=declared)


def _lookup(rec, name):
    return rec[name] if name in rec else getattr(rec["state"], name)


def _keys(engine, name, ts):
    out = set()
    for t in ts:
        out |= set(_lookup(engine.at(t), name).terms)
    return sorted(out, key=sb.grlex)


def hierarchy_run(spec, k, zone=None, sd=None, kmax=None, tol=DEFAULT):
    """Order-k diagonalization on the small-frequency zone."""
    if k < 1:
        raise ValueError("hierarchy order must be >= 1")
    sd = build_slow_diagonalizer(spec, tol=tol) if sd is None else sd
    engine = HierarchyEngine(spec, sd, k, kmax, tol)
    if zone is None:
        zone = find_zone(engine, tol)
    ts = [zone.t0] if spec.is_constant else [zone.t0, 10 * zone.t0, 100 * zone.t0]
    syms = {}
    for name, declared in (("N", 0), ("F", 1), ("B", k + 1), ("Ninv", 0), ("R_rem", k + 1)):
        syms[name] = _poly_from_engine(engine, name, _keys(engine, name, ts), declared)
    tail_keys = _keys(engine, "R_tail", ts)
    if tail_keys:
        syms["R_rem"].tail = _poly_from_engine(engine, "R_tail", tail_keys, engine.kmax + 1)
    st = engine.state(zone.t0)
    diag = {
        "sylvester_residual": st.sylvester_residual,
        "lower_order_residual": st.lower_order_residual,
        "kmax": engine.kmax,
        "zone_c": zone.c,
        "zone_t0": zone.t0,
        "cond_M": sd.report.get("cond"),
    }
    return DiagResult(spec, k, sd, engine, zone, syms["N"], syms["Ninv"], syms["F"],
                      syms["R_rem"], syms["B"], diag)


# --------------------------------------------------------------------------
# parabolic coefficients and the multiplier K

def _f11_parts(dr):
    n = dr.spec.n
    quad, lin, const = {}, {}, []
    for (alpha, _), c in dr.F.terms.items():
        g = sb.deg(alpha)
        if g == 0:
            const.append(c)
        elif g == 1:
            lin.setdefault(alpha.index(1), []).append(c)
        elif g == 2:
            idx = tuple(i for i in range(n) for _ in range(alpha[i]))
            quad.setdefault(idx, []).append(c)
    return quad, lin, const


def extract_parabolic(dr, t_grid=None, tol=DEFAULT):
    """Read alpha, beta, gamma off the (1,1) entry of F_k."""
    if dr.order < 2:
        raise ValueError("parabolic coefficients need order >= 2")
    n = dr.spec.n
    quad, lin, const = _f11_parts(dr)

    def alpha(t):
        a = np.zeros((n, n), dtype=complex)
        for (i, j), cs in quad.items():
            v = sum(c(t)[0, 0] for c in cs)
            if i == j:
                a[i, i] = -v
            else:
                a[i, j] = a[j, i] = -v / 2
        return a

    def beta(t):
        b = np.zeros(n, dtype=complex)
        for i, cs in lin.items():
            b[i] = -1j * sum(c(t)[0, 0] for c in cs)
        return b

    def gamma(t):
        return complex(-1j * sum(c(t)[0, 0] for c in const)) if const else 0j

    t_grid = sy.default_t_grid(dr.spec.t0) if t_grid is None else np.asarray(t_grid, float)
    mins = []
    for t in t_grid:
        a = alpha(t)
        lo = float(np.linalg.eigvalsh(0.5 * (a + a.conj().T)).min())
        mins.append(lo)
        if lo <= 0:
            raise PositivityViolation(f"Re alpha(t) not positive definite at t = {t:g} (min eig {lo:.3e})", t)
    a_lim = alpha(tol.t_max)
    lim = float(np.linalg.eigvalsh(0.5 * (a_lim + a_lim.conj().T)).min())
    decay = {}
    for label, fn in (("beta", beta), ("gamma", gamma)):
        vals = np.array([np.linalg.norm(np.atleast_1d(fn(t))) for t in t_grid])
        if np.all(vals <= tol.degenerate):
            decay[label] = math.inf
        else:
            keep = vals > tol.degenerate
            decay[label] = -sb.fit_line(np.log1p(t_grid[keep]), np.log(vals[keep]))[0] \
                if keep.sum() >= 2 else math.inf
    par = Parabolic(alpha, beta, gamma, a_lim, min(mins) / lim,
                    {"min_eig_re_alpha": mins, "t": t_grid.tolist(), "decay_order": decay})
    dr.parabolic = par
    return par


def build_K(dr):
    """(t, xi) -> M(t) N_2(t, xi) e1, batched over xi."""
    if dr.order < 2:
        raise ValueError("K needs a hierarchy of order >= 2")
    keys = [k for k in dr.N.terms if sb.key_order(k) <= 2]
    n2 = sb.PolySymbol(dr.spec.d, dr.spec.n, {k: dr.N.terms[k] for k in keys})

    def K(t, xi):
        return np.einsum("ij,...j->...i", dr.sd.M(t), sb.poly_eval(n2, t, xi)[..., :, 0])

    return K
