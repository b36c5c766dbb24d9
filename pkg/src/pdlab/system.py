"""Partially dissipative systems: coefficient functions, the symbol A(t, xi),
hypothesis certification on sampling grids, builtins and the config loader.

Working convention: the Fourier-transformed Cauchy problem is

    d/dt U(t, xi) = (i A(t, xi) - B(t)) U(t, xi),   A(t, xi) = sum_k A_k(t) xi_k.
"""

import json
import math
from dataclasses import dataclass, field
from math import comb

import numpy as np

from . import matkernel as mk
from .config import DEFAULT
from .errors import KernelDimensionUnsupported, ParseError, UnknownName, ValidationError

_EPS = np.finfo(float).eps


# --------------------------------------------------------------------------
# coefficient functions

class MatrixFunction:
    """A smooth map t -> complex matrix with access to time derivatives.

    ``jet(t, order)`` returns an array of shape ``(order + 1, rows, cols)``
    whose entry ``j`` is the ``j``-th derivative at ``t``.
    """

    kind = "abstract"
    shape = (0, 0)
    is_constant = False

    def __call__(self, t):
        return self.jet(t, 0)[0]

    def jet(self, t, order):
        raise NotImplementedError

    def derivative(self, t, k):
        return self.jet(t, k)[k]


def _rising(e, j):
    out = 1.0
    for i in range(j):
        out *= e + i
    return out


class RationalMF(MatrixFunction):
    """sum_e C_e (1 + t)^(-e)."""

    kind = "rational"

    def __init__(self, terms):
        terms = [(float(e), mk.as_cmatrix(c)) for e, c in terms]
        if not terms:
            raise ValueError("RationalMF needs at least one term")
        shapes = {c.shape for _, c in terms}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent coefficient shapes {shapes}")
        if any(e < 0 for e, _ in terms):
            raise ValueError("exponents must be non-negative")
        self.terms = terms
        self.shape = terms[0][1].shape
        self.is_constant = all(e == 0 or not c.any() for e, c in terms)

    def jet(self, t, order):
        out = np.zeros((order + 1,) + self.shape, dtype=complex)
        x = 1.0 + t
        for e, c in self.terms:
            for j in range(order + 1):
                coef = (-1) ** j * _rising(e, j) * x ** (-e - j)
                if coef:
                    out[j] += coef * c
        return out


class PolynomialMF(MatrixFunction):
    """sum_j C_j t^j."""

    kind = "polynomial"

    def __init__(self, coeffs):
        self.coeffs = [mk.as_cmatrix(c) for c in coeffs]
        self.shape = self.coeffs[0].shape
        self.is_constant = all(not c.any() for c in self.coeffs[1:])

    def jet(self, t, order):
        out = np.zeros((order + 1,) + self.shape, dtype=complex)
        for p, c in enumerate(self.coeffs):
            for j in range(min(order, p) + 1):
                fall = math.perm(p, j)
                out[j] += fall * t ** (p - j) * c
        return out


def constant(c):
    return RationalMF([(0.0, c)])


def fd_step(t, k, tol=DEFAULT):
    """Finite-difference step for the k-th derivative at t.

    k = 1 uses max(h0, h0 (1 + t)); higher derivatives widen the step to
    balance truncation against cancellation.
    """
    base = tol.fd_step
    if k <= 1:
        return max(base, base * (1.0 + abs(t)))
    return (1.0 + abs(t)) * max(base, _EPS ** (1.0 / (k + 3)))


def _central_diff(f, t, k, h):
    acc = 0.0
    for j in range(k + 1):
        acc = acc + (-1) ** j * comb(k, j) * f(t + (k / 2.0 - j) * h)
    return acc / h ** k


def fd_jet(f, t, order, shape, tol=DEFAULT):
    """Jet of a black-box function by Richardson-extrapolated central differences."""
    out = np.zeros((order + 1,) + tuple(shape), dtype=complex)
    out[0] = f(t)
    for k in range(1, order + 1):
        h = fd_step(t, k, tol)
        d1 = _central_diff(f, t, k, h)
        d2 = _central_diff(f, t, k, h / 2.0)
        out[k] = (4.0 * d2 - d1) / 3.0
    return out


class TabulatedMF(MatrixFunction):
    """Black-box coefficient known only through evaluations.

    Derivatives come from central finite differences with Richardson
    extrapolation.
    """

    kind = "tabulated"

    def __init__(self, func, shape, constant=False, tol=DEFAULT):
        self.func = func
        self.shape = tuple(shape)
        self.is_constant = constant
        self.tol = tol

    def __call__(self, t):
        return np.asarray(self.func(t), dtype=complex)

    def jet(self, t, order):
        if self.is_constant:
            out = np.zeros((order + 1,) + self.shape, dtype=complex)
            out[0] = self(t)
            return out
        return fd_jet(self, t, order, self.shape, self.tol)


class JetMF(MatrixFunction):
    """Coefficient defined directly by a jet routine ``jetfunc(t, order)``."""

    kind = "derived"

    def __init__(self, jetfunc, shape, constant=False):
        self.jetfunc = jetfunc
        self.shape = tuple(shape)
        self.is_constant = constant

    def jet(self, t, order):
        return self.jetfunc(t, order)


# --------------------------------------------------------------------------
# jet arithmetic (Leibniz rule on stacks of derivatives)

def jet_mul(f, g):
    n = min(len(f), len(g))
    out = np.zeros((n, f.shape[1], g.shape[2]), dtype=complex)
    for j in range(n):
        for i in range(j + 1):
            out[j] += comb(j, i) * (f[i] @ g[j - i])
    return out


def jet_inv(f):
    n = len(f)
    x0 = np.linalg.inv(f[0])
    out = np.zeros_like(f)
    out[0] = x0
    for j in range(1, n):
        acc = np.zeros_like(x0)
        for i in range(1, j + 1):
            acc += comb(j, i) * (f[i] @ out[j - i])
        out[j] = -x0 @ acc
    return out


def jet_const(m, order):
    m = np.asarray(m, dtype=complex)
    out = np.zeros((order + 1,) + m.shape, dtype=complex)
    out[0] = m
    return out


# --------------------------------------------------------------------------
# 𝒯-class diagnostics

def default_t_grid(t0=1.0, t_max=1024.0):
    grid = [2.0 ** j for j in range(0, 11) if t0 <= 2.0 ** j <= t_max]
    if not grid or grid[0] > t0:
        grid = [float(t0)] + grid
    return np.array(grid)


def _loglog_slope(x, y):
    mask = y > 0
    if mask.sum() < 2:
        return -math.inf
    return float(np.polyfit(np.log(x[mask]), np.log(y[mask]), 1)[0])


def fit_t_order(mf, t_grid):
    """Fitted decay exponent l of ||f(t)|| ~ (1 + t)^(-l); +inf for f = 0."""
    t_grid = np.asarray(t_grid, float)
    vals = np.array([np.linalg.norm(mf(t), 2) for t in t_grid])
    if np.all(vals <= DEFAULT.degenerate):
        return math.inf
    return -_loglog_slope(1.0 + t_grid, vals)


def t_class_report(mf, ell, t_grid, kmax=2, slack=DEFAULT.order_slope):
    """Sampled check of the 𝒯{ell} estimates |d^k f| <= C_k (1 + t)^(-ell - k).

    For each k the weighted quantity ``|d^k f| (1 + t)^(ell + k)`` must stay
    bounded on the grid; we accept when its fitted log-log growth rate is at
    most ``slack``.
    """
    t_grid = np.asarray(t_grid, float)
    rows = []
    ok = True
    for k in range(kmax + 1):
        w = np.array([np.linalg.norm(mf.jet(t, k)[k], 2) * (1 + t) ** (ell + k) for t in t_grid])
        growth = _loglog_slope(1.0 + t_grid, w)
        good = growth <= slack
        ok &= good
        rows.append({"k": k, "sup": float(w.max()), "growth": growth, "ok": bool(good)})
    return {"ell": ell, "ok": bool(ok), "derivatives": rows}


# --------------------------------------------------------------------------
# systems

@dataclass(frozen=True)
class SystemSpec:
    d: int
    n: int
    A: tuple
    B: MatrixFunction
    t0: float = 1.0
    name: str = "system"
    source: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(self.A) != self.n:
            raise ValidationError(f"expected {self.n} matrices A_k, got {len(self.A)}")
        for k, a in enumerate(self.A):
            if a.shape != (self.d, self.d):
                raise ValidationError(f"A[{k}] has shape {a.shape}, expected {(self.d, self.d)}")
        if self.B.shape != (self.d, self.d):
            raise ValidationError(f"B has shape {self.B.shape}")
        if self.t0 < 0:
            raise ValidationError("t0 must be non-negative")

    @property
    def is_constant(self):
        return self.B.is_constant and all(a.is_constant for a in self.A)

    def A_stack(self, t):
        return np.stack([a(t) for a in self.A])

    def generator(self, t, xi):
        """i A(t, xi) - B(t); ``xi`` of shape (n,) or (m, n)."""
        return 1j * symbol_A(self, t, xi) - self.B(t)


def _xi_array(xi, n):
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 0:
        xi = xi.reshape(1)
    if xi.shape[-1] != n:
        raise ValueError(f"frequency must have {n} components, got shape {xi.shape}")
    return xi


def symbol_A(spec, t, xi):
    """sum_k A_k(t) xi_k, vectorized over leading axes of ``xi``."""
    xi = _xi_array(xi, spec.n)
    return np.einsum("...k,kij->...ij", xi.astype(complex), spec.A_stack(t))


@dataclass
class HypothesisReport:
    b1_ok: bool = None
    b2_ok: bool = None
    b3_ok: bool = None
    kappa: float = None
    kernel_dim: int = None
    kalman_sigma_min: float = None
    details: dict = field(default_factory=dict)

    def merge(self, other):
        out = HypothesisReport(details={**self.details, **other.details})
        for name in ("b1_ok", "b2_ok", "b3_ok", "kappa", "kernel_dim", "kalman_sigma_min"):
            a, b = getattr(self, name), getattr(other, name)
            setattr(out, name, a if b is None else b)
        return out

    @property
    def all_ok(self):
        return bool(self.b1_ok and self.b2_ok and self.b3_ok)

    def first_failure(self):
        for label, flag in (("B1", self.b1_ok), ("B2", self.b2_ok), ("B3", self.b3_ok)):
            if not flag:
                return label
        return None

    def summary(self):
        return {
            "b1_ok": self.b1_ok, "b2_ok": self.b2_ok, "b3_ok": self.b3_ok,
            "kappa": self.kappa, "kernel_dim": self.kernel_dim,
            "kalman_sigma_min": self.kalman_sigma_min,
        }


def check_b1_b2(spec, t_grid=None, tol=DEFAULT):
    """Sampled (B1)/(B2) certification."""
    t_grid = default_t_grid(spec.t0) if t_grid is None else np.asarray(t_grid, float)
    asym = 0.0
    min_reb = math.inf
    kappa = math.inf
    kdims = []
    points = []
    for t in t_grid:
        for a in spec.A:
            m = a(t)
            asym = max(asym, float(np.linalg.norm(m - m.conj().T, 2)))
        b = spec.B(t)
        reb = 0.5 * (b + b.conj().T)
        lo = float(np.linalg.eigvalsh(reb)[0])
        min_reb = min(min_reb, lo)
        vals = mk.eig(b, tol).values
        scale = max(1.0, float(np.linalg.norm(b, 2)))
        near = np.abs(vals) <= tol.kernel * scale
        kd = int(near.sum())
        kdims.append(kd)
        rest = vals[~near]
        gap = float(rest.real.min()) if rest.size else math.inf
        kappa = min(kappa, gap)
        points.append({"t": float(t), "min_eig_ReB": lo, "kernel_dim": kd, "gap": gap})
    kernel_dim = max(kdims)
    if kernel_dim > 1:
        raise KernelDimensionUnsupported(
            f"{spec.name}: B(t) has a {kernel_dim}-dimensional kernel; only the (1, d-1) partition is supported")
    b1 = asym <= tol.hermitian and min_reb >= -tol.psd
    b2 = min(kdims) == 1 and kappa >= tol.kappa_min
    return HypothesisReport(
        b1_ok=bool(b1), b2_ok=bool(b2), kappa=float(kappa), kernel_dim=kernel_dim,
        details={"b1b2": {"max_asymmetry": asym, "min_eig_ReB": min_reb, "grid": points}},
    )


def sphere_grid(n, count=64):
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        th = 2 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(th), np.sin(th)])
    # Fibonacci lattice for n = 3
    i = np.arange(count) + 0.5
    z = 1 - 2 * i / count
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5 ** 0.5) * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def kalman_stack(b, a, weights=None):
    """[B; B A; ...; B A^(d-1)] with optional per-block weights sqrt(eps_j)."""
    d = b.shape[0]
    w = np.ones(d) if weights is None else np.asarray(weights, float)
    blocks = []
    p = np.eye(d, dtype=complex)
    for j in range(d):
        blocks.append(math.sqrt(w[j]) * (b @ p))
        p = p @ a
    return np.vstack(blocks)


def check_kalman(spec, t_grid=None, sphere=None, weights=None, tol=DEFAULT):
    """Uniform Kalman rank condition sampled on t_grid x sphere."""
    t_grid = default_t_grid(spec.t0) if t_grid is None else np.asarray(t_grid, float)
    sphere = sphere_grid(spec.n) if sphere is None else np.asarray(sphere, float)
    worst = math.inf
    points = []
    for t in t_grid:
        b = spec.B(t)
        amat = symbol_A(spec, t, sphere)
        for w, a in zip(sphere, amat):
            s = mk.svd_min(kalman_stack(b, a, weights), tol)
            points.append({"t": float(t), "omega": w.tolist(), "sigma_min": s})
            worst = min(worst, s)
    return HypothesisReport(
        b3_ok=bool(worst > tol.kalman_min), kalman_sigma_min=float(worst),
        details={"kalman": points},
    )


def certify(spec, t_grid=None, sphere=None, tol=DEFAULT):
    return check_b1_b2(spec, t_grid, tol).merge(check_kalman(spec, t_grid, sphere, tol=tol))


# --------------------------------------------------------------------------
# config files

_TOP_KEYS = {"name", "d", "n", "t0", "A", "B"}
_TERM_KEYS = {"e", "C"}


def _entry(value, where):
    if isinstance(value, bool):
        raise ParseError("boolean is not a number", field=where)
    if isinstance(value, (int, float)):
        return complex(value)
    if (isinstance(value, list) and len(value) == 2
            and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
        return complex(value[0], value[1])
    raise ParseError("matrix entries must be numbers or [re, im] pairs", field=where)


def _matrix(value, d, where):
    if not isinstance(value, list) or len(value) != d:
        raise ParseError(f"expected {d} rows", field=where)
    rows = []
    for i, row in enumerate(value):
        if not isinstance(row, list) or len(row) != d:
            raise ParseError(f"expected {d} columns", field=f"{where}[{i}]")
        rows.append([_entry(v, f"{where}[{i}][{j}]") for j, v in enumerate(row)])
    return np.array(rows, dtype=complex)


def _terms(value, d, where):
    if not isinstance(value, list) or not value:
        raise ParseError("expected a non-empty list of {e, C} terms", field=where)
    out = []
    for i, term in enumerate(value):
        loc = f"{where}[{i}]"
        if not isinstance(term, dict):
            raise ParseError("term must be an object with keys e, C", field=loc)
        extra = set(term) - _TERM_KEYS
        if extra:
            raise ParseError(f"unknown keys {sorted(extra)}", field=loc)
        if set(term) != _TERM_KEYS:
            raise ParseError("term needs both 'e' and 'C'", field=loc)
        e = term["e"]
        if isinstance(e, bool) or not isinstance(e, (int, float)) or e < 0:
            raise ParseError("exponent e must be a non-negative number", field=f"{loc}.e")
        out.append((float(e), _matrix(term["C"], d, f"{loc}.C")))
    return out


def system_from_dict(cfg, tol=DEFAULT):
    if not isinstance(cfg, dict):
        raise ParseError("top level must be an object")
    extra = set(cfg) - _TOP_KEYS
    if extra:
        raise ParseError(f"unknown keys {sorted(extra)}")
    for key in ("d", "n", "A", "B"):
        if key not in cfg:
            raise ParseError("missing required key", field=key)
    d, n = cfg["d"], cfg["n"]
    if not isinstance(d, int) or isinstance(d, bool) or d < 1:
        raise ParseError("d must be a positive integer", field="d")
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise ParseError("n must be a positive integer", field="n")
    if d < 2:
        raise ValidationError("partition (1, d-1) requires d >= 2")
    t0 = cfg.get("t0", 1.0)
    if isinstance(t0, bool) or not isinstance(t0, (int, float)):
        raise ParseError("t0 must be a number", field="t0")
    if not isinstance(cfg["A"], list) or len(cfg["A"]) != n:
        raise ParseError(f"A must be a list of {n} term lists", field="A")
    a_terms = [_terms(v, d, f"A[{k}]") for k, v in enumerate(cfg["A"])]
    b_terms = _terms(cfg["B"], d, "B")
    for k, terms in enumerate(a_terms):
        for _, c in terms:
            if np.linalg.norm(c - c.conj().T, 2) > tol.hermitian:
                raise ValidationError(f"A[{k}] not self-adjoint")
    name = cfg.get("name", "system")
    if not isinstance(name, str):
        raise ParseError("name must be a string", field="name")
    return SystemSpec(
        d=d, n=n, A=tuple(RationalMF(t) for t in a_terms), B=RationalMF(b_terms),
        t0=float(t0), name=name, source=cfg,
    )


def load_system(config_text, tol=DEFAULT):
    """Parse a JSON system description (schema in README)."""
    try:
        cfg = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from exc
    return system_from_dict(cfg, tol)


def _encode_matrix(c):
    return [[[float(v.real), float(v.imag)] for v in row] for row in np.asarray(c, dtype=complex)]


def system_to_dict(spec):
    if spec.source is not None:
        return spec.source

    def enc(mf):
        if not isinstance(mf, RationalMF):
            raise ValidationError(f"only rational coefficients serialize, got {mf.kind}")
        return [{"e": e, "C": _encode_matrix(c)} for e, c in mf.terms]

    return {"name": spec.name, "d": spec.d, "n": spec.n, "t0": spec.t0,
            "A": [enc(a) for a in spec.A], "B": enc(spec.B)}


def dump_system(spec):
    return json.dumps(system_to_dict(spec), indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# builtins

def _cfg(name, a, b_terms, t0=1.0):
    d = len(a)
    return {"name": name, "d": d, "n": 1, "t0": t0,
            "A": [[{"e": 0, "C": _encode_matrix(a)}]],
            "B": [{"e": e, "C": _encode_matrix(c)} for e, c in b_terms]}


def damped_wave(b0=1.0):
    """Damped wave u_tt - u_xx + b0 u_t = 0 as a system for U = (u_x, u_t)."""
    name = "damped_wave" if b0 == 1.0 else f"damped_wave_b{b0:g}"
    cfg = _cfg(name, [[0, 1], [1, 0]], [(0, np.diag([0.0, b0]))])
    return system_from_dict(cfg)


_SWAP = [[0, 1], [1, 0]]
_CHAIN = [[0, 1, 0], [1, 0, 1], [0, 1, 0]]

BUILTIN_CONFIGS = {
    "damped_wave": _cfg("damped_wave", _SWAP, [(0, np.diag([0.0, 1.0]))]),
    # b(t) = 2 + 1/(1 + t)
    "damped_wave_bt": _cfg("damped_wave_bt", _SWAP,
                           [(0, np.diag([0.0, 2.0])), (1, np.diag([0.0, 1.0]))]),
    "telegraph": _cfg("telegraph", np.diag([1.0, -1.0]), [(0, [[1.0, -1.0], [-1.0, 1.0]])]),
    "chain3": _cfg("chain3", _CHAIN, [(0, np.diag([0.0, 1.0, 1.0]))]),
    "uncoupled_bad": _cfg("uncoupled_bad", np.diag([1.0, -1.0]), [(0, np.diag([0.0, 1.0]))]),
}

BUILTINS = tuple(BUILTIN_CONFIGS)


def builtin(name):
    try:
        cfg = BUILTIN_CONFIGS[name]
    except KeyError:
        raise UnknownName(f"unknown builtin {name!r}; choose from {', '.join(BUILTINS)}") from None
    return system_from_dict(json.loads(json.dumps(cfg)))
