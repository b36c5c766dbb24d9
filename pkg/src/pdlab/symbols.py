"""Matrix-valued polynomial symbols in xi with time-dependent coefficients.

A term is keyed by ``(alpha, ell)``: ``alpha`` is the multi-index of the
xi-monomial and ``ell`` the decay class of the coefficient, i.e. the
coefficient is expected to behave like ``(1 + t)^(-ell)`` together with its
derivatives. The order of a term inside the small-frequency zone, where
``|xi| ~ 1/t``, is ``|alpha| + ell``. Products add both labels; a time
derivative raises ``ell`` by one.

Two representations are provided:

``PolySymbol``
    coefficients are :class:`~pdlab.system.MatrixFunction` objects, so a
    symbol can be evaluated at any ``(t, xi)``.
``JetSymbol``
    everything frozen at one time ``t``; each coefficient is a stack of its
    time derivatives. The diagonalization hierarchy runs on these.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import system as sy
from .config import DEFAULT
from .errors import DimensionMismatch


# --------------------------------------------------------------------------
# multi-indices

def deg(alpha):
    return sum(alpha)


def key_order(key):
    alpha, ell = key
    return deg(alpha) + ell


def grlex(key):
    alpha, ell = key
    return (deg(alpha), tuple(-a for a in alpha), ell)


def unit(n, k):
    return tuple(1 if j == k else 0 for j in range(n))


def zero_index(n):
    return (0,) * n


def add_index(a, b):
    return tuple(x + y for x, y in zip(a, b))


def monomial_values(xi, alpha):
    """xi^alpha for a batch ``xi`` of shape (m, n)."""
    out = np.ones(xi.shape[0])
    for k, a in enumerate(alpha):
        if a:
            out = out * xi[:, k] ** a
    return out


def _xi_batch(xi, n):
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim <= 1
    xi = xi.reshape(-1, n)
    return xi, single


# --------------------------------------------------------------------------
# symbols with function coefficients

@dataclass(frozen=True)
class Zone:
    """Small-frequency zone {|xi| <= c, t >= t0} with t0 >= 1/c."""

    c: float
    t0: float

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("zone constant must be positive")
        if self.t0 < 1.0 / self.c * (1 - 1e-12):
            raise ValueError(f"zone start {self.t0} below 1/c = {1 / self.c}")

    @classmethod
    def from_c(cls, c, t0=0.0):
        return cls(c=c, t0=max(t0, 1.0 / c))

    def contains(self, t, xi):
        return bool(np.linalg.norm(np.atleast_1d(xi)) <= self.c and t >= self.t0)


def _as_mf(c):
    if isinstance(c, sy.MatrixFunction):
        return c
    return sy.constant(c)


def _mf_product(f, g):
    const = f.is_constant and g.is_constant
    return sy.JetMF(lambda t, order: sy.jet_mul(f.jet(t, order), g.jet(t, order)),
                    (f.shape[0], g.shape[1]), constant=const)


def _mf_sum(f, g, sign=1.0):
    const = f.is_constant and g.is_constant
    return sy.JetMF(lambda t, order: f.jet(t, order) + sign * g.jet(t, order), f.shape, constant=const)


def _mf_scale(f, a):
    return sy.JetMF(lambda t, order: a * f.jet(t, order), f.shape, constant=f.is_constant)


def _mf_mask(f, mask):
    return sy.JetMF(lambda t, order: f.jet(t, order) * mask, f.shape, constant=f.is_constant)


def _mf_dt(f):
    return sy.JetMF(lambda t, order: f.jet(t, order + 1)[1:], f.shape)


class PolySymbol:
    """sum over keys (alpha, ell) of coeff(t) xi^alpha.

    ``tail`` holds terms that a truncated product discarded; evaluating with
    ``tail=True`` (the default) gives the exact product.
    """

    def __init__(self, d, n, terms=None, declared_order=0, deg_max=None, tail=None):
        self.d, self.n = d, n
        norm = {}
        for key, c in (terms or {}).items():
            if not isinstance(key[0], tuple):
                key = (tuple(key), 0)
            alpha, ell = tuple(key[0]), int(key[1])
            if len(alpha) != n:
                raise DimensionMismatch(f"multi-index {alpha} does not match n = {n}")
            mf = _as_mf(c)
            if mf.shape != (d, d):
                raise DimensionMismatch(f"coefficient shape {mf.shape} != {(d, d)}")
            norm[(alpha, ell)] = mf
        self.terms = dict(sorted(norm.items(), key=lambda kv: grlex(kv[0])))
        self.declared_order = declared_order
        self.deg_max = deg_max if deg_max is not None else max(
            [deg(a) for a, _ in self.terms] + [0])
        self.tail = tail

    def __repr__(self):
        keys = ", ".join(f"{a}/{l}" for a, l in self.terms)
        return f"PolySymbol(d={self.d}, n={self.n}, order>={self.declared_order}, terms=[{keys}])"

    def __call__(self, t, xi, tail=True):
        return poly_eval(self, t, xi, tail)

    @classmethod
    def identity(cls, d, n):
        return cls(d, n, {(zero_index(n), 0): np.eye(d)}, declared_order=0)

    @classmethod
    def zero(cls, d, n, declared_order=math.inf):
        return cls(d, n, {}, declared_order=declared_order)

    @classmethod
    def monomial(cls, alpha, c, ell=0):
        c = _as_mf(c)
        return cls(c.shape[0], len(alpha), {(tuple(alpha), ell): c},
                   declared_order=deg(alpha) + ell)


def _check_pair(p, q):
    if p.d != q.d or p.n != q.n:
        raise DimensionMismatch(f"symbols of shape (d={p.d}, n={p.n}) and (d={q.d}, n={q.n})")


def _merge(p_terms, q_terms, sign=1.0):
    out = dict(p_terms)
    for key, c in q_terms.items():
        if key in out:
            out[key] = _mf_sum(out[key], c, sign)
        else:
            out[key] = c if sign == 1.0 else _mf_scale(c, sign)
    return out


def poly_add(p, q):
    _check_pair(p, q)
    tail = p.tail
    if q.tail is not None:
        tail = q.tail if tail is None else poly_add(tail, q.tail)
    return PolySymbol(p.d, p.n, _merge(p.terms, q.terms), min(p.declared_order, q.declared_order),
                      max(p.deg_max, q.deg_max), tail)


def poly_scale(p, a):
    return PolySymbol(p.d, p.n, {k: _mf_scale(c, a) for k, c in p.terms.items()},
                      p.declared_order, p.deg_max,
                      None if p.tail is None else poly_scale(p.tail, a))


def poly_sub(p, q):
    return poly_add(p, poly_scale(q, -1.0))


def _full(p):
    return p if p.tail is None else poly_add(
        PolySymbol(p.d, p.n, p.terms, p.declared_order, p.deg_max), p.tail)


def poly_mul(p, q, kmax=None):
    """Product truncated at xi-degree ``kmax``; discarded terms go to ``tail``.

    Tails of the factors are multiplied through as well, so the
    full product is always ``main + tail``.
    """
    _check_pair(p, q)
    pf, qf = _full(p), _full(q)
    main, tail = {}, {}
    for (a, l), f in pf.terms.items():
        for (b, m), g in qf.terms.items():
            key = (add_index(a, b), l + m)
            bucket = main if kmax is None or deg(key[0]) <= kmax else tail
            prod = _mf_product(f, g)
            bucket[key] = _mf_sum(bucket[key], prod) if key in bucket else prod
    order = p.declared_order + q.declared_order
    if kmax is not None:
        order = min(order, kmax + 1)
    tail_sym = PolySymbol(p.d, p.n, tail, declared_order=(kmax or 0) + 1) if tail else None
    deg_max = kmax if kmax is not None else max([deg(a) for a, _ in main] + [0])
    return PolySymbol(p.d, p.n, main, order, deg_max, tail_sym)


def poly_dt(p):
    """Time derivative; each coefficient moves one decay class down."""
    terms = {(a, l + 1): _mf_dt(c) for (a, l), c in p.terms.items() if not c.is_constant}
    tail = None if p.tail is None else poly_dt(p.tail)
    return PolySymbol(p.d, p.n, terms, p.declared_order + 1, p.deg_max, tail)


def poly_eval(p, t, xi, tail=True):
    """sum coeff(t) xi^alpha; ``xi`` of shape (n,) or (m, n)."""
    xb, single = _xi_batch(xi, p.n)
    out = np.zeros((xb.shape[0], p.d, p.d), dtype=complex)
    for (alpha, _), c in p.terms.items():
        out += monomial_values(xb, alpha)[:, None, None] * c(t)
    if tail and p.tail is not None:
        out += poly_eval(p.tail, t, xb, tail=True)
    return out[0] if single else out


def block_masks(d):
    diag = np.zeros((d, d))
    diag[0, 0] = 1.0
    diag[1:, 1:] = 1.0
    return diag, 1.0 - diag


def bdiag_split(p):
    """(diag_part, offdiag_part) for the (1, d-1) block partition."""
    if p.d < 2:
        raise DimensionMismatch("block split needs d >= 2")
    dm, om = block_masks(p.d)
    diag = {k: _mf_mask(c, dm) for k, c in p.terms.items()}
    off = {k: _mf_mask(c, om) for k, c in p.terms.items()}
    dt = ot = None
    if p.tail is not None:
        dt, ot = bdiag_split(p.tail)
    return (PolySymbol(p.d, p.n, diag, p.declared_order, p.deg_max, dt),
            PolySymbol(p.d, p.n, off, p.declared_order, p.deg_max, ot))


def order_diagnostic(p, t_grid, slack=DEFAULT.order_slope):
    """Check that low-degree coefficients decay fast enough in t.

    A term with ``|alpha| < declared_order`` must decay at least like
    ``(1 + t)^-(declared_order - |alpha|)``; the fitted exponent may fall
    short by ``slack``.
    """
    rows, ok = [], True
    for (alpha, ell), c in p.terms.items():
        need = p.declared_order - deg(alpha)
        if need <= 0:
            continue
        fit = sy.fit_t_order(c, t_grid)
        good = fit >= need - slack
        ok &= good
        rows.append({"alpha": list(alpha), "ell": ell, "fitted": fit, "required": need, "ok": bool(good)})
    return {"ok": bool(ok), "terms": rows}


def dump_symbol(p, t_grid):
    """JSON debug dump: per term, coefficient samples on ``t_grid``."""
    terms = []
    for (alpha, ell), c in p.terms.items():
        samples = [{"t": float(t), "C": [[[v.real, v.imag] for v in row] for row in c(t)]}
                   for t in t_grid]
        terms.append({"alpha": list(alpha), "ell": ell, "samples": samples})
    doc = {"d": p.d, "n": p.n, "declared_order": p.declared_order, "deg_max": p.deg_max,
           "terms": terms}
    return json.dumps(doc, sort_keys=True, default=float)


# --------------------------------------------------------------------------
# order estimation

@dataclass(frozen=True)
class OrderFit:
    """Fitted exponents along the three probe rays.

    ``s_exponent``: slope of log|p| vs log s for xi = s omega at fixed t.
    ``t_exponent``: slope vs log(1/t) at fixed small |xi|.
    ``diag_exponent``: slope vs log s along xi = s omega, t = tau / s, which
    measures the zone order |alpha| + ell.
    A ray whose samples are all below the degeneracy floor reports +inf.
    """

    s_exponent: float
    s_r2: float
    t_exponent: float
    t_r2: float
    diag_exponent: float
    diag_r2: float

    @property
    def exponent(self):
        return self.s_exponent

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("s_exponent", "s_r2", "t_exponent", "t_r2", "diag_exponent", "diag_r2")}


def fit_line(x, y):
    """Least-squares slope, intercept and R^2."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss if ss > 0 else 1.0
    return float(slope), float(icpt), r2


def _size(v):
    a = np.asarray(v)
    return float(np.linalg.norm(a, 2)) if a.ndim == 2 else float(np.linalg.norm(a))


def _ray_fit(xs, vals, floor):
    vals = np.asarray(vals, float)
    keep = vals > floor
    if keep.sum() < 2:
        return math.inf, 1.0
    slope, _, r2 = fit_line(np.log(xs[keep]), np.log(vals[keep]))
    return slope, r2


def estimate_order(p, zone, directions=None, t_star=None, samples=9, tau=1.0, floor=DEFAULT.degenerate):
    """Fit the order of ``p`` (PolySymbol or callable ``f(t, xi)``) on probe rays.

    The s-ray sweeps |xi| over [c/100, c/10] at ``t_star``; the t-ray sweeps
    t over a decade at |xi| = c/100; the diagonal ray takes t = tau/s. With
    several directions the smallest exponent is reported.
    """
    f = p if callable(p) and not isinstance(p, PolySymbol) else (lambda t, x: poly_eval(p, t, x))
    n = p.n if isinstance(p, PolySymbol) else None
    if directions is None:
        directions = [[1.0] + [0.0] * ((n or 1) - 1)]
    directions = np.atleast_2d(np.asarray(directions, float))
    t_star = max(zone.t0, 1e3) if t_star is None else t_star
    s = np.geomspace(zone.c * 1e-2, zone.c * 1e-1, samples)
    ts = np.geomspace(t_star, 10 * t_star, samples)
    res = {"s": [], "t": [], "diag": []}
    for w in directions:
        xi = s[:, None] * w[None, :]
        v_s = [_size(f(t_star, x)) for x in xi]
        res["s"].append(_ray_fit(s, v_s, floor))
        x0 = zone.c * 1e-2 * w
        v_t = [_size(f(t, x0)) for t in ts]
        res["t"].append(_ray_fit(1.0 / ts, v_t, floor))
        td = np.maximum(tau / s, zone.t0)
        v_d = [_size(f(t, x)) for t, x in zip(td, xi)]
        res["diag"].append(_ray_fit(s, v_d, floor))
    pick = {k: min(v, key=lambda e: e[0]) for k, v in res.items()}
    return OrderFit(pick["s"][0], pick["s"][1], pick["t"][0], pick["t"][1],
                    pick["diag"][0], pick["diag"][1])


# --------------------------------------------------------------------------
# symbols frozen at one time

def _prunable(arr):
    return not np.any(arr)


class JetSymbol:
    """Symbol at a fixed time: key -> array (J + 1, rows, cols) of t-derivatives."""

    __slots__ = ("terms", "n", "J")

    def __init__(self, terms, n, J):
        self.n, self.J = n, J
        self.terms = {k: v[: J + 1] for k, v in terms.items() if not _prunable(v[: J + 1])}

    @classmethod
    def identity(cls, d, n, J):
        return cls({(zero_index(n), 0): sy.jet_const(np.eye(d), J)}, n, J)

    @classmethod
    def zero(cls, n, J):
        return cls({}, n, J)

    def copy(self):
        return JetSymbol(dict(self.terms), self.n, self.J)

    def keys(self):
        return sorted(self.terms, key=grlex)

    def orders(self):
        return sorted({key_order(k) for k in self.terms})

    def __add__(self, other):
        J = min(self.J, other.J)
        out = {k: v[: J + 1] for k, v in self.terms.items()}
        for k, v in other.terms.items():
            out[k] = out[k] + v[: J + 1] if k in out else v[: J + 1]
        return JetSymbol(out, self.n, J)

    def __neg__(self):
        return JetSymbol({k: -v for k, v in self.terms.items()}, self.n, self.J)

    def __sub__(self, other):
        return self + (-other)

    def scale(self, a):
        return JetSymbol({k: a * v for k, v in self.terms.items()}, self.n, self.J)

    def __matmul__(self, other):
        J = min(self.J, other.J)
        out = {}
        for (a, l), f in self.terms.items():
            for (b, m), g in other.terms.items():
                key = (add_index(a, b), l + m)
                prod = sy.jet_mul(f[: J + 1], g[: J + 1])
                out[key] = out[key] + prod if key in out else prod
        return JetSymbol(out, self.n, J)

    def lmul(self, jet):
        """jet @ self for a key-free matrix jet (order zero, class zero)."""
        J = min(self.J, len(jet) - 1)
        return JetSymbol({k: sy.jet_mul(jet[: J + 1], v[: J + 1]) for k, v in self.terms.items()},
                         self.n, J)

    def rmul(self, jet):
        J = min(self.J, len(jet) - 1)
        return JetSymbol({k: sy.jet_mul(v[: J + 1], jet[: J + 1]) for k, v in self.terms.items()},
                         self.n, J)

    def dt(self):
        if self.J < 1:
            raise ValueError("no derivative left in jet")
        out = {(a, l + 1): v[1:] for (a, l), v in self.terms.items()}
        return JetSymbol(out, self.n, self.J - 1)

    def select(self, pred):
        return JetSymbol({k: v for k, v in self.terms.items() if pred(k)}, self.n, self.J)

    def part(self, order):
        return self.select(lambda k: key_order(k) == order)

    def below(self, order):
        return self.select(lambda k: key_order(k) < order)

    def at_zero_frequency(self):
        return self.select(lambda k: deg(k[0]) == 0)

    def masked(self, mask):
        return JetSymbol({k: v * mask for k, v in self.terms.items()}, self.n, self.J)

    def bdiag_split(self):
        if not self.terms:
            return self, self
        d = self.dim
        dm, om = block_masks(d)
        return self.masked(dm), self.masked(om)

    @property
    def dim(self):
        for v in self.terms.values():
            return v.shape[1]
        return 0

    def size(self):
        """Largest coefficient norm, used for cancellation checks."""
        return max([float(np.abs(v[0]).max()) for v in self.terms.values()] + [0.0])

    def evaluate(self, xi, d=None, derivative=0):
        xb, single = _xi_batch(xi, self.n)
        d = d or self.dim
        out = np.zeros((xb.shape[0], d, d), dtype=complex)
        for (alpha, _), v in self.terms.items():
            out += monomial_values(xb, alpha)[:, None, None] * v[derivative]
        return out[0] if single else out
