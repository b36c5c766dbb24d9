"""Dense complex linear algebra at small dimension.

Matrices are plain ``numpy`` complex arrays. The dense LAPACK routines behind
``numpy.linalg`` and ``scipy.linalg.expm`` do the heavy lifting; this module
adds the contracts the rest of the package relies on (residual checks,
defectiveness sentinel, rank snapping, the off-diagonal Sylvester solve).
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .config import DEFAULT
from .errors import NonConvergence, NotSquare, OverflowRisk, SpectralGapViolation


def as_cmatrix(m):
    """Return ``m`` as a finite 2-D complex array."""
    a = np.asarray(m, dtype=complex)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got array of shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def _square(m):
    a = as_cmatrix(m)
    if a.shape[0] != a.shape[1]:
        raise NotSquare(f"matrix of shape {a.shape} is not square")
    return a


@dataclass(frozen=True)
class EigDecomp:
    values: np.ndarray
    vectors: np.ndarray
    condition: float

    @property
    def defective(self):
        return math.isinf(self.condition)


def eig(m, tol=DEFAULT):
    """Eigen-decomposition with a residual check.

    Defective inputs are not an error: they come back with
    ``condition == inf``. A diagonalizable input whose residual exceeds the
    tolerance raises :class:`NonConvergence`.
    """
    a = _square(m)
    try:
        w, v = np.linalg.eig(a)
    except np.linalg.LinAlgError as exc:
        raise NonConvergence(str(exc)) from exc
    # deterministic ordering: by real part, then imaginary part
    order = np.lexsort((np.round(w.imag, 12), np.round(w.real, 12)))
    w, v = w[order], v[:, order]
    sv = np.linalg.svd(v, compute_uv=False)
    cond = math.inf if sv[-1] == 0 else float(sv[0] / sv[-1])
    if cond > tol.defective_condition:
        cond = math.inf
    scale = max(np.linalg.norm(a, 2), np.finfo(float).tiny)
    resid = np.linalg.norm(a @ v - v * w, 2) / scale
    if not math.isinf(cond) and resid > tol.eig_residual:
        raise NonConvergence(f"eigen-residual {resid:.3e} above {tol.eig_residual:.1e}")
    return EigDecomp(values=w, vectors=v, condition=cond)


def svd_min(m, tol=DEFAULT):
    """Smallest singular value; exactly 0.0 when numerically rank-deficient."""
    a = as_cmatrix(m)
    s = np.linalg.svd(a, compute_uv=False)
    if a.shape[0] < a.shape[1]:
        return 0.0
    smin = float(s[-1])
    if s[0] == 0.0 or smin <= tol.svd_rank * float(s[0]):
        return 0.0
    return smin


def expm(m, tol=DEFAULT):
    a = _square(m)
    nrm = np.linalg.norm(a, 1)
    if nrm > tol.expm_norm_cap:
        raise OverflowRisk(f"||m||_1 = {nrm:.3g} exceeds cap {tol.expm_norm_cap}")
    return scipy.linalg.expm(a)


def sylvester_offdiag(btil, r12, r21, kappa=None, tol=DEFAULT):
    """Solve for the off-diagonal blocks of N in ``[D, N] = R_off``.

    With ``D = bdiag(0, btil)`` the commutator ``D N - N D`` has blocks
    ``-n12 @ btil`` (top right) and ``btil @ n21`` (bottom left), so

        n21 = btil^{-1} r21 = int_0^inf exp(-s btil) r21 ds
        n12 = -r12 btil^{-1} = -int_0^inf r12 exp(-s btil) ds

    Both integrals converge because the spectrum of ``btil`` lies in the
    right half plane; the solve is done algebraically.
    """
    bt = _square(btil)
    r12 = np.atleast_2d(np.asarray(r12, dtype=complex))
    r21 = np.asarray(r21, dtype=complex).reshape(bt.shape[0], -1)
    gap = float(np.min(np.linalg.eigvals(bt).real))
    floor = tol.kappa_min if kappa is None else kappa
    if gap < floor:
        raise SpectralGapViolation(f"min Re spec(btil) = {gap:.3e} < {floor:.1e}")
    lu = scipy.linalg.lu_factor(bt)
    n21 = scipy.linalg.lu_solve(lu, r21)
    n12 = -scipy.linalg.lu_solve(lu, r12.T, trans=1).T
    return n12, n21


def assemble_offdiag(n12, n21):
    """Block matrix [[0, n12], [n21, 0]] for the (1, d-1) partition."""
    n12 = np.atleast_2d(n12)
    n21 = np.asarray(n21).reshape(-1, n12.shape[0])
    d = 1 + n21.shape[0]
    out = np.zeros((d, d), dtype=complex)
    out[0, 1:] = n12[0]
    out[1:, 0] = n21[:, 0]
    return out


def commutator(a, b):
    return a @ b - b @ a


def sylvester_residual(btil, r12, r21, n12, n21):
    """Relative residual ||[D, N] - R_off|| / ||R_off||."""
    bt = np.asarray(btil, dtype=complex)
    d = bt.shape[0] + 1
    dd = np.zeros((d, d), dtype=complex)
    dd[1:, 1:] = bt
    nn = assemble_offdiag(n12, n21)
    rr = assemble_offdiag(r12, r21)
    scale = max(np.linalg.norm(rr, 2), np.finfo(float).tiny)
    return float(np.linalg.norm(commutator(dd, nn) - rr, 2) / scale)


def opnorm(m):
    """Spectral norm, vectorized over leading axes."""
    return np.linalg.norm(np.asarray(m), ord=2, axis=(-2, -1))
