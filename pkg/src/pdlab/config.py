"""Central tolerance record. Every numerical threshold used by the package
is read from here so that a run is fully described by its configuration."""

from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class Tolerances:
    # matkernel
    eig_residual: float = 1e-10
    defective_condition: float = 1e12
    svd_rank: float = 1e-12
    expm_norm_cap: float = 700.0
    sylvester_residual: float = 1e-12
    # hypotheses
    hermitian: float = 1e-10
    psd: float = 1e-10
    kernel: float = 1e-10
    kappa_min: float = 1e-6
    kalman_min: float = 1e-6
    # finite differences for tabulated coefficients
    fd_step: float = 1e-4
    # symbol order diagnostics
    order_slope: float = 0.25
    degenerate: float = 1e-14
    # diagonalizer
    invertibility_margin: float = 0.5
    zone_min: float = 1e-4
    block_residual: float = 1e-10
    continuation_overlap: float = 0.9
    lower_order_cancel: float = 1e-10
    # propagator
    rk_tol: float = 1e-9
    volterra_tol: float = 1e-10
    volterra_max_iter: int = 60
    quad_tol: float = 1e-10
    t_max: float = 1e4
    # lyapunov
    equivalence_bound: float = 0.75
    gamma_floor: float = 1e-8
    # diffusion fits
    fit_r2_min: float = 0.98
    fit_window_stability: float = 0.05

    def to_dict(self):
        return asdict(self)

    def with_(self, **kw):
        return replace(self, **kw)


DEFAULT = Tolerances()
