"""Power-law decay fits on log-log axes."""

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .config import DEFAULT


@dataclass
class DecayFit:
    """y(t) ~ constant * (1 + t)^exponent [* log(e + t)] on ``window``."""

    exponent: float
    constant: float
    r_squared: float
    window: tuple
    log_correction_used: bool
    half_window_exponent: float = math.nan
    stable: bool = False
    accepted: bool = False

    def to_dict(self):
        out = asdict(self)
        out["window"] = list(self.window)
        return out

    def model(self, t):
        t = np.asarray(t, float)
        y = self.constant * (1 + t) ** self.exponent
        return y * np.log(math.e + t) if self.log_correction_used else y


def _line(t, y, log_correction):
    x = np.log1p(t)
    z = np.log(y)
    if log_correction:
        z = z - np.log(np.log(math.e + t))
    res = stats.linregress(x, z)
    return res.slope, math.exp(res.intercept), res.rvalue ** 2


def fit_decay(t, y, window=None, log_correction=False, tol=DEFAULT):
    """Least-squares exponent of ``y`` against ``1 + t`` inside ``window``.

    Stability refits on the upper half of the window in log scale,
    [sqrt(t_min t_max), t_max]; the fit is accepted when R^2 reaches
    ``tol.fit_r2_min`` and the two exponents differ by at most
    ``tol.fit_window_stability``.
    """
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    lo, hi = (t.min(), t.max()) if window is None else window
    keep = (t >= lo) & (t <= hi) & (y > 0) & np.isfinite(y)
    if keep.sum() < 3:
        raise ValueError("need at least three positive samples inside the window")
    slope, const, r2 = _line(t[keep], y[keep], log_correction)
    mid = math.sqrt(lo * hi)
    half = keep & (t >= mid)
    if half.sum() >= 3:
        slope_h = _line(t[half], y[half], log_correction)[0]
    else:
        slope_h = math.nan
    stable = bool(abs(slope - slope_h) <= tol.fit_window_stability)
    return DecayFit(float(slope), float(const), float(r2), (float(lo), float(hi)), log_correction,
                    float(slope_h), stable, bool(stable and r2 >= tol.fit_r2_min))
