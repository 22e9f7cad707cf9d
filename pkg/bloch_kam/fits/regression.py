"""
Scaling fits using statsmodels

Every asymptotic claim the lab checks (Weyl error ~ hbar, quasimode residual
~ hbar^(N+2), discrepancy ~ E^(-1/2)) is verified by an ordinary least squares
fit of log y against log x.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import structlog

logger = structlog.get_logger(__name__)

# Try to import statsmodels, handle graceful degradation
try:
    import statsmodels.api as sm
    STATSMODELS_AVAILABLE = True
except ImportError:
    logger.warning("statsmodels not available, scaling fits will lack standard errors")
    STATSMODELS_AVAILABLE = False


@dataclass
class PowerLawFit:
    """log y = intercept + slope log x"""
    slope: float
    intercept: float
    slope_stderr: Optional[float]
    r_squared: Optional[float]
    n_points: int
    skipped: bool = False
    reason: str = ""

    def predict(self, x: float) -> float:
        return float(np.exp(self.intercept) * x**self.slope)

    def as_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "slope_stderr": self.slope_stderr,
            "r_squared": self.r_squared,
            "n_points": self.n_points,
            "skipped": self.skipped,
            "reason": self.reason,
        }


def skipped_fit(reason: str, n_points: int = 0) -> PowerLawFit:
    return PowerLawFit(
        slope=float("nan"),
        intercept=float("nan"),
        slope_stderr=None,
        r_squared=None,
        n_points=n_points,
        skipped=True,
        reason=reason,
    )


def fit_power_law(x: Sequence[float], y: Sequence[float], floor: float = 0.0) -> PowerLawFit:
    """Fit y ~ C x^slope on the points with y > floor

    Args:
        x: Positive abscissae (hbar or E)
        y: Observed magnitudes
        floor: Values at or below this are treated as numerical noise

    Returns:
        PowerLawFit, marked skipped when fewer than two usable points remain
    """
    x_arr = np.asarray(x, dtype=float)
    y_arr = np.asarray(y, dtype=float)
    mask = np.isfinite(x_arr) & np.isfinite(y_arr) & (x_arr > 0) & (y_arr > floor)
    usable = int(mask.sum())
    if usable < 2:
        logger.info("Skipping power-law fit", usable=usable, floor=floor)
        return skipped_fit(f"only {usable} points above floor {floor:g}", usable)

    log_x = np.log(x_arr[mask])
    log_y = np.log(y_arr[mask])

    if STATSMODELS_AVAILABLE:
        design = sm.add_constant(log_x, has_constant="add")
        model = sm.OLS(log_y, design).fit()
        intercept, slope = (float(v) for v in model.params)
        stderr = float(model.bse[1]) if usable > 2 else None
        r_squared = float(model.rsquared) if usable > 2 else 1.0
    else:
        slope, intercept = (float(v) for v in np.polyfit(log_x, log_y, 1))
        stderr, r_squared = None, None

    logger.debug("Power-law fit", slope=slope, stderr=stderr, n=usable)
    return PowerLawFit(
        slope=slope,
        intercept=intercept,
        slope_stderr=stderr,
        r_squared=r_squared,
        n_points=usable,
    )
