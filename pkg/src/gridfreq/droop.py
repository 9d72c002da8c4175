"""Smoothed five-region governor droop characteristic.

Each generator's steady-state response to a frequency deviation ``df`` (Hz)
is a non-increasing curve: flat at the down-regulation floor, a quadratic
transition, the linear region ``-k*df``, another quadratic transition, and
flat at the up-regulation ceiling.  The quadratics join the neighbouring
segments with matching value and slope, so the curve is C1 and safe inside
Newton iterations.

Construction places each transition symmetrically around the ideal corner
(where the linear segment would hit saturation); that midpoint choice is the
unique parabola satisfying all four value/slope conditions at once.  The
half-width shrinks automatically near degenerate corners (units parked at a
power limit) so that the curve stays total and passes through zero at
``df = 0`` whenever the unit has any headroom.
"""

from __future__ import annotations

from dataclasses import dataclass

from .case_io import Generator, NetworkCase
from .errors import DegenerateCurveError

#: Minimal transition half-width substituted for a pure kink at a corner
#: that sits exactly at df = 0 (unit parked at a limit).
KINK_HALFWIDTH = 1e-4


@dataclass(frozen=True)
class DroopCurve:
    """Piecewise droop response for one generator.

    ``k`` is the droop gain in p.u. power per Hz (0 for a unit with no
    adjustable range).  ``dp_min <= F(df) <= dp_max`` always, with
    breakpoints ``f1 > f2 >= f3 > f4`` delimiting the five regions.
    """

    k: float
    dp_min: float
    dp_max: float
    f1: float
    f2: float
    f3: float
    f4: float
    a1: float
    b1: float
    c1: float
    a2: float
    b2: float
    c2: float

    def value(self, df: float) -> float:
        return eval_droop(self, df)

    def deriv(self, df: float) -> float:
        return eval_droop_derivative(self, df)

    def deriv2(self, df: float) -> float:
        """Second derivative of the selected region (enters KKT Hessians)."""
        if df >= self.f1:
            return 0.0
        if df >= self.f2:
            return 2.0 * self.a1
        if df >= self.f3:
            return 0.0
        if df >= self.f4:
            return 2.0 * self.a2
        return 0.0


def eval_droop(curve: DroopCurve, df: float) -> float:
    """Evaluate the droop response at frequency deviation ``df`` (Hz)."""
    if df >= curve.f1:
        return curve.dp_min
    if df >= curve.f2:
        return curve.a1 * df * df + curve.b1 * df + curve.c1
    if df >= curve.f3:
        return -curve.k * df
    if df >= curve.f4:
        return curve.a2 * df * df + curve.b2 * df + curve.c2
    return curve.dp_max


def eval_droop_derivative(curve: DroopCurve, df: float) -> float:
    """Exact derivative dF/d(df) of the selected region."""
    if df >= curve.f1:
        return 0.0
    if df >= curve.f2:
        return 2.0 * curve.a1 * df + curve.b1
    if df >= curve.f3:
        return -curve.k
    if df >= curve.f4:
        return 2.0 * curve.a2 * df + curve.b2
    return 0.0


def _corner_halfwidth(delta: float, width: float, corner: float) -> float:
    # Never consume more than a quarter of the linear range per corner, and
    # never let a transition region straddle df = 0 (keeps F(0) exact).
    h = min(delta, 0.25 * width, abs(corner))
    if h == 0.0 and width > 0.0:
        h = min(KINK_HALFWIDTH, 0.25 * width)
    return h


def build_droop_curve(
    gen: Generator,
    droop_pct: float,
    f_nominal: float,
    smoothing_halfwidth: float = 0.05,
    droop_base: str = "pmax",
) -> DroopCurve:
    """Construct the droop curve for one generator.

    ``droop_pct`` is the fractional droop (0.04 for a 4% setting): a full
    ``droop_pct * f_nominal`` Hz deviation spans the unit's rated power, so
    ``k = rated / (droop_pct * f_nominal)``.  ``droop_base`` selects the
    rating: generator capacity ``pmax`` (default) or machine ``mbase``.

    Saturation levels anchor to the operating point: ``dp_max = pmax - pg``
    and ``dp_min = pmin - pg`` (clamped to keep dp_min <= 0 <= dp_max when
    the dispatch sits outside its limits).
    """
    if droop_pct <= 0.0:
        raise DegenerateCurveError(f"droop_pct must be positive, got {droop_pct}")
    if f_nominal <= 0.0:
        raise DegenerateCurveError(f"f_nominal must be positive, got {f_nominal}")
    if droop_base == "pmax":
        rated = gen.pmax if gen.pmax > 0 else gen.mbase
    elif droop_base == "mbase":
        rated = gen.mbase if gen.mbase > 0 else gen.pmax
    else:
        raise ValueError(f"unknown droop_base {droop_base!r}")
    if rated <= 0:
        rated = abs(gen.pmin)

    dp_max = max(gen.pmax - gen.pg, 0.0)
    dp_min = min(gen.pmin - gen.pg, 0.0)
    flat = DroopCurve(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                      0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    if rated <= 0 or (dp_max == 0.0 and dp_min == 0.0):
        return flat

    k = rated / (droop_pct * f_nominal)
    c_lo = -dp_max / k      # corner where the linear segment hits dp_max
    c_up = -dp_min / k      # corner where it hits dp_min
    width = c_up - c_lo
    if width <= 0.0:
        return flat

    d_up = _corner_halfwidth(smoothing_halfwidth, width, c_up)
    d_lo = _corner_halfwidth(smoothing_halfwidth, width, c_lo)

    f1 = c_up + d_up
    f2 = c_up - d_up
    f3 = c_lo + d_lo
    f4 = c_lo - d_lo
    if not (f1 >= f2 >= f3 >= f4):
        raise DegenerateCurveError(
            f"droop breakpoints out of order: {f1}, {f2}, {f3}, {f4}"
        )

    # Quadratic joining the linear segment (value -k*f2, slope -k) to the
    # floor (value dp_min, slope 0 at f1); empty region when d_up == 0.
    if d_up > 0.0:
        a1 = k / (4.0 * d_up)
        b1 = -k * (d_up + c_up) / (2.0 * d_up)
        c1 = k * (c_up - d_up) ** 2 / (4.0 * d_up)
    else:
        a1 = b1 = c1 = 0.0
    # Mirror construction toward the ceiling dp_max.
    if d_lo > 0.0:
        a2 = -k / (4.0 * d_lo)
        b2 = k * (c_lo - d_lo) / (2.0 * d_lo)
        c2 = -k * (c_lo + d_lo) ** 2 / (4.0 * d_lo)
    else:
        a2 = b2 = c2 = 0.0

    return DroopCurve(k, dp_min, dp_max, f1, f2, f3, f4,
                      a1, b1, c1, a2, b2, c2)


def build_droop_curves(
    net: NetworkCase,
    droop_pct: float = 0.04,
    smoothing_halfwidth: float = 0.05,
    droop_base: str = "pmax",
) -> dict[int, DroopCurve]:
    """Droop curves for every in-service generator, keyed by gen index.

    Curves anchor to each unit's *current* operating point, so they must be
    rebuilt after redispatch or a contingency.
    """
    return {
        g.index: build_droop_curve(
            g, droop_pct, net.f_nominal, smoothing_halfwidth, droop_base
        )
        for g in net.in_service_gens()
    }


def aggregate_gain(curves: dict[int, DroopCurve]) -> float:
    """Total small-signal droop gain (p.u./Hz) of a curve set."""
    return sum(c.k for c in curves.values())


def linear_region(curve: DroopCurve) -> tuple[float, float]:
    """Half-open interval [f3, f2) where the response is exactly -k*df."""
    return curve.f3, curve.f2
