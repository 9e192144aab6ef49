"""Identified sets for the counterfactual trend and the treatment effect.

Under the synthetic-parallel-trends restriction, the treated unit's
counterfactual post-trend is a weighted average of control post-trends for
weights that add to one and reproduce the treated pre-trends. With
unrestricted (affine) weights the set is a point or the whole real line;
adding nonnegativity (convex weights) bounds it between paired LP optima.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TrendSystem
from .optim import least_squares, solve_lp

FEAS_RTOL = 1e-8          # residual tolerance relative to 1 + ||rhs||
COLLAPSE_RTOL = 1e-8      # interval width below which bounds collapse to a point


class InfeasibleSystem(ValueError):
    """Raised when weights are requested for an infeasible trend system."""


@dataclass(frozen=True)
class IdentifiedInterval:
    """One of: empty set, single point, bounded interval, or the whole line."""

    kind: str                 # "empty" | "point" | "interval" | "whole_line"
    lo: float | None = None
    hi: float | None = None

    @classmethod
    def empty(cls) -> "IdentifiedInterval":
        return cls("empty")

    @classmethod
    def point(cls, v: float) -> "IdentifiedInterval":
        v = float(v)
        if not np.isfinite(v):
            raise ValueError("point value must be finite")
        return cls("point", v, v)

    @classmethod
    def interval(cls, lo: float, hi: float) -> "IdentifiedInterval":
        lo, hi = float(lo), float(hi)
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
            raise ValueError(f"invalid interval [{lo}, {hi}]")
        return cls("interval", lo, hi)

    @classmethod
    def whole_line(cls) -> "IdentifiedInterval":
        return cls("whole_line")

    @property
    def is_empty(self) -> bool:
        return self.kind == "empty"

    @property
    def width(self) -> float:
        if self.kind in ("point", "interval"):
            return self.hi - self.lo
        return 0.0 if self.kind == "empty" else np.inf

    def contains(self, x: float, tol: float = 0.0) -> bool:
        if self.kind == "whole_line":
            return True
        if self.kind == "empty":
            return False
        return self.lo - tol <= x <= self.hi + tol

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class SpanTestResult:
    """Least-squares fit of the control post-trends on [1, pre-trend rows]."""

    phi: np.ndarray
    residual: float
    in_span: bool


@dataclass(frozen=True)
class AffineWeights:
    """Minimum-norm add-up weights reproducing the treated pre-trends."""

    w: np.ndarray
    residual: float

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "residual": float(self.residual)}


def _span_design(ts: TrendSystem) -> np.ndarray:
    # (K-1) x T0 design [1, A_pre'] whose column space contains a_post
    # exactly when the trend matrix has the point-identifying structure
    return np.column_stack([np.ones(ts.n_controls), ts.A_pre.T])


def span_test_residual(ts: TrendSystem) -> SpanTestResult:
    """Test whether a_post lies in the span of the all-ones vector and the
    pre-trend rows; the fitted coefficients are the dual certificate."""
    design = _span_design(ts)
    phi, residual = least_squares(design, ts.a_post)
    in_span = residual <= FEAS_RTOL * (1.0 + float(np.linalg.norm(ts.a_post)))
    return SpanTestResult(phi=phi, residual=residual, in_span=in_span)


def pre_system_residual(ts: TrendSystem) -> float:
    """Least-squares residual of the stacked affine system
    [A_pre; 1'] w = [b_pre; 1] (zero iff some affine weight fits exactly)."""
    stacked = np.vstack([ts.A_pre, np.ones(ts.n_controls)])
    rhs = np.append(ts.b_pre, 1.0)
    _, residual = least_squares(stacked, rhs)
    return residual


def affine_trend_set(ts: TrendSystem) -> IdentifiedInterval:
    """Identified set for the counterfactual trend under affine weights.

    Dichotomy: when the pre-period system admits an affine solution, the set
    is a point exactly when a_post is spanned by [1, pre-trend rows] (the
    point is the dual value [1, b_pre'] phi); otherwise it is the whole line.
    """
    residual = pre_system_residual(ts)
    if residual > FEAS_RTOL * (1.0 + float(np.linalg.norm(ts.b_pre))):
        return IdentifiedInterval.empty()
    span = span_test_residual(ts)
    if not span.in_span:
        return IdentifiedInterval.whole_line()
    value = float(np.concatenate([[1.0], ts.b_pre]) @ span.phi)
    return IdentifiedInterval.point(value)


def convex_trend_bounds(ts: TrendSystem) -> IdentifiedInterval:
    """Identified set under convex weights: paired min/max LPs of a_post'w
    over {A_pre w = b_pre, 1'w = 1, w >= 0}."""
    A_eq = np.vstack([ts.A_pre, np.ones(ts.n_controls)])
    b_eq = np.append(ts.b_pre, 1.0)
    lo = solve_lp(ts.a_post, A_eq, b_eq, "min")
    if lo.status == "infeasible":
        return IdentifiedInterval.empty()
    hi = solve_lp(ts.a_post, A_eq, b_eq, "max")
    # the objective over the simplex is bounded by min/max of a_post,
    # so neither program can be unbounded on a feasible system
    if not (lo.is_optimal and hi.is_optimal):
        raise RuntimeError(f"unexpected LP status: {lo.status}/{hi.status}")
    if hi.value - lo.value <= COLLAPSE_RTOL * (1.0 + abs(hi.value)):
        return IdentifiedInterval.point(0.5 * (lo.value + hi.value))
    return IdentifiedInterval.interval(lo.value, hi.value)


def effect_set(trend_set: IdentifiedInterval, ts: TrendSystem) -> IdentifiedInterval:
    """Map a trend set into the treatment-effect set via the observed treated
    post-trend: tau = (observed trend) - (counterfactual trend)."""
    delta = ts.treated_post_trend
    if trend_set.kind == "empty":
        return IdentifiedInterval.empty()
    if trend_set.kind == "whole_line":
        return IdentifiedInterval.whole_line()
    if trend_set.kind == "point":
        return IdentifiedInterval.point(delta - trend_set.lo)
    return IdentifiedInterval.interval(delta - trend_set.hi, delta - trend_set.lo)


def min_norm_affine_weights(ts: TrendSystem) -> AffineWeights:
    """Minimum-norm solution of the stacked system [A_pre; 1'] w = [b_pre; 1]."""
    stacked = np.vstack([ts.A_pre, np.ones(ts.n_controls)])
    rhs = np.append(ts.b_pre, 1.0)
    w, residual = least_squares(stacked, rhs)
    if residual > FEAS_RTOL * (1.0 + float(np.linalg.norm(rhs))):
        raise InfeasibleSystem(
            f"no affine weight reproduces the pre-trends (residual {residual:.3e})")
    return AffineWeights(w=w, residual=float(np.linalg.norm(ts.A_pre @ w - ts.b_pre)))
