"""Comparison estimators nested by the weighting framework: the parallel-trends
implied weights, the double difference-in-means DID estimate, synthetic-control
weights on pre-treatment levels, ridge-penalized intercepted (SDID-style) unit
and time weights, the two-way counterfactual identity, and the implied
parallel-trends violation vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CellStats, PanelDataset, RcsDataset, TrendSystem
from .optim import QpProblem, solve_simplex_qp


@dataclass(frozen=True)
class PtWeights:
    """Control shares among controls: the weights implied by parallel trends."""

    w: np.ndarray

    def to_dict(self) -> dict:
        return {"w": self.w.tolist()}


@dataclass(frozen=True)
class DidResult:
    estimate: float
    se: float
    ci: tuple[float, float]

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "se": self.se,
                "ci": [self.ci[0], self.ci[1]]}


@dataclass(frozen=True)
class ScWeights:
    w: np.ndarray
    pretreatment_sse: float

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "pretreatment_sse": self.pretreatment_sse}


@dataclass(frozen=True)
class SdidWeights:
    w0: float                 # intercept of the unit-weight regression
    w: np.ndarray             # unit weights on the simplex
    nu: np.ndarray            # time weights on the simplex over pre-periods
    nu0: float                # intercept of the time-weight regression
    zeta: float               # ridge penalty actually used

    def to_dict(self) -> dict:
        return {"w0": self.w0, "w": self.w.tolist(), "nu": self.nu.tolist(),
                "nu0": self.nu0, "zeta": self.zeta}


@dataclass(frozen=True)
class PtViolation:
    """Trend gaps (pre rows then the post row) between a candidate weighting
    and the parallel-trends weighting."""

    delta: np.ndarray

    def to_dict(self) -> dict:
        return {"delta": self.delta.tolist()}


# ---------------------------------------------------------------------------
# parallel-trends implied weights and DID
# ---------------------------------------------------------------------------

def pt_weights(data: PanelDataset | RcsDataset) -> PtWeights:
    """Share of each control unit among all control observations (or control
    individuals, for panel data)."""
    if isinstance(data, PanelDataset):
        counts = np.bincount(data.units, minlength=data.K + 1)[2:]
    else:
        counts = np.bincount(data.units, minlength=data.K + 1)[2:].astype(float)
    total = counts.sum()
    if total <= 0:
        raise ValueError("no control observations")
    return PtWeights(w=counts / total)


def did_estimate(data: PanelDataset | RcsDataset) -> DidResult:
    """Double difference-in-means: treated post-trend minus the pooled control
    post-trend, both from period T0 to period T.

    Standard errors are heteroskedasticity-robust; for panel data they cluster
    at the individual by working with individual-level long differences.
    """
    T, T0 = data.T, data.T0
    if isinstance(data, PanelDataset):
        diffs = data.outcomes[:, T - 1] - data.outcomes[:, T0 - 1]
        tr = diffs[data.units == 1]
        ct = diffs[data.units >= 2]
        estimate = float(tr.mean() - ct.mean())
        var = tr.var(ddof=1) / tr.size + ct.var(ddof=1) / ct.size
    else:
        groups = [
            data.outcomes[(data.units == 1) & (data.periods == T)],
            data.outcomes[(data.units == 1) & (data.periods == T0)],
            data.outcomes[(data.units >= 2) & (data.periods == T)],
            data.outcomes[(data.units >= 2) & (data.periods == T0)],
        ]
        estimate = float(groups[0].mean() - groups[1].mean()
                         - (groups[2].mean() - groups[3].mean()))
        var = sum(g.var(ddof=1) / g.size for g in groups)
    se = float(np.sqrt(var))
    return DidResult(estimate=estimate, se=se,
                     ci=(estimate - 1.96 * se, estimate + 1.96 * se))


# ---------------------------------------------------------------------------
# synthetic-control weights (pre-treatment level match)
# ---------------------------------------------------------------------------

def sc_weights(stats: CellStats, t0: int, tol: float = 1e-10,
               max_iter: int = 100_000) -> ScWeights:
    """Simplex weights matching the treated unit's pre-period level means."""
    if t0 < 1:
        raise ValueError("need at least one pre-period")
    M = stats.means[1:, :t0].T            # (T0, K-1) control levels
    v = stats.means[0, :t0]               # treated levels
    res = solve_simplex_qp(QpProblem(M, v, tol=tol, max_iter=max_iter))
    return ScWeights(w=res.w_star, pretreatment_sse=float(res.objective))


# ---------------------------------------------------------------------------
# SDID-style weights (intercept + ridge; time weights intercept-only)
# ---------------------------------------------------------------------------

def default_sdid_zeta(stats: CellStats, t0: int) -> float:
    """Stand-in for the published ridge rule: ((K-1) * 1)^(1/4) times the
    dispersion of first-differenced control pre-period means."""
    diffs = np.diff(stats.means[1:, :t0], axis=1)
    sigma = float(np.std(diffs))
    return ((stats.K - 1) * 1.0) ** 0.25 * sigma


def _intercepted_simplex_fit(M: np.ndarray, v: np.ndarray, ridge: float,
                             tol: float = 1e-10, max_rounds: int = 10_000,
                             qp_tol: float = 1e-10) -> tuple[float, np.ndarray, float]:
    """Alternate between the closed-form intercept and a simplex QP for the
    slope weights; the ridge term enters as sqrt(ridge) * I rows."""
    m, d = M.shape
    w = np.full(d, 1.0 / d)
    ridge_block = np.sqrt(ridge) * np.eye(d) if ridge > 0 else None
    obj_prev = np.inf
    w0 = 0.0
    for _ in range(max_rounds):
        w0 = float(np.mean(v - M @ w))
        if ridge_block is None:
            M_aug, v_aug = M, v - w0
        else:
            M_aug = np.vstack([M, ridge_block])
            v_aug = np.concatenate([v - w0, np.zeros(d)])
        res = solve_simplex_qp(QpProblem(M_aug, v_aug, tol=qp_tol))
        w = res.w_star
        obj = float(res.objective)
        if obj_prev - obj <= tol * (1.0 + abs(obj)):
            obj_prev = min(obj_prev, obj)
            break
        obj_prev = obj
    w0 = float(np.mean(v - M @ w))
    return w0, w, obj_prev


def sdid_weights(stats: CellStats, t0: int,
                 zeta_override: float | None = None) -> SdidWeights:
    """Intercepted ridge regression of treated pre-levels on control
    pre-levels over the simplex, plus intercepted (unpenalized) time weights
    regressing the post period on pre-periods across control units."""
    if t0 < 2:
        raise ValueError("need at least two pre-periods")
    zeta = default_sdid_zeta(stats, t0) if zeta_override is None else float(zeta_override)
    if zeta < 0:
        raise ValueError("zeta must be nonnegative")
    M_unit = stats.means[1:, :t0].T       # (T0, K-1)
    v_unit = stats.means[0, :t0]
    w0, w, _ = _intercepted_simplex_fit(M_unit, v_unit, ridge=zeta)

    M_time = stats.means[1:, :t0]         # (K-1, T0)
    v_time = stats.means[1:, stats.T - 1]
    nu0, nu, _ = _intercepted_simplex_fit(M_time, v_time, ridge=0.0)
    return SdidWeights(w0=w0, w=w, nu=nu, nu0=nu0, zeta=zeta)


def sdid_estimate(stats: CellStats, weights: SdidWeights) -> float:
    """Double-differenced effect: observed treated post outcome minus the
    two-way counterfactual at the fitted unit and time weights."""
    return float(stats.means[0, stats.T - 1]
                 - two_way_counterfactual(stats, weights.nu, weights.w))


def sc_estimate(stats: CellStats, weights: ScWeights) -> float:
    """Observed treated post outcome minus the weighted control post outcome."""
    return float(stats.means[0, stats.T - 1] - stats.means[1:, stats.T - 1] @ weights.w)


# ---------------------------------------------------------------------------
# two-way counterfactual identity
# ---------------------------------------------------------------------------

def two_way_counterfactual(stats: CellStats, nu: np.ndarray, w: np.ndarray) -> float:
    """Counterfactual treated post outcome from time weights nu over the
    pre-periods and unit weights w over the controls:

        sum_t nu_t mu[1, t] + sum_k w_k mu[k, T] - sum_{t,k} nu_t w_k mu[k, t]

    Exact whenever either weighting is valid, for any add-up counterpart.
    """
    nu = np.asarray(nu, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    t0 = nu.size
    if w.size != stats.K - 1 or t0 >= stats.T:
        raise ValueError("weight lengths must be (T0,) and (K-1,)")
    m = stats.means
    treated_pre = float(nu @ m[0, :t0])
    control_post = float(w @ m[1:, stats.T - 1])
    cross = float(nu @ m[1:, :t0].T @ w)
    return treated_pre + control_post - cross


# ---------------------------------------------------------------------------
# parallel-trends violation vector
# ---------------------------------------------------------------------------

def pt_violation_vector(ts: TrendSystem, w: np.ndarray, ptw: PtWeights) -> PtViolation:
    """Trend differences (pre rows then post row) implied by using weights w
    instead of the parallel-trends weights."""
    w = np.asarray(w, dtype=float).ravel()
    if w.size != ts.n_controls or ptw.w.size != ts.n_controls:
        raise ValueError("weights must have one entry per control unit")
    return PtViolation(delta=ts.A @ (w - ptw.w))
