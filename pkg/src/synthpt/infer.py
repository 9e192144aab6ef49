"""Profiled-criterion inference for the treatment-effect identified set.

For a candidate effect tau, the moment vector stacks the pre-trend balance
equations and the post-trend equation shifted by tau. Its squared norm,
minimized over simplex weights, is the profiled criterion; the test statistic
is sqrt(n) times that minimum. Critical values come from an exponential-
multiplier bootstrap whose directional derivative is approximated numerically
with step s_n = n^(-eta): the estimated system is perturbed toward each
bootstrap draw (which keeps the inner problem convex), the perturbed minimum
is differenced against the unperturbed one and divided by s_n, and the
(1 - alpha + varsigma)-quantile of those values is the critical value. The
confidence set collects the grid points whose statistic does not exceed the
critical value plus varsigma, and the same machinery restricted to the
pre-period block tests whether any simplex weight fits the pre-trends at all.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import did_estimate
from .data import (
    CellAggregator,
    DataError,
    PanelDataset,
    RcsDataset,
    TrendSystem,
    build_trend_system,
)
from .identify import IdentifiedInterval, convex_trend_bounds, effect_set
from .optim import (
    QpProblem,
    _power_iteration_gram,
    _project_rows,
    solve_simplex_qp,
    solve_simplex_qp_batch,
)


class BootstrapDegenerate(RuntimeError):
    """A bootstrap replication produced an unusable reweighted dataset."""


@dataclass(frozen=True)
class InferenceConfig:
    """Settings for test inversion.

    ``eta`` sets the numerical-derivative step s_n = n^(-eta); any value in
    (0, 1/2) keeps s_n -> 0 while s_n * sqrt(n) -> infinity. ``varsigma`` is
    the infinitesimal uniformity offset: the quantile level is
    1 - alpha + varsigma and acceptance compares against the critical value
    plus varsigma, so alpha - varsigma must stay positive. ``grid`` is
    (lo, hi, count); when omitted the grid is centered at the DID estimate
    with half-width max(4 se, set width + 2 se).
    """

    alpha: float = 0.05
    varsigma: float = 1e-6
    B: int = 1000
    eta: float = 0.25
    grid: tuple[float, float, int] | None = None
    seed: int = 0
    qp_tol: float = 1e-10
    qp_max_iter: int = 100_000

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.varsigma <= 0.0:
            raise ValueError("varsigma must be positive")
        if self.alpha - self.varsigma <= 0.0:
            raise ValueError("alpha - varsigma must stay positive")
        if self.B < 100:
            raise ValueError("need at least 100 bootstrap replications")
        if not 0.0 < self.eta < 0.5:
            raise ValueError("eta must lie in (0, 1/2)")
        if self.grid is not None:
            lo, hi, count = self.grid
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError("grid bounds must be finite with lo < hi")
            if int(count) < 2:
                raise ValueError("grid needs at least 2 points")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "varsigma": self.varsigma,
            "B": self.B,
            "eta": self.eta,
            "grid": list(self.grid) if self.grid is not None else None,
            "seed": self.seed,
            "qp_tol": self.qp_tol,
            "qp_max_iter": self.qp_max_iter,
        }


@dataclass(frozen=True)
class CriterionEval:
    tau: float
    Q_hat: float
    w_star: np.ndarray
    statistic: float


@dataclass(frozen=True)
class ConfidenceSet:
    taus: np.ndarray
    statistics: np.ndarray
    critical_values: np.ndarray
    accepted: np.ndarray
    intervals: list[tuple[float, float]]
    alpha: float
    B: int
    seed: int
    varsigma: float
    eta: float
    n: int

    @property
    def is_empty(self) -> bool:
        return not bool(self.accepted.any())

    def to_dict(self) -> dict:
        return {
            "grid": [
                {"tau": float(t), "statistic": float(s), "critical_value": float(c),
                 "accepted": bool(a)}
                for t, s, c, a in zip(self.taus, self.statistics,
                                      self.critical_values, self.accepted)
            ],
            "intervals": [[float(lo), float(hi)] for lo, hi in self.intervals],
            "alpha": self.alpha,
            "B": self.B,
            "seed": self.seed,
            "varsigma": self.varsigma,
            "eta": self.eta,
            "n": self.n,
        }


@dataclass(frozen=True)
class FeasibilityTestResult:
    statistic: float
    critical_value: float
    reject: bool
    p_value_proxy: float

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "critical_value": self.critical_value,
                "reject": self.reject, "p_value_proxy": self.p_value_proxy}


# ---------------------------------------------------------------------------
# moment vector and profiled criterion
# ---------------------------------------------------------------------------

def moment_vector(w: np.ndarray, A: np.ndarray, b: np.ndarray, tau: float) -> np.ndarray:
    """A w - b + tau * e_last, the stacked trend-balance moments at tau."""
    w = np.asarray(w, dtype=float).ravel()
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    if A.shape != (b.size, w.size):
        raise ValueError(f"dimension mismatch: A is {A.shape}, b has {b.size}, "
                         f"w has {w.size}")
    m = A @ w - b
    m[-1] += tau
    return m


def profiled_criterion(ts: TrendSystem, tau: float,
                       cfg: InferenceConfig | None = None) -> CriterionEval:
    """Squared moment norm minimized over the weight simplex at candidate tau."""
    cfg = cfg or InferenceConfig()
    e_shift = np.zeros(ts.T0)
    e_shift[-1] = tau
    res = solve_simplex_qp(QpProblem(ts.A, ts.b - e_shift,
                                     tol=cfg.qp_tol, max_iter=cfg.qp_max_iter))
    q = float(res.objective)
    return CriterionEval(tau=float(tau), Q_hat=q, w_star=res.w_star,
                         statistic=float(np.sqrt(ts.n) * q))


# ---------------------------------------------------------------------------
# bootstrap ensemble
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Ensemble:
    """Perturbed systems M_r = A_hat + s_n sqrt(n) (A_r - A_hat) and the
    matching right-hand sides, with cached Gram pieces reused across taus."""

    M: np.ndarray          # (B, T0, d)
    b_pert: np.ndarray     # (B, T0)
    s_n: float
    n: int
    MtM: np.ndarray = field(repr=False, default=None)
    Mt_b: np.ndarray = field(repr=False, default=None)
    Mt_e: np.ndarray = field(repr=False, default=None)
    b_sq: np.ndarray = field(repr=False, default=None)
    b_last: np.ndarray = field(repr=False, default=None)
    L: np.ndarray = field(repr=False, default=None)

    @classmethod
    def build(cls, M: np.ndarray, b_pert: np.ndarray, s_n: float, n: int) -> "_Ensemble":
        MtM = np.einsum("bji,bjk->bik", M, M)
        Mt_b = np.einsum("bji,bj->bi", M, b_pert)
        Mt_e = M[:, -1, :].copy()
        b_sq = np.einsum("bj,bj->b", b_pert, b_pert)
        b_last = b_pert[:, -1].copy()
        L = np.array([_power_iteration_gram(MtM[r]) for r in range(M.shape[0])])
        return cls(M=M, b_pert=b_pert, s_n=s_n, n=n, MtM=MtM, Mt_b=Mt_b,
                   Mt_e=Mt_e, b_sq=b_sq, b_last=b_last, L=L)


def _draw_multipliers(rng: np.random.Generator, n: int, kind: str) -> np.ndarray:
    if kind == "exponential":
        return rng.exponential(scale=1.0, size=n)
    if kind == "ones":
        return np.ones(n)
    raise ValueError(f"unknown multiplier kind {kind!r}")


def _bootstrap_systems(data: PanelDataset | RcsDataset, ts: TrendSystem,
                       cfg: InferenceConfig, multipliers: str = "exponential",
                       aggregator: CellAggregator | None = None,
                       ) -> tuple[np.ndarray, np.ndarray, float]:
    """Per replication r: seed the generator with seed XOR r, draw one
    multiplier per sampled individual, and rebuild the trend system; return
    the convexly perturbed stacked systems and the step size."""
    agg = aggregator if aggregator is not None else CellAggregator(data)
    n = data.n
    s_n = float(n) ** (-cfg.eta)
    root = np.sqrt(n)
    scale = s_n * root
    B, t0 = cfg.B, ts.T0
    d = ts.n_controls
    M = np.empty((B, t0, d))
    b_pert = np.empty((B, t0))
    for r in range(1, B + 1):
        rng = np.random.default_rng(cfg.seed ^ r)
        w = _draw_multipliers(rng, n, multipliers)
        try:
            stats_r = agg.weighted_means(w)
            ts_r = build_trend_system(stats_r, data.T0, n)
        except DataError as exc:
            raise BootstrapDegenerate(f"replication {r}: {exc}") from exc
        # A_hat + s_n * sqrt(n) (A_r - A_hat), likewise for b
        M[r - 1] = ts.A + scale * (ts_r.A - ts.A)
        b_pert[r - 1] = ts.b + scale * (ts_r.b - ts.b)
    return M, b_pert, s_n


def _critical_value_from_mins(perturbed_mins: np.ndarray, q_hat: float,
                              s_n: float, cfg: InferenceConfig) -> float:
    phi = (perturbed_mins - q_hat) / s_n
    return float(np.quantile(phi, 1.0 - cfg.alpha + cfg.varsigma))


def _evaluate_taus(ts: TrendSystem, ens: _Ensemble, taus: np.ndarray,
                   cfg: InferenceConfig, threads: int = 1,
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Statistics and bootstrap critical values for a batch of candidates.

    The multiplier draws behind ``ens`` are shared across all taus, so
    acceptance profiles are smooth in tau and runs are reproducible.
    """
    taus = np.asarray(taus, dtype=float)
    B = ens.M.shape[0]
    t0 = ts.T0

    def one(tau: float) -> tuple[float, float]:
        base = profiled_criterion(ts, tau, cfg)
        v = ens.b_pert.copy()
        v[:, -1] -= tau
        grams = (ens.MtM, ens.Mt_b - tau * ens.Mt_e,
                 ens.b_sq - 2.0 * tau * ens.b_last + tau * tau)
        start = np.broadcast_to(base.w_star, (B, base.w_star.size))
        _, mins, _ = solve_simplex_qp_batch(
            ens.M, v, tol=cfg.qp_tol, max_iter=cfg.qp_max_iter,
            start=start, grams=grams, L=ens.L)
        cv = _critical_value_from_mins(mins, base.Q_hat, ens.s_n, cfg)
        return base.statistic, cv

    if threads > 1 and taus.size > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, taus))
    else:
        results = [one(t) for t in taus]
    stats = np.array([r[0] for r in results])
    cvs = np.array([r[1] for r in results])
    return stats, cvs


def bootstrap_critical_value(data: PanelDataset | RcsDataset, ts: TrendSystem,
                             tau: float, cfg: InferenceConfig,
                             multipliers: str = "exponential",
                             objective: str = "convex_perturbation") -> float:
    """Bootstrap critical value at one candidate effect.

    ``objective`` selects the production convex perturbation of the estimated
    matrices, or the literal linearized perturbation of the squared moment
    (non-convex; solved by multi-start projected gradient) kept for checking
    that the two agree to first order.
    """
    M, b_pert, s_n = _bootstrap_systems(data, ts, cfg, multipliers)
    base = profiled_criterion(ts, tau, cfg)
    if objective == "convex_perturbation":
        ens = _Ensemble.build(M, b_pert, s_n, data.n)
        stats, cvs = _evaluate_taus(ts, ens, np.array([tau]), cfg)
        return float(cvs[0])
    if objective != "procedure1":
        raise ValueError(f"unknown objective {objective!r}")
    root = np.sqrt(data.n)
    mins = np.empty(cfg.B)
    for r in range(cfg.B):
        # recover the bootstrap system from the perturbed one
        A_r = ts.A + (M[r] - ts.A) / (s_n * root)
        b_r = ts.b + (b_pert[r] - ts.b) / (s_n * root)
        rng = np.random.default_rng((cfg.seed ^ (r + 1)) + 0x9E3779B9)
        mins[r] = _minimize_linearized(ts, A_r, b_r, tau, s_n, data.n, rng, cfg)
    return _critical_value_from_mins(mins, base.Q_hat, s_n, cfg)


# ---------------------------------------------------------------------------
# literal (linearized, non-convex) perturbation, kept for equivalence checks
# ---------------------------------------------------------------------------

def perturbed_objective_convex(ts: TrendSystem, A_r: np.ndarray, b_r: np.ndarray,
                               tau: float, s_n: float, n: int, w: np.ndarray) -> float:
    """Squared moment at the convexly perturbed system (production path)."""
    root = np.sqrt(n)
    M = ts.A + s_n * root * (A_r - ts.A)
    v = ts.b + s_n * root * (b_r - ts.b)
    m = moment_vector(w, M, v, tau)
    return float(m @ m)


def perturbed_objective_linearized(ts: TrendSystem, A_r: np.ndarray, b_r: np.ndarray,
                                   tau: float, s_n: float, n: int, w: np.ndarray) -> float:
    """m_hat^2(w) + s_n * g_n(w) with g_n = sqrt(n)(m_boot^2 - m_hat^2)."""
    root = np.sqrt(n)
    m_hat = moment_vector(w, ts.A, ts.b, tau)
    m_boot = moment_vector(w, A_r, b_r, tau)
    return float(m_hat @ m_hat + s_n * root * (m_boot @ m_boot - m_hat @ m_hat))


def _minimize_linearized(ts: TrendSystem, A_r: np.ndarray, b_r: np.ndarray,
                         tau: float, s_n: float, n: int,
                         rng: np.random.Generator, cfg: InferenceConfig) -> float:
    """Multi-start projected gradient on the (indefinite) linearized objective."""
    root = np.sqrt(n)
    a = s_n * root
    e_shift = np.zeros(ts.T0)
    e_shift[-1] = tau
    v_hat = ts.b - e_shift
    v_boot = b_r - e_shift
    # f(w) = (1-a) ||A w - v_hat||^2 + a ||A_r w - v_boot||^2
    H = (1.0 - a) * ts.A.T @ ts.A + a * A_r.T @ A_r
    q = (1.0 - a) * ts.A.T @ v_hat + a * A_r.T @ v_boot
    c0 = (1.0 - a) * float(v_hat @ v_hat) + a * float(v_boot @ v_boot)
    d = ts.n_controls
    L = _power_iteration_gram(H @ H) ** 0.5  # spectral norm, H may be indefinite
    if L <= 1e-300:
        w0 = np.full(d, 1.0 / d)
        return c0 - 2.0 * float(q @ w0) + float(w0 @ H @ w0)

    def value(w: np.ndarray) -> float:
        return c0 - 2.0 * float(q @ w) + float(w @ H @ w)

    starts = [np.full(d, 1.0 / d)]
    starts += [rng.dirichlet(np.ones(d)) for _ in range(16)]
    best = np.inf
    for w in starts:
        w = w.copy()
        for _ in range(2000):
            g = H @ w - q
            w_new = _project_rows((w - g / L)[None, :])[0]
            if np.linalg.norm(w_new - w) <= 1e-12:
                w = w_new
                break
            w = w_new
        best = min(best, value(w))
    return best


# ---------------------------------------------------------------------------
# confidence set by test inversion
# ---------------------------------------------------------------------------

def default_grid(data: PanelDataset | RcsDataset, ts: TrendSystem,
                 count: int = 500) -> tuple[float, float, int]:
    """Grid centered at the DID estimate; half-width covers the estimated
    effect set plus sampling noise."""
    did = did_estimate(data)
    est_set = effect_set(convex_trend_bounds(ts), ts)
    width = est_set.width if est_set.kind in ("point", "interval") else 0.0
    half = max(4.0 * did.se, width + 2.0 * did.se)
    return (did.estimate - half, did.estimate + half, count)


def _accepted_intervals(taus: np.ndarray, accepted: np.ndarray) -> list[tuple[float, float]]:
    intervals: list[tuple[float, float]] = []
    start = None
    for i, ok in enumerate(accepted):
        if ok and start is None:
            start = taus[i]
        elif not ok and start is not None:
            intervals.append((float(start), float(taus[i - 1])))
            start = None
    if start is not None:
        intervals.append((float(start), float(taus[-1])))
    return intervals


def confidence_set(data: PanelDataset | RcsDataset, cfg: InferenceConfig,
                   threads: int = 1,
                   extra_taus: np.ndarray | None = None,
                   ) -> ConfidenceSet | tuple[ConfidenceSet, np.ndarray, np.ndarray]:
    """Invert the profiled-criterion test over a grid of candidate effects.

    A candidate is accepted when sqrt(n) Q_hat(tau) <= critical_value(tau) +
    varsigma. One set of B multiplier draws (seeded from cfg.seed) is shared
    by every candidate. ``extra_taus`` lets callers test off-grid candidates
    (e.g. the true effect in coverage studies) against the same draws; the
    return value then carries their statistics and critical values.
    """
    agg = CellAggregator(data)
    ts = build_trend_system(agg.means(), data.T0, data.n)
    grid = cfg.grid if cfg.grid is not None else default_grid(data, ts)
    taus = np.linspace(grid[0], grid[1], int(grid[2]))

    M, b_pert, s_n = _bootstrap_systems(data, ts, cfg, aggregator=agg)
    ens = _Ensemble.build(M, b_pert, s_n, data.n)
    stats, cvs = _evaluate_taus(ts, ens, taus, cfg, threads=threads)
    accepted = stats <= cvs + cfg.varsigma
    cs = ConfidenceSet(
        taus=taus, statistics=stats, critical_values=cvs, accepted=accepted,
        intervals=_accepted_intervals(taus, accepted),
        alpha=cfg.alpha, B=cfg.B, seed=cfg.seed, varsigma=cfg.varsigma,
        eta=cfg.eta, n=data.n)
    if extra_taus is None:
        return cs
    xs, xc = _evaluate_taus(ts, ens, np.asarray(extra_taus, dtype=float), cfg,
                            threads=threads)
    return cs, xs, xc


# ---------------------------------------------------------------------------
# feasibility test for the pre-period system
# ---------------------------------------------------------------------------

def feasibility_test(data: PanelDataset | RcsDataset, cfg: InferenceConfig,
                     ) -> FeasibilityTestResult:
    """Test whether any simplex weight reproduces the treated pre-trends.

    The statistic is sqrt(n) times the simplex minimum of
    ||A_pre w - b_pre||^2; the critical value reuses the multiplier bootstrap
    restricted to the pre-period block, at level 1 - alpha + varsigma, plus
    varsigma.
    """
    agg = CellAggregator(data)
    ts = build_trend_system(agg.means(), data.T0, data.n)
    base = solve_simplex_qp(QpProblem(ts.A_pre, ts.b_pre,
                                      tol=cfg.qp_tol, max_iter=cfg.qp_max_iter))
    q_hat = float(base.objective)
    statistic = float(np.sqrt(data.n) * q_hat)

    M, b_pert, s_n = _bootstrap_systems(data, ts, cfg, aggregator=agg)
    M_pre = np.ascontiguousarray(M[:, :-1, :])
    b_pre = np.ascontiguousarray(b_pert[:, :-1])
    B = M_pre.shape[0]
    start = np.broadcast_to(base.w_star, (B, base.w_star.size))
    _, mins, _ = solve_simplex_qp_batch(M_pre, b_pre, tol=cfg.qp_tol,
                                        max_iter=cfg.qp_max_iter, start=start)
    phi = (mins - q_hat) / s_n
    critical_value = float(np.quantile(phi, 1.0 - cfg.alpha + cfg.varsigma)) + cfg.varsigma
    return FeasibilityTestResult(
        statistic=statistic,
        critical_value=critical_value,
        reject=bool(statistic > critical_value),
        p_value_proxy=float(np.mean(phi >= statistic)),
    )
