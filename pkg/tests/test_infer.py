import numpy as np
import pytest

from synthpt.data import PanelDataset, RcsDataset, TrendSystem, cell_means, build_trend_system
from synthpt.identify import convex_trend_bounds, effect_set
from synthpt.infer import (
    ConfidenceSet,
    InferenceConfig,
    bootstrap_critical_value,
    confidence_set,
    default_grid,
    feasibility_test,
    moment_vector,
    perturbed_objective_convex,
    perturbed_objective_linearized,
    profiled_criterion,
    _bootstrap_systems,
    _critical_value_from_mins,
)


def ts_direct(A_pre, b_pre, a_post, delta_hat=0.0, n=100):
    A_pre = np.atleast_2d(np.asarray(A_pre, dtype=float))
    b_pre = np.asarray(b_pre, dtype=float).ravel()
    a_post = np.asarray(a_post, dtype=float).ravel()
    A = np.vstack([A_pre, a_post])
    b = np.append(b_pre, delta_hat)
    return TrendSystem(A_pre=A_pre, b_pre=b_pre, a_post=a_post, A=A, b=b, n=n,
                       treated_T_mean=delta_hat, treated_T0_mean=0.0)


# treated (0,2,4); controls (0,1,1), (0,2,3), (0,3,7): pre-trends (1,2,3),
# treated pre-trend 2, post-trends (0,1,4), treated post-trend 2
SEGMENT_MEANS = np.array([[0.0, 2.0, 4.0],
                          [0.0, 1.0, 1.0],
                          [0.0, 2.0, 3.0],
                          [0.0, 3.0, 7.0]])


def population_panel(means, per_unit=40, t0=2):
    means = np.asarray(means, dtype=float)
    K, T = means.shape
    n = K * per_unit
    units = np.repeat(np.arange(1, K + 1), per_unit)
    outcomes = means[units - 1]
    return PanelDataset(ids=np.arange(n), units=units, outcomes=outcomes,
                        K=K, T=T, T0=t0)


def noisy_rcs(rng, means, sigma=0.2, per_cell=60, t0=None):
    means = np.asarray(means, dtype=float)
    K, T = means.shape
    t0 = T - 1 if t0 is None else t0
    units = np.repeat(np.arange(1, K + 1), T * per_cell)
    periods = np.tile(np.repeat(np.arange(1, T + 1), per_cell), K)
    y = means[units - 1, periods - 1] + rng.normal(scale=sigma, size=units.size)
    return RcsDataset(y, units, periods, K=K, T=T, T0=t0)


def pt_means(rng, K=5, T=5, drift=0.05):
    """Population means whose treated trends equal the uniform control-trend
    average in every period (parallel trends with equal cell sizes)."""
    means = np.zeros((K, T))
    means[1:, 0] = rng.normal(scale=0.5, size=K - 1)
    diffs = rng.normal(loc=0.01, scale=drift, size=(K - 1, T - 1))
    means[1:, 1:] = means[1:, 0][:, None] + np.cumsum(diffs, axis=1)
    means[0, 0] = rng.normal(scale=0.5)
    means[0, 1:] = means[0, 0] + np.cumsum(diffs.mean(axis=0))
    return means


def simplex_grid3(step=2e-3):
    n = int(round(1.0 / step))
    pts = []
    for i in range(n + 1):
        j = np.arange(n - i + 1)
        pts.append(np.column_stack([np.full(j.size, i), j, n - i - j]))
    return np.vstack(pts) / n


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(B=0)
    with pytest.raises(ValueError):
        InferenceConfig(alpha=0.0)
    with pytest.raises(ValueError):
        InferenceConfig(eta=0.5)
    with pytest.raises(ValueError):
        InferenceConfig(alpha=1e-7, varsigma=1e-6)
    with pytest.raises(ValueError):
        InferenceConfig(grid=(0.0, 1.0, 1))
    cfg = InferenceConfig(B=100, grid=(-1.0, 1.0, 5))
    assert cfg.to_dict()["grid"] == [-1.0, 1.0, 5]


# ---------------------------------------------------------------------------
# moment vector
# ---------------------------------------------------------------------------

def test_moment_zero_at_exact_solution():
    A = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    w = np.array([0.25, 0.75])
    b = A @ w
    np.testing.assert_allclose(moment_vector(w, A, b, 0.0), 0.0, atol=1e-15)


def test_moment_basis_shift():
    A = np.array([[2.0], [3.0]])
    b = A[:, 0].copy()
    m = moment_vector(np.array([1.0]), A, b, 5.0)
    np.testing.assert_allclose(m, [0.0, 5.0])


def test_moment_matches_kronecker_form():
    rng = np.random.default_rng(0)
    for _ in range(30):
        t0 = int(rng.integers(2, 5))
        d = int(rng.integers(1, 5))
        A = rng.normal(size=(t0, d))
        b = rng.normal(size=t0)
        w = rng.dirichlet(np.ones(d))
        tau = rng.normal()
        # J(w) [b; vec(A)] + tau e with J(w) = [-I, w' (x) I]
        J = np.hstack([-np.eye(t0), np.kron(w[None, :], np.eye(t0))])
        stacked = np.concatenate([b, A.T.ravel()])  # vec stacks columns
        e = np.zeros(t0)
        e[-1] = 1.0
        expected = J @ stacked + tau * e
        np.testing.assert_allclose(moment_vector(w, A, b, tau), expected, atol=1e-12)


def test_moment_dimension_mismatch():
    with pytest.raises(ValueError):
        moment_vector(np.ones(2), np.ones((3, 3)), np.ones(3), 0.0)


# ---------------------------------------------------------------------------
# profiled criterion
# ---------------------------------------------------------------------------

def test_criterion_zero_at_population_null():
    lam = np.array([0.0, 1.0, 2.0])
    means = lam[None, :] + np.array([0.0, 1.0, 2.0])[:, None]
    ds = population_panel(means, t0=2)
    ts = build_trend_system(cell_means(ds), 2, ds.n)
    ev = profiled_criterion(ts, 0.0)
    assert ev.Q_hat <= 1e-12
    assert abs(ev.statistic - np.sqrt(ds.n) * ev.Q_hat) <= 1e-12 * (1 + ev.statistic)


def test_criterion_zero_inside_effect_set_positive_outside():
    ds = population_panel(SEGMENT_MEANS, t0=2)
    ts = build_trend_system(cell_means(ds), 2, ds.n)
    eff = effect_set(convex_trend_bounds(ts), ts)
    assert eff.kind == "interval"
    assert abs(eff.lo - 0.0) < 1e-8 and abs(eff.hi - 1.0) < 1e-8
    for tau in np.linspace(0.0, 1.0, 7):
        assert profiled_criterion(ts, tau).Q_hat <= 1e-12
    for tau in (-0.5, 1.5, 3.0):
        assert profiled_criterion(ts, tau).Q_hat > 1e-6


def test_criterion_far_candidate_matches_grid_oracle():
    ts = ts_direct([1.0, 2.0, 3.0], [2.0], [0.0, 1.0, 4.0], delta_hat=2.0)
    grid = simplex_grid3()
    vals = (grid @ np.array([1.0, 2.0, 3.0]) - 2.0) ** 2 \
        + (grid @ np.array([0.0, 1.0, 4.0]) - (2.0 - 10.0)) ** 2
    oracle = float(vals.min())
    ev = profiled_criterion(ts, 10.0)
    assert abs(ev.Q_hat - oracle) < 1e-4
    # joint minimization trades off the pre-period fit: vertex (1,0,0)
    assert abs(ev.Q_hat - 65.0) < 1e-8


def test_criterion_unimodal_along_grid():
    rng = np.random.default_rng(1)
    for _ in range(20):
        d = int(rng.integers(2, 6))
        m = int(rng.integers(2, 5))
        A = rng.normal(size=(m, d))
        b = rng.normal(size=m)
        ts = ts_direct(A[:-1], b[:-1], A[-1], delta_hat=b[-1])
        taus = np.linspace(-3, 3, 41)
        q = np.array([profiled_criterion(ts, t).Q_hat for t in taus])
        i = int(np.argmin(q))
        assert np.all(np.diff(q[:i + 1]) <= 1e-10)
        assert np.all(np.diff(q[i:]) >= -1e-10)


# ---------------------------------------------------------------------------
# bootstrap critical values
# ---------------------------------------------------------------------------

def test_quantile_interpolation_type7():
    cfg = InferenceConfig(B=100, alpha=0.05, varsigma=1e-9)
    mins = np.arange(1.0, 101.0)
    cv = _critical_value_from_mins(mins, 0.0, 1.0, cfg)
    assert abs(cv - 95.05) < 1e-3


def test_all_ones_multipliers_zero_critical_value():
    rng = np.random.default_rng(2)
    ds = noisy_rcs(rng, pt_means(rng), per_cell=30)
    ts = build_trend_system(cell_means(ds), ds.T0, ds.n)
    cfg = InferenceConfig(B=100, seed=42)
    cv = bootstrap_critical_value(ds, ts, 0.0, cfg, multipliers="ones")
    assert abs(cv) < 1e-9
    cv1 = bootstrap_critical_value(ds, ts, 0.0, cfg, multipliers="ones",
                                   objective="procedure1")
    assert abs(cv1) < 1e-9


def test_bootstrap_systems_deterministic_in_seed():
    rng = np.random.default_rng(3)
    ds = noisy_rcs(rng, pt_means(rng), per_cell=20)
    ts = build_trend_system(cell_means(ds), ds.T0, ds.n)
    cfg = InferenceConfig(B=100, seed=7)
    M1, b1, s1 = _bootstrap_systems(ds, ts, cfg)
    M2, b2, s2 = _bootstrap_systems(ds, ts, cfg)
    assert np.array_equal(M1, M2) and np.array_equal(b1, b2) and s1 == s2
    M3, _, _ = _bootstrap_systems(ds, ts, InferenceConfig(B=100, seed=8))
    assert not np.array_equal(M1, M3)


def test_critical_values_nonnegative_inside_set():
    # at candidates inside the sample-identified set, Q_hat = 0 and every
    # perturbed minimum is >= 0, so the critical value cannot be negative
    rng = np.random.default_rng(4)
    count = 0
    for seed in range(40):
        means = pt_means(rng)
        ds = noisy_rcs(rng, means, sigma=0.05, per_cell=25)
        ts = build_trend_system(cell_means(ds), ds.T0, ds.n)
        cfg = InferenceConfig(B=100, seed=seed)
        cv = bootstrap_critical_value(ds, ts, float(ts.b[-1] - ts.a_post.mean()), cfg)
        count += cv >= -1e-12
    assert count >= 39


# ---------------------------------------------------------------------------
# perturbation paths agree to first order
# ---------------------------------------------------------------------------

def test_perturbation_first_order_agreement():
    rng = np.random.default_rng(5)
    n = 10_000
    for _ in range(5):
        means = pt_means(rng)
        t0 = means.shape[1] - 1
        K = means.shape[0]
        A = np.vstack([np.diff(means[1:, :t0], axis=1).T,
                       means[1:, -1] - means[1:, t0 - 1]])
        b = np.append(np.diff(means[0, :t0]), means[0, -1] - means[0, t0 - 1])
        ts = TrendSystem(A_pre=A[:-1], b_pre=b[:-1], a_post=A[-1], A=A, b=b,
                         n=n, treated_T_mean=0.0, treated_T0_mean=0.0)
        A_r = A + rng.normal(scale=0.02, size=A.shape)
        b_r = b + rng.normal(scale=0.02, size=b.shape)
        tau = rng.normal(scale=0.1)
        s0 = float(n) ** (-0.25)
        for _ in range(5):
            w = rng.dirichlet(np.ones(K - 1))
            d0 = abs(perturbed_objective_convex(ts, A_r, b_r, tau, s0, n, w)
                     - perturbed_objective_linearized(ts, A_r, b_r, tau, s0, n, w)) / s0
            d1 = abs(perturbed_objective_convex(ts, A_r, b_r, tau, s0 / 2, n, w)
                     - perturbed_objective_linearized(ts, A_r, b_r, tau, s0 / 2, n, w)) / (s0 / 2)
            if d0 < 1e-14:
                continue
            assert d0 / d1 >= 1.8


# ---------------------------------------------------------------------------
# confidence set
# ---------------------------------------------------------------------------

def test_confidence_set_population_exact_contains_effect_set():
    ds = population_panel(SEGMENT_MEANS, per_unit=64, t0=2)
    cfg = InferenceConfig(B=100, seed=11, grid=(-0.5, 1.5, 41))
    cs = confidence_set(ds, cfg)
    inside = (cs.taus >= 0.0) & (cs.taus <= 1.0)
    assert np.all(cs.statistics[inside] <= 1e-9)
    assert np.all(cs.accepted[inside])
    assert not cs.is_empty
    assert np.all(cs.accepted == (cs.statistics <= cs.critical_values + cfg.varsigma))


def test_confidence_set_intervals_match_accept_flags():
    ds = population_panel(SEGMENT_MEANS, per_unit=16, t0=2)
    cfg = InferenceConfig(B=100, seed=3, grid=(-1.0, 2.0, 31))
    cs = confidence_set(ds, cfg)
    flat = np.zeros_like(cs.accepted)
    for lo, hi in cs.intervals:
        flat |= (cs.taus >= lo - 1e-12) & (cs.taus <= hi + 1e-12)
    assert np.array_equal(flat, cs.accepted)


def test_confidence_set_deterministic_across_threads_and_runs():
    rng = np.random.default_rng(6)
    ds = noisy_rcs(rng, pt_means(rng), per_cell=25)
    cfg = InferenceConfig(B=120, seed=99, grid=(-0.3, 0.3, 13))
    runs = [confidence_set(ds, cfg, threads=k) for k in (1, 2, 8, 1)]
    for other in runs[1:]:
        assert np.array_equal(runs[0].statistics, other.statistics)
        assert np.array_equal(runs[0].critical_values, other.critical_values)
        assert runs[0].intervals == other.intervals


def test_confidence_set_extra_taus():
    rng = np.random.default_rng(7)
    ds = noisy_rcs(rng, pt_means(rng), per_cell=25)
    cfg = InferenceConfig(B=100, seed=1, grid=(-0.3, 0.3, 7))
    cs, xs, xc = confidence_set(ds, cfg, extra_taus=np.array([0.0]))
    assert isinstance(cs, ConfidenceSet)
    assert xs.shape == (1,) and xc.shape == (1,)
    # the same candidate evaluated on the grid matches the extra evaluation
    mid = np.argmin(np.abs(cs.taus))
    assert abs(cs.taus[mid]) < 1e-12
    assert abs(cs.statistics[mid] - xs[0]) < 1e-12
    assert abs(cs.critical_values[mid] - xc[0]) < 1e-12


def test_default_grid_centered_at_did():
    rng = np.random.default_rng(8)
    ds = noisy_rcs(rng, pt_means(rng), per_cell=25)
    from synthpt.baselines import did_estimate
    lo, hi, count = default_grid(ds, build_trend_system(cell_means(ds), ds.T0, ds.n))
    did = did_estimate(ds)
    assert count == 500
    assert abs((lo + hi) / 2 - did.estimate) < 1e-10
    assert hi - lo >= 8.0 * did.se - 1e-12


# ---------------------------------------------------------------------------
# feasibility test
# ---------------------------------------------------------------------------

def test_feasibility_population_exact_no_rejection():
    ds = population_panel(SEGMENT_MEANS, per_unit=32, t0=2)
    cfg = InferenceConfig(B=100, seed=5)
    out = feasibility_test(ds, cfg)
    assert out.statistic <= 1e-9
    assert not out.reject
    assert out.reject == (out.statistic > out.critical_value)
    assert 0.0 <= out.p_value_proxy <= 1.0


def test_feasibility_detects_gross_violation():
    rng = np.random.default_rng(9)
    means = pt_means(rng)
    means[0, 1:] += np.linspace(2.0, 6.0, means.shape[1] - 1)  # treated trends leave the hull
    ds = noisy_rcs(rng, means, sigma=0.2, per_cell=40)
    out = feasibility_test(ds, InferenceConfig(B=100, seed=6))
    assert out.reject
    assert out.p_value_proxy <= 0.01
