"""Dense optimization kernels: simplex projection, simplex-constrained
least squares, a two-phase simplex LP solver, and minimum-norm least squares.

These are the numerical workhorses behind the identified-set and profiled-
criterion computations. They are deliberately small, dense and deterministic:
problem sizes are (number of pre-periods) x (number of control units), and
results feed statistical tests, so reproducibility matters more than speed
on large instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lstsq as _scipy_lstsq


class NonFiniteInput(ValueError):
    """Raised when an input array contains NaN or infinity."""


# ---------------------------------------------------------------------------
# Projection onto the probability simplex
# ---------------------------------------------------------------------------

def project_simplex(x: np.ndarray) -> np.ndarray:
    """Euclidean projection of ``x`` onto {w >= 0, sum(w) = 1}.

    Sort-and-threshold rule: with u the coordinates of x sorted in
    descending order, the optimal threshold is theta = (cumsum(u)_rho - 1)/rho
    where rho is the largest index with u_rho > (cumsum(u)_rho - 1)/rho, and
    the projection is max(x - theta, 0).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("project_simplex expects a nonempty 1-d array")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("project_simplex: input has non-finite entries")
    return _project_rows(x[None, :])[0]


def _project_rows(X: np.ndarray) -> np.ndarray:
    """Row-wise simplex projection of a 2-d array (vectorized sort-threshold)."""
    d = X.shape[1]
    u = -np.sort(-X, axis=1)
    css = np.cumsum(u, axis=1)
    j = np.arange(1, d + 1)
    cond = u - (css - 1.0) / j > 0.0
    # rho = last index where cond holds; cond always holds at j=1
    rho = d - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = (np.take_along_axis(css, rho[:, None], axis=1)[:, 0] - 1.0) / (rho + 1.0)
    return np.maximum(X - theta[:, None], 0.0)


# ---------------------------------------------------------------------------
# Simplex-constrained least squares (accelerated projected gradient)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QpProblem:
    """min_w ||M w - v||^2 over the probability simplex."""

    M: np.ndarray
    v: np.ndarray
    tol: float = 1e-10
    max_iter: int = 100_000

    def __post_init__(self) -> None:
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        v = np.asarray(self.v, dtype=float).ravel()
        if M.shape[0] != v.size:
            raise ValueError(f"shape mismatch: M has {M.shape[0]} rows, v has {v.size}")
        if M.shape[1] < 1:
            raise ValueError("M needs at least one column")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "v", v)


@dataclass(frozen=True)
class QpResult:
    w_star: np.ndarray
    objective: float
    iterations: int
    converged: bool
    history: list[float] | None = field(default=None, repr=False)


def _power_iteration_gram(MtM: np.ndarray, iters: int = 50, tol: float = 1e-10) -> float:
    """Largest eigenvalue of a PSD matrix, deterministic start, 5% margin."""
    d = MtM.shape[0]
    # slight tilt breaks the (measure-zero) case of ones being orthogonal
    # to the leading eigenvector
    z = np.ones(d) + np.linspace(0.0, 1e-3, d)
    z /= np.linalg.norm(z)
    lam = 0.0
    for _ in range(iters):
        y = MtM @ z
        ny = np.linalg.norm(y)
        if ny <= 1e-300:
            return 0.0
        z = y / ny
        lam_new = float(z @ (MtM @ z))
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            lam = lam_new
            break
        lam = lam_new
    return lam * 1.05


def solve_simplex_qp(problem: QpProblem, record_history: bool = False) -> QpResult:
    """Accelerated projected gradient (FISTA with restart on increase).

    Step size 1/L with L the largest eigenvalue of M'M estimated by power
    iteration; fixed start at the uniform weight vector; terminates when the
    projected-gradient mapping norm falls below ``problem.tol``. The accepted
    iterate sequence is monotone in the objective: a step that would increase
    the objective is rejected and acceleration restarts from the incumbent.
    """
    M, v = problem.M, problem.v
    d = M.shape[1]
    MtM = M.T @ M
    Mtv = M.T @ v
    w = np.full(d, 1.0 / d)

    L = _power_iteration_gram(MtM)
    if L <= 1e-300:
        # M'M == 0: objective constant in w, uniform start already optimal
        obj = float(v @ v)
        return QpResult(w, obj, 0, True, [obj] if record_history else None)

    def half_grad(u: np.ndarray) -> np.ndarray:
        return MtM @ u - Mtv

    def objective(u: np.ndarray) -> float:
        r = M @ u - v
        return float(r @ r)

    f_w = objective(w)
    history = [f_w] if record_history else None
    y = w.copy()
    t = 1.0
    iterations = 0
    converged = False
    step = 1.0 / L
    eps = np.finfo(float).eps
    for k in range(problem.max_iter):
        # convergence check at the incumbent
        g_w = half_grad(w)
        w_plain = _project_rows((w - step * g_w)[None, :])[0]
        pg = float(np.linalg.norm((w - w_plain) * L))
        if pg <= problem.tol or np.array_equal(w_plain, w):
            converged = True
            break
        iterations = k + 1
        w_new = _project_rows((y - step * half_grad(y))[None, :])[0]
        f_new = objective(w_new)
        # increases at rounding level are ties, not violations
        slack = 4.0 * eps * (1.0 + abs(f_w))
        if f_new > f_w + slack:
            # restart acceleration; plain projected step from w cannot increase
            y = w.copy()
            t = 1.0
            w_new = w_plain
            f_new = objective(w_new)
            if f_new > f_w + slack:
                # step too long: the L estimate was low, back off (rare)
                L *= 2.0
                step = 1.0 / L
                continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = w_new + ((t - 1.0) / t_new) * (w_new - w)
        t = t_new
        w, f_w = w_new, f_new
        if record_history:
            history.append(f_w)
    return QpResult(w, f_w, iterations, converged, history)


def solve_simplex_qp_batch(
    Ms: np.ndarray,
    vs: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    start: np.ndarray | None = None,
    grams: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    L: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve a batch of independent simplex least-squares problems.

    ``Ms`` is (B, m, d) and ``vs`` is (B, m). Each problem runs the same
    FISTA-with-restart iteration as :func:`solve_simplex_qp`; the batch is a
    vectorization, not a coupling, so per-problem results match standalone
    solves. ``start`` (B, d) overrides the uniform start (used to warm-start
    bootstrap perturbations from the unperturbed solution). ``grams`` may
    carry precomputed (M'M, M'v, v'v) to avoid rebuilding them per call.

    Returns (W, objectives, converged) with W of shape (B, d).
    """
    Ms = np.asarray(Ms, dtype=float)
    vs = np.asarray(vs, dtype=float)
    B, _, d = Ms.shape
    if grams is None:
        MtM = np.einsum("bji,bjk->bik", Ms, Ms)
        Mtv = np.einsum("bji,bj->bi", Ms, vs)
        vtv = np.einsum("bj,bj->b", vs, vs)
    else:
        MtM, Mtv, vtv = grams

    if L is None:
        L = np.array([_power_iteration_gram(MtM[b]) for b in range(B)])
    else:
        L = np.array(L, dtype=float)
    W_out = np.empty((B, d))
    obj_out = np.empty(B)
    conv_out = np.zeros(B, dtype=bool)

    zero = L <= 1e-300
    if np.any(zero):
        W_out[zero] = 1.0 / d
        obj_out[zero] = vtv[zero]
        conv_out[zero] = True
    active = np.flatnonzero(~zero)
    if active.size == 0:
        return W_out, obj_out, conv_out

    idx = active.copy()
    MtM_a, Mtv_a, vtv_a, L_a = MtM[idx], Mtv[idx], vtv[idx], L[idx]
    if start is None:
        w = np.full((idx.size, d), 1.0 / d)
    else:
        w = np.array(np.broadcast_to(start, (B, d))[idx], dtype=float)

    def objective(u, MtM_, Mtv_, vtv_):
        return np.einsum("bi,bi->b", u, np.einsum("bij,bj->bi", MtM_, u)) \
            - 2.0 * np.einsum("bi,bi->b", Mtv_, u) + vtv_

    step = 1.0 / L_a
    f_w = objective(w, MtM_a, Mtv_a, vtv_a)
    y = w.copy()
    t = np.ones(idx.size)
    eps = np.finfo(float).eps
    for _ in range(max_iter):
        g_w = np.einsum("bij,bj->bi", MtM_a, w) - Mtv_a
        w_plain = _project_rows(w - step[:, None] * g_w)
        pg = (w - w_plain) * L_a[:, None]
        done = (np.linalg.norm(pg, axis=1) <= tol) | np.all(w_plain == w, axis=1)
        if np.any(done):
            sel = np.flatnonzero(done)
            W_out[idx[sel]] = w[sel]
            obj_out[idx[sel]] = f_w[sel]
            conv_out[idx[sel]] = True
            keep = ~done
            if not np.any(keep):
                return W_out, obj_out, conv_out
            idx = idx[keep]
            MtM_a, Mtv_a, vtv_a, L_a = MtM_a[keep], Mtv_a[keep], vtv_a[keep], L_a[keep]
            w, f_w, y, t, g_w = w[keep], f_w[keep], y[keep], t[keep], g_w[keep]
            w_plain, step = w_plain[keep], step[keep]
        w_new = _project_rows(y - step[:, None] * (np.einsum("bij,bj->bi", MtM_a, y) - Mtv_a))
        f_new = objective(w_new, MtM_a, Mtv_a, vtv_a)
        slack = 4.0 * eps * (1.0 + np.abs(f_w))
        inc = f_new > f_w + slack
        if np.any(inc):
            y[inc] = w[inc]
            t[inc] = 1.0
            f_plain = objective(w_plain[inc], MtM_a[inc], Mtv_a[inc], vtv_a[inc])
            still = f_plain > f_w[inc] + slack[inc]
            if np.any(still):
                bad = np.flatnonzero(inc)[still]
                L_a[bad] *= 2.0
                step[bad] = 1.0 / L_a[bad]
                good = np.flatnonzero(inc)[~still]
                w_new[good] = w_plain[good]
                f_new[good] = f_plain[~still]
                w_new[bad] = w[bad]
                f_new[bad] = f_w[bad]
            else:
                w_new[inc] = w_plain[inc]
                f_new[inc] = f_plain
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = w_new + ((t - 1.0) / t_new)[:, None] * (w_new - w)
        t = t_new
        w, f_w = w_new, f_new
    # max_iter exhausted: report best iterates, converged stays False
    W_out[idx] = w
    obj_out[idx] = f_w
    return W_out, obj_out, conv_out


# ---------------------------------------------------------------------------
# Two-phase dense simplex method
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LpOutcome:
    """Outcome of min/max c'w subject to A_eq w = b_eq, w >= 0."""

    status: str  # "optimal" | "infeasible" | "unbounded"
    value: float | None = None
    w: np.ndarray | None = None

    @property
    def is_optimal(self) -> bool:
        return self.status == "optimal"


def solve_lp(
    objective: np.ndarray,
    A_eq: np.ndarray,
    b_eq: np.ndarray,
    sense: str = "min",
) -> LpOutcome:
    """Two-phase dense simplex with Bland's anti-cycling rule.

    Phase 1 minimizes the sum of artificial variables from the all-artificial
    basis; an optimal phase-1 value above 1e-8 * (1 + ||b_eq||) signals
    infeasibility. Redundant (rank-deficient) rows are tolerated: artificial
    variables stuck in the basis at zero are pivoted out or their rows
    dropped. Phase 2 optimizes the requested objective and detects
    unboundedness from a nonpositive entering column.
    """
    if sense not in ("min", "max"):
        raise ValueError("sense must be 'min' or 'max'")
    c = np.asarray(objective, dtype=float).ravel()
    A = np.atleast_2d(np.asarray(A_eq, dtype=float))
    b = np.asarray(b_eq, dtype=float).ravel()
    m, d = A.shape
    if c.size != d or b.size != m:
        raise ValueError("inconsistent LP dimensions")
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise NonFiniteInput("solve_lp: non-finite input")

    sign = 1.0 if sense == "min" else -1.0
    c = sign * c

    # standard form with b >= 0
    A = A.copy()
    b = b.copy()
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0
    feas_tol = 1e-8 * (1.0 + float(np.linalg.norm(b)))

    # tableau over columns [original | artificial], rows [constraints]
    T = np.hstack([A, np.eye(m)])
    basis = list(range(d, d + m))
    rhs = b.copy()

    def pivot(row: int, col: int) -> None:
        nonlocal T, rhs
        piv = T[row, col]
        T[row] /= piv
        rhs[row] /= piv
        for r in range(m):
            if r != row and T[r, col] != 0.0:
                rhs[r] -= T[r, col] * rhs[row]
                T[r] -= T[r, col] * T[row]
        basis[row] = col

    def run_simplex(cost: np.ndarray, ncols: int) -> str:
        # Bland's rule: entering = lowest-index negative reduced cost;
        # leaving = min ratio, ties broken by lowest basic-variable index.
        while True:
            y = cost[basis]
            reduced = cost[:ncols] - y @ T[:, :ncols]
            entering = -1
            for j in range(ncols):
                if j not in basis and reduced[j] < -1e-9:
                    entering = j
                    break
            if entering < 0:
                return "optimal"
            col = T[:, entering]
            best_ratio, leave = np.inf, -1
            for r in range(m):
                if col[r] > 1e-10:
                    ratio = rhs[r] / col[r]
                    if ratio < best_ratio - 1e-12 or (
                        abs(ratio - best_ratio) <= 1e-12
                        and (leave < 0 or basis[r] < basis[leave])
                    ):
                        best_ratio, leave = ratio, r
            if leave < 0:
                return "unbounded"
            pivot(leave, entering)

    # phase 1
    cost1 = np.concatenate([np.zeros(d), np.ones(m)])
    status = run_simplex(cost1, d + m)
    phase1_val = float(cost1[basis] @ rhs)
    if status != "optimal" or phase1_val > feas_tol:
        return LpOutcome("infeasible")

    # drive artificial variables out of the basis
    rows_to_drop: list[int] = []
    for r in range(m):
        if basis[r] >= d:
            sub = np.abs(T[r, :d])
            j = int(np.argmax(sub))
            if sub[j] > 1e-10:
                pivot(r, j)
            else:
                rows_to_drop.append(r)
    if rows_to_drop:
        keep = [r for r in range(m) if r not in rows_to_drop]
        T = T[keep]
        rhs = rhs[keep]
        basis = [basis[r] for r in keep]
        m = len(keep)

    # phase 2 scans original columns only; artificial columns are inert
    cost2 = np.concatenate([c, np.zeros(T.shape[1] - d)])
    status = run_simplex(cost2, d)
    if status == "unbounded":
        return LpOutcome("unbounded")
    w = np.zeros(d)
    for r in range(m):
        if basis[r] < d:
            w[basis[r]] = rhs[r]
    value = float(c @ w) * sign
    return LpOutcome("optimal", value, w)


# ---------------------------------------------------------------------------
# Minimum-norm least squares
# ---------------------------------------------------------------------------

def least_squares(M: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-norm least-squares solution of M x ~ v.

    Uses LAPACK's complete orthogonal factorization (column-pivoted
    Householder QR, driver ``gelsy``) with rank threshold 1e-10 relative to
    the largest R diagonal. Returns (coefficients, ||M x - v||).
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    v = np.asarray(v, dtype=float).ravel()
    if not (np.all(np.isfinite(M)) and np.all(np.isfinite(v))):
        raise NonFiniteInput("least_squares: non-finite input")
    if M.shape[0] != v.size:
        raise ValueError("least_squares: row count of M must match len(v)")
    coeffs, _, _, _ = _scipy_lstsq(M, v, cond=1e-10, lapack_driver="gelsy")
    residual = float(np.linalg.norm(M @ coeffs - v))
    return coeffs, residual
