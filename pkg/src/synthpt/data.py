"""Panel / repeated-cross-section ingestion, cell means, and trend systems.

Unit 1 is always the treated unit internally; loaders relabel units so the
treated unit maps to 1 and record the original labels. Periods are 1..T with
T0 the last pre-treatment period; the post-treatment trend always runs from
period T0 to period T (intermediate post periods, if present, are carried in
the cell means but not in the trend system).

Cell means use pairwise summation over a canonical (value-sorted) row order,
so results are bitwise invariant to the row order of the input file.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Base class for dataset validation failures."""


class MissingColumn(DataError):
    pass


class UnbalancedPanel(DataError):
    pass


class EmptyCell(DataError):
    pass


class SingletonCell(DataError):
    pass


class LengthMismatch(DataError):
    pass


class DegenerateShape(DataError):
    pass


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel: one row per individual, outcomes across all T periods."""

    ids: np.ndarray          # (n,) opaque individual identifiers
    units: np.ndarray        # (n,) int, 1..K after relabeling (treated = 1)
    outcomes: np.ndarray     # (n, T) float
    K: int
    T: int
    T0: int
    treated_unit: int = 1
    label_map: dict = field(default_factory=dict)  # original label -> internal

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    def __post_init__(self) -> None:
        if self.outcomes.shape != (self.units.size, self.T):
            raise LengthMismatch("outcomes must be (n, T)")
        if not (1 <= self.T0 < self.T):
            raise DegenerateShape(f"need 1 <= T0 < T, got T0={self.T0}, T={self.T}")
        present = np.unique(self.units)
        if present.size != self.K or present[0] != 1 or present[-1] != self.K:
            raise DataError("unit labels must cover 1..K with every unit populated")


@dataclass(frozen=True)
class RcsDataset:
    """Repeated cross-section: one row per sampled individual-period."""

    outcomes: np.ndarray     # (n,) float
    units: np.ndarray        # (n,) int, 1..K
    periods: np.ndarray      # (n,) int, 1..T
    K: int
    T: int
    T0: int
    treated_unit: int = 1
    label_map: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.outcomes.size

    def __post_init__(self) -> None:
        if not (self.units.size == self.periods.size == self.outcomes.size):
            raise LengthMismatch("outcomes, units, periods must share length")
        if not (1 <= self.T0 < self.T):
            raise DegenerateShape(f"need 1 <= T0 < T, got T0={self.T0}, T={self.T}")
        counts = np.zeros((self.K, self.T), dtype=int)
        np.add.at(counts, (self.units - 1, self.periods - 1), 1)
        if np.any(counts == 0):
            k, t = np.argwhere(counts == 0)[0]
            raise EmptyCell(f"cell (unit={k + 1}, period={t + 1}) has no observations")
        if np.any(counts == 1):
            k, t = np.argwhere(counts == 1)[0]
            raise SingletonCell(f"cell (unit={k + 1}, period={t + 1}) has a single observation")


@dataclass(frozen=True)
class CellStats:
    """Per-(unit, period) sample means with counts and sampling shares."""

    means: np.ndarray        # (K, T)
    counts: np.ndarray       # (K, T) int
    n_total: int
    shares: np.ndarray       # (K,) unit shares for panel, (K, T) cell shares for RCS
    kind: str                # "panel" | "rcs"

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def T(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "counts": self.counts.tolist(),
            "n_total": int(self.n_total),
            "shares": self.shares.tolist(),
            "kind": self.kind,
        }


@dataclass(frozen=True)
class TrendSystem:
    """First-difference trend system: A_pre w = b_pre over pre-periods, with
    the post-trend row a_post and the stacked (A, b) used for inference."""

    A_pre: np.ndarray        # (T0-1, K-1)
    b_pre: np.ndarray        # (T0-1,)
    a_post: np.ndarray       # (K-1,)
    A: np.ndarray            # (T0, K-1)
    b: np.ndarray            # (T0,)
    n: int
    treated_T_mean: float
    treated_T0_mean: float

    @property
    def T0(self) -> int:
        return self.A.shape[0]

    @property
    def n_controls(self) -> int:
        return self.A.shape[1]

    @property
    def treated_post_trend(self) -> float:
        return float(self.b[-1])

    def to_dict(self) -> dict:
        return {
            "A_pre": self.A_pre.tolist(),
            "b_pre": self.b_pre.tolist(),
            "a_post": self.a_post.tolist(),
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "n": int(self.n),
            "treated_T_mean": float(self.treated_T_mean),
            "treated_T0_mean": float(self.treated_T0_mean),
        }


@dataclass(frozen=True)
class ColumnSchema:
    """Column mapping plus design choices needed to interpret a long CSV."""

    unit: str = "unit"
    period: str = "period"
    outcome: str = "outcome"
    id: str = "id"
    treated_unit: int | str = 1
    t0: int = 1


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------

def _relabel_units(raw_units: np.ndarray, treated_label) -> tuple[np.ndarray, dict]:
    labels = pd.unique(raw_units)
    if treated_label not in set(labels.tolist()):
        raise DataError(f"treated unit {treated_label!r} not present in data")
    controls = sorted(lab for lab in labels.tolist() if lab != treated_label)
    label_map = {treated_label: 1}
    label_map.update({lab: i + 2 for i, lab in enumerate(controls)})
    internal = np.array([label_map[lab] for lab in raw_units.tolist()], dtype=int)
    return internal, label_map


def _relabel_periods(raw_periods: np.ndarray) -> tuple[np.ndarray, list]:
    period_labels = sorted(pd.unique(raw_periods).tolist())
    pmap = {lab: i + 1 for i, lab in enumerate(period_labels)}
    return np.array([pmap[lab] for lab in raw_periods.tolist()], dtype=int), period_labels


def _check_columns(df: pd.DataFrame, needed: list[str]) -> None:
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise MissingColumn(f"missing column(s): {', '.join(missing)}")


def load_panel_csv(path, schema: ColumnSchema) -> PanelDataset:
    """Read a long-format CSV (id, unit, period, outcome) into a balanced panel.

    Every id must appear in exactly T periods and belong to a single unit.
    """
    df = pd.read_csv(path)
    _check_columns(df, [schema.id, schema.unit, schema.period, schema.outcome])
    periods, period_labels = _relabel_periods(df[schema.period].to_numpy())
    T = len(period_labels)
    units_internal, label_map = _relabel_units(df[schema.unit].to_numpy(), schema.treated_unit)

    ids_raw = df[schema.id].to_numpy()
    id_labels, id_codes = np.unique(ids_raw, return_inverse=True)
    n = id_labels.size
    per_id_count = np.bincount(id_codes, minlength=n)
    if np.any(per_id_count != T):
        bad = id_labels[np.argmax(per_id_count != T)]
        raise UnbalancedPanel(f"id {bad!r} appears in {per_id_count[per_id_count != T][0]} "
                              f"of {T} periods")
    # each id must also be unique within a period and stay in one unit
    outcomes = np.full((n, T), np.nan)
    outcomes[id_codes, periods - 1] = df[schema.outcome].to_numpy(dtype=float)
    if np.isnan(outcomes).any():
        raise UnbalancedPanel("an id appears more than once in some period")
    unit_by_id = np.full(n, -1, dtype=int)
    for code, u in zip(id_codes, units_internal):
        if unit_by_id[code] == -1:
            unit_by_id[code] = u
        elif unit_by_id[code] != u:
            raise DataError(f"id {id_labels[code]!r} appears in more than one unit")

    K = len(label_map)
    present = np.bincount(unit_by_id, minlength=K + 1)[1:]
    if np.any(present == 0):
        raise EmptyCell(f"unit {np.argmax(present == 0) + 1} has no individuals")
    t0 = int(schema.t0)
    return PanelDataset(ids=id_labels, units=unit_by_id, outcomes=outcomes,
                        K=K, T=T, T0=t0, label_map=label_map)


def load_rcs_csv(path, schema: ColumnSchema) -> RcsDataset:
    """Read a long-format CSV (unit, period, outcome) of repeated cross-sections."""
    df = pd.read_csv(path)
    _check_columns(df, [schema.unit, schema.period, schema.outcome])
    periods, period_labels = _relabel_periods(df[schema.period].to_numpy())
    units_internal, label_map = _relabel_units(df[schema.unit].to_numpy(), schema.treated_unit)
    return RcsDataset(
        outcomes=df[schema.outcome].to_numpy(dtype=float),
        units=units_internal,
        periods=periods,
        K=len(label_map),
        T=len(period_labels),
        T0=int(schema.t0),
        label_map=label_map,
    )


# ---------------------------------------------------------------------------
# cell means (plain and multiplier-reweighted)
# ---------------------------------------------------------------------------

def _canonical_order(data) -> np.ndarray:
    """Row permutation making cell aggregation independent of input order.

    Panel rows sort by (unit, outcome path); RCS rows by (cell, outcome).
    Rows that tie are identical in every summed quantity, so any stable
    order among ties yields bitwise-identical sums.
    """
    if isinstance(data, PanelDataset):
        keys = tuple(data.outcomes[:, t] for t in range(data.T - 1, -1, -1))
        return np.lexsort(keys + (data.units,))
    codes = (data.units - 1) * data.T + (data.periods - 1)
    return np.lexsort((data.outcomes, codes))


def _segment_sums(values: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    """Pairwise-summed totals of contiguous segments (2-d values sum rows)."""
    out = np.empty((boundaries.size - 1,) + values.shape[1:])
    for i in range(boundaries.size - 1):
        out[i] = values[boundaries[i]:boundaries[i + 1]].sum(axis=0)
    return out


class CellAggregator:
    """Precomputed canonical-order plan for (repeated) cell aggregation.

    Bootstrap reweighting calls :meth:`weighted_means` thousands of times on
    one dataset; sorting and segment boundaries are computed once here.
    """

    def __init__(self, data: PanelDataset | RcsDataset):
        self.data = data
        self.is_panel = isinstance(data, PanelDataset)
        order = _canonical_order(data)
        self.order = order
        if self.is_panel:
            units_sorted = data.units[order]
            self.values = data.outcomes[order]          # (n, T)
            self.bounds = np.concatenate([
                np.searchsorted(units_sorted, np.arange(1, data.K + 1)), [data.n]])
        else:
            codes = (data.units - 1) * data.T + (data.periods - 1)
            self.values = data.outcomes[order]           # (n,)
            self.bounds = np.concatenate([
                np.searchsorted(codes[order], np.arange(data.K * data.T)), [data.n]])

    def means(self) -> CellStats:
        data = self.data
        if self.is_panel:
            sums = _segment_sums(self.values, self.bounds)       # (K, T)
            unit_n = np.diff(self.bounds)
            means = sums / unit_n[:, None]
            counts = np.tile(unit_n[:, None], (1, data.T))
            return CellStats(means, counts, data.n, unit_n / data.n, "panel")
        sums = _segment_sums(self.values, self.bounds)
        cell_n = np.diff(self.bounds)
        means = (sums / cell_n).reshape(data.K, data.T)
        counts = cell_n.reshape(data.K, data.T)
        return CellStats(means, counts.astype(int), data.n, counts / data.n, "rcs")

    def weighted_means(self, weights: np.ndarray) -> CellStats:
        data = self.data
        weights = np.asarray(weights, dtype=float).ravel()
        if weights.size != data.n:
            raise LengthMismatch(f"{weights.size} multipliers for {data.n} individuals")
        if np.any(weights <= 0):
            raise ValueError("multipliers must be strictly positive")
        w = weights[self.order]
        if self.is_panel:
            wsums = _segment_sums(w[:, None] * self.values, self.bounds)
            wtot = _segment_sums(w[:, None], self.bounds)[:, 0]
            if np.any(wtot <= 0):
                raise EmptyCell("a unit lost all effective weight under the multipliers")
            means = wsums / wtot[:, None]
            counts = np.tile(np.diff(self.bounds)[:, None], (1, data.T))
            return CellStats(means, counts, data.n, wtot / wtot.sum(), "panel")
        wsums = _segment_sums(w * self.values, self.bounds)
        wtot = _segment_sums(w, self.bounds)
        if np.any(wtot <= 0):
            raise EmptyCell("a cell lost all effective weight under the multipliers")
        means = (wsums / wtot).reshape(data.K, data.T)
        counts = np.diff(self.bounds).reshape(data.K, data.T)
        shares = (wtot / wtot.sum()).reshape(data.K, data.T)
        return CellStats(means, counts.astype(int), data.n, shares, "rcs")


def cell_means(data: PanelDataset | RcsDataset) -> CellStats:
    """Sample means, counts and shares for every (unit, period) cell."""
    return CellAggregator(data).means()


def multiplier_cell_means(data: PanelDataset | RcsDataset,
                          weights: np.ndarray) -> CellStats:
    """Cell means reweighted by one positive multiplier per sampled individual.

    For panel data the same multiplier applies to the individual's entire
    time series. Weighted shares are normalized to sum to one.
    """
    return CellAggregator(data).weighted_means(weights)


# ---------------------------------------------------------------------------
# trend system
# ---------------------------------------------------------------------------

def build_trend_system(stats: CellStats, t0: int, n: int) -> TrendSystem:
    """First differences of cell means arranged as the pre-period system plus
    the post-trend row (period T0 to period T)."""
    K, T = stats.K, stats.T
    if t0 < 2 or K < 2:
        raise DegenerateShape(f"need T0 >= 2 and K >= 2, got T0={t0}, K={K}")
    if t0 >= T:
        raise DegenerateShape(f"need T0 < T, got T0={t0}, T={T}")
    m = stats.means
    # A_pre[t-2, k-2] = mean[k, t] - mean[k, t-1] for t = 2..T0, k = 2..K
    diffs = m[:, 1:t0] - m[:, 0:t0 - 1]          # (K, T0-1)
    A_pre = diffs[1:].T                           # (T0-1, K-1)
    b_pre = diffs[0]                              # (T0-1,)
    a_post = m[1:, T - 1] - m[1:, t0 - 1]         # (K-1,)
    treated_T_mean = float(m[0, T - 1])
    treated_T0_mean = float(m[0, t0 - 1])
    A = np.vstack([A_pre, a_post])
    b = np.append(b_pre, treated_T_mean - treated_T0_mean)
    return TrendSystem(A_pre=A_pre, b_pre=b_pre, a_post=a_post, A=A, b=b,
                       n=int(n), treated_T_mean=treated_T_mean,
                       treated_T0_mean=treated_T0_mean)


def trend_system(data: PanelDataset | RcsDataset) -> TrendSystem:
    """Cell means and trend system in one step, with n per the sampling scheme
    (individuals for panel data, rows for repeated cross-sections)."""
    return build_trend_system(cell_means(data), data.T0, data.n)
