"""Feature-table handling: dummy encoding, round-robin imputation,
rank-correlation redundancy filtering, and Lasso feature selection.

Tables are column-typed (continuous or categorical) with explicit
missing markers (NaN, or None for categorical cells). The selection
chain expects the canonical order: encode, impute, correlation filter,
Lasso.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["Column", "FeatureTable", "SelectionReport", "ClinicalData",
           "encode_dummies", "iterative_impute", "spearman_rho",
           "spearman_filter", "lasso_select", "lasso_coordinate_descent",
           "selection_response", "load_clinical_csv", "load_features_csv",
           "save_table_csv", "join_tables"]

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


@dataclass
class Column:
    name: str
    kind: str
    values: list

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise ValueError(f"unknown column kind {self.kind!r}")
        if self.kind == CONTINUOUS:
            self.values = [float("nan") if v is None else float(v)
                           for v in self.values]

    def observed(self) -> np.ndarray:
        """Boolean mask of non-missing cells."""
        if self.kind == CONTINUOUS:
            return ~np.isnan(np.asarray(self.values, dtype=np.float64))
        return np.array([v is not None for v in self.values], dtype=bool)


@dataclass
class FeatureTable:
    row_ids: list[str]
    columns: list[Column]

    def __post_init__(self):
        if len(set(self.row_ids)) != len(self.row_ids):
            raise ValueError("duplicate row ids")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names")
        for col in self.columns:
            if len(col.values) != len(self.row_ids):
                raise ValueError(f"column {col.name!r} has {len(col.values)} "
                                 f"values for {len(self.row_ids)} rows")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> Column:
        for col in self.columns:
            if col.name == name:
                return col
        raise KeyError(name)

    def to_matrix(self) -> np.ndarray:
        """All-continuous table as an (n_rows, n_cols) float matrix."""
        for col in self.columns:
            if col.kind != CONTINUOUS:
                raise ValueError(f"column {col.name!r} is categorical; "
                                 "encode it first")
        return np.array([c.values for c in self.columns], dtype=np.float64).T

    @staticmethod
    def from_matrix(row_ids: list[str], names: list[str],
                    X: np.ndarray) -> "FeatureTable":
        X = np.asarray(X, dtype=np.float64)
        cols = [Column(name, CONTINUOUS, X[:, j].tolist())
                for j, name in enumerate(names)]
        return FeatureTable(list(row_ids), cols)

    def select_columns(self, names: list[str]) -> "FeatureTable":
        return FeatureTable(list(self.row_ids),
                            [self.column(n) for n in names])

    def subset_rows(self, keep: np.ndarray) -> "FeatureTable":
        idx = np.flatnonzero(np.asarray(keep, dtype=bool))
        rows = [self.row_ids[i] for i in idx]
        cols = [Column(c.name, c.kind, [c.values[i] for i in idx])
                for c in self.columns]
        return FeatureTable(rows, cols)


@dataclass
class SelectionReport:
    """What a selection step kept, dropped, and why."""

    kept: list[str]
    dropped_pairs: list[tuple[str, str, float]] = field(default_factory=list)
    lambda_grid: list[float] | None = None
    cv_error: list[float] | None = None
    chosen_lambda: float | None = None
    n_before: int = 0
    n_after: int = 0

    def __post_init__(self):
        dropped = {b for _, b, _ in self.dropped_pairs}
        if dropped & set(self.kept):
            raise ValueError("kept and dropped column sets overlap")

    def to_dict(self) -> dict:
        return {
            "kept": list(self.kept),
            "dropped_pairs": [[a, b, float(r)] for a, b, r in self.dropped_pairs],
            "lambda_grid": None if self.lambda_grid is None
            else [float(v) for v in self.lambda_grid],
            "cv_error": None if self.cv_error is None
            else [float(v) for v in self.cv_error],
            "chosen_lambda": self.chosen_lambda,
            "n_before": self.n_before,
            "n_after": self.n_after,
        }


def encode_dummies(table: FeatureTable) -> FeatureTable:
    """Replace each categorical column having k observed categories with
    k-1 indicators; the alphabetically first category is the dropped
    reference. Missing cells stay missing across all indicators."""
    out_cols = []
    for col in table.columns:
        if col.kind == CONTINUOUS:
            out_cols.append(col)
            continue
        cats = sorted({v for v in col.values if v is not None})
        if len(cats) > 64:
            raise ValueError(f"column {col.name!r} has {len(cats)} categories "
                             "(limit 64)")
        if len(cats) <= 1:
            warnings.warn(f"dropping categorical column {col.name!r}: "
                          f"{len(cats)} observed category")
            continue
        for cat in cats[1:]:
            values = [float("nan") if v is None else float(v == cat)
                      for v in col.values]
            out_cols.append(Column(f"{col.name}={cat}", CONTINUOUS, values))
    return FeatureTable(list(table.row_ids), out_cols)


def _ridge_fit_predict(A_obs, y_obs, A_miss, ridge):
    """Least squares with an unpenalized intercept; returns predictions
    for the missing rows."""
    n_feat = A_obs.shape[1]
    design = np.column_stack([np.ones(len(A_obs)), A_obs])
    gram = design.T @ design
    penalty = np.eye(n_feat + 1) * ridge
    penalty[0, 0] = 0.0
    w = np.linalg.solve(gram + penalty, design.T @ y_obs)
    return np.column_stack([np.ones(len(A_miss)), A_miss]) @ w


def iterative_impute(table: FeatureTable, rounds: int = 10,
                     ridge: float = 1e-3) -> FeatureTable:
    """Round-robin regression imputation.

    Missing cells start at column means. Each pass regresses every
    incomplete column on all the others over its observed rows and
    rewrites only its missing cells. Observed cells are never touched.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    X = table.to_matrix()
    missing = np.isnan(X)
    if not missing.any():
        return table
    for j, col in enumerate(table.columns):
        if missing[:, j].all():
            raise ValueError(f"column {col.name!r} has no observed values")

    filled = X.copy()
    col_means = np.nanmean(X, axis=0)
    for j in range(X.shape[1]):
        filled[missing[:, j], j] = col_means[j]

    targets = [j for j in range(X.shape[1]) if missing[:, j].any()]
    for _ in range(rounds):
        for j in targets:
            obs = ~missing[:, j]
            if obs.sum() < 2:
                warnings.warn(f"column {table.columns[j].name!r}: fewer than "
                              "2 observed rows, falling back to the mean")
                filled[missing[:, j], j] = col_means[j]
                continue
            others = np.delete(filled, j, axis=1)
            pred = _ridge_fit_predict(others[obs], X[obs, j],
                                      others[missing[:, j]], ridge)
            filled[missing[:, j], j] = pred
    return FeatureTable.from_matrix(table.row_ids, table.names, filled)


def _midranks(v: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties assigned the mean of their positions."""
    order = np.argsort(v, kind="stable")
    sv = v[order]
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Pearson correlation of mid-ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-d arrays of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 observations")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("inputs must be finite")
    rx = _midranks(x) - (x.size + 1) / 2.0
    ry = _midranks(y) - (y.size + 1) / 2.0
    vx = (rx ** 2).sum()
    vy = (ry ** 2).sum()
    if vx == 0.0 or vy == 0.0:
        raise ValueError("constant input: rank variance is zero")
    return float((rx * ry).sum() / math.sqrt(vx * vy))


def spearman_filter(table: FeatureTable,
                    threshold: float = 0.80) -> tuple[FeatureTable, SelectionReport]:
    """Drop the later column (by name order) of every pair whose absolute
    rank correlation exceeds the threshold. Constant columns carry no
    rank signal and are never treated as correlated."""
    X = table.to_matrix()
    if np.isnan(X).any():
        raise ValueError("table has missing values; impute first")
    by_name = sorted(table.names)
    idx = {n: j for j, n in enumerate(table.names)}
    dropped: dict[str, None] = {}
    pairs = []
    for a_pos, a in enumerate(by_name):
        if a in dropped:
            continue
        for b in by_name[a_pos + 1:]:
            if b in dropped:
                continue
            xa, xb = X[:, idx[a]], X[:, idx[b]]
            try:
                rho = spearman_rho(xa, xb)
            except ValueError:
                continue
            if abs(rho) > threshold:
                dropped[b] = None
                pairs.append((a, b, rho))
    kept = [n for n in table.names if n not in dropped]
    report = SelectionReport(kept=kept, dropped_pairs=pairs,
                             n_before=len(table.names), n_after=len(kept))
    return table.select_columns(kept), report


def _soft_threshold(z: float, lam: float) -> float:
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


def lasso_objective(X, y, beta, lam) -> float:
    r = y - X @ beta
    return float((r @ r) / (2.0 * len(y)) + lam * np.abs(beta).sum())


def lasso_coordinate_descent(X, y, lam, beta0=None, max_sweeps: int = 1000,
                             tol: float = 1e-7):
    """Cyclic coordinate descent on (1/2n)||y - Xb||^2 + lam*||b||_1.

    Assumes columns with sum(x^2) = n (standardized input). Returns the
    solution and the objective value after every sweep; the sequence is
    checked to be non-increasing.
    """
    n, p = X.shape
    beta = np.zeros(p) if beta0 is None else beta0.copy()
    r = y - X @ beta
    history = [lasso_objective(X, y, beta, lam)]
    for _ in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            bj = beta[j]
            rho = (X[:, j] @ r) / n + bj
            new = _soft_threshold(rho, lam)
            if new != bj:
                r += X[:, j] * (bj - new)
                beta[j] = new
                max_delta = max(max_delta, abs(new - bj))
        obj = lasso_objective(X, y, beta, lam)
        if obj > history[-1] + 1e-10 * max(1.0, abs(history[-1])):
            raise AssertionError("lasso objective increased across a sweep")
        history.append(obj)
        if max_delta < tol:
            break
    return beta, history


def _standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    keep = sd > 0
    return (X[:, keep] - mu[keep]) / sd[keep], keep


def _fold_indices(n: int, folds: int, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    return [perm[f::folds] for f in range(folds)]


def lasso_select(X, y, feature_names: list[str] | None = None,
                 folds: int = 5, lambda_grid=None,
                 seed: int = 0) -> tuple[list[int], SelectionReport]:
    """Lasso with cross-validated penalty choice under the one-SE rule.

    The matrix is standardized internally and the response centered. The
    default grid is 100 log-spaced penalties from the smallest value that
    zeroes every coefficient down to a thousandth of it. The chosen
    penalty is the largest one whose CV error stays within one standard
    error of the minimum; the plain minimum is known to drag in noise
    columns. Kept indices refer to the original column positions.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    if n < folds:
        raise ValueError(f"need at least {folds} rows, got {n}")
    if feature_names is None:
        feature_names = [f"x{j}" for j in range(p)]

    Xs_all, keep_mask = _standardize(X)
    if not keep_mask.all():
        skipped = [feature_names[j] for j in np.flatnonzero(~keep_mask)]
        warnings.warn(f"dropping zero-variance columns: {skipped}")
    col_index = np.flatnonzero(keep_mask)
    yc = y - y.mean()

    if lambda_grid is None:
        lam_max = np.abs(Xs_all.T @ yc).max() / n
        if lam_max == 0.0:
            lam_max = 1.0
        lambda_grid = np.geomspace(lam_max, 1e-3 * lam_max, 100)
    lambda_grid = np.asarray(lambda_grid, dtype=np.float64)
    if lambda_grid.size == 0:
        raise ValueError("empty lambda grid")

    fold_idx = _fold_indices(n, folds, seed)
    fold_err = np.zeros((folds, lambda_grid.size))
    for f in range(folds):
        test = fold_idx[f]
        train = np.setdiff1d(np.arange(n), test)
        Xt, yt = Xs_all[train], yc[train]
        Xv, yv = Xs_all[test], yc[test]
        beta = np.zeros(Xs_all.shape[1])
        for li, lam in enumerate(lambda_grid):
            beta, _ = lasso_coordinate_descent(Xt, yt, lam, beta0=beta)
            resid = yv - Xv @ beta
            fold_err[f, li] = float((resid @ resid) / len(yv))
    cv_err = fold_err.mean(axis=0)
    best = int(np.argmin(cv_err))
    margin = cv_err[best] + float(fold_err[:, best].std(ddof=1)) / math.sqrt(folds)
    # sparsest acceptable model: largest penalty within one SE of the best
    ok = np.flatnonzero(cv_err <= margin)
    pick = int(ok[np.argmax(lambda_grid[ok])])
    chosen = float(lambda_grid[pick])

    beta = np.zeros(Xs_all.shape[1])
    for lam in lambda_grid[:pick + 1]:
        beta, _ = lasso_coordinate_descent(Xs_all, yc, lam, beta0=beta)
    kept_local = np.flatnonzero(beta != 0.0)
    kept = [int(col_index[j]) for j in kept_local]

    report = SelectionReport(
        kept=[feature_names[j] for j in kept],
        lambda_grid=lambda_grid.tolist(),
        cv_error=cv_err.tolist(),
        chosen_lambda=chosen,
        n_before=p,
        n_after=len(kept),
    )
    return kept, report


def _nelson_aalen(time, event):
    """Cumulative hazard evaluated at each subject's own time."""
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event)
    order = np.argsort(time, kind="stable")
    t_sorted = time[order]
    uniq = np.unique(t_sorted[event[order] == 1])
    increments = []
    for t in uniq:
        d = int(((time == t) & (event == 1)).sum())
        at_risk = int((time >= t).sum())
        increments.append(d / at_risk)
    cum = np.cumsum(increments) if increments else np.array([])
    H = np.zeros(time.size)
    for i, t in enumerate(time):
        k = np.searchsorted(uniq, t, side="right")
        H[i] = cum[k - 1] if k > 0 else 0.0
    return H


def selection_response(time, event, mode: str = "log_time_events"):
    """Response for the Lasso step, built from survival columns.

    ``log_time_events`` regresses log follow-up days over the subjects
    whose event was observed; ``martingale`` uses null-model martingale
    residuals (event flag minus cumulative hazard) over everyone.
    Returns (response, row mask).
    """
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    if (time <= 0).any():
        raise ValueError("times must be positive")
    if mode == "log_time_events":
        rows = event == 1
        if rows.sum() < 2:
            raise ValueError("need at least 2 events")
        return np.log(time[rows]), rows
    if mode == "martingale":
        H = _nelson_aalen(time, event)
        return event.astype(np.float64) - H, np.ones(time.size, dtype=bool)
    raise ValueError(f"unknown response mode {mode!r}")


# CSV schema for the clinical table. Everything not listed as continuous
# or survival is categorical.
CLINICAL_COLUMNS = ("PatientID", "CenterID", "Age", "Gender", "T", "N", "M",
                    "TNMgroup", "TNMedition", "Tobacco", "Alcohol",
                    "Performance", "HPV", "Chemotherapy",
                    "Progression", "PFS_days")
_CLINICAL_CONTINUOUS = {"Age"}
_SURVIVAL_COLUMNS = ("Progression", "PFS_days")


@dataclass
class ClinicalData:
    table: FeatureTable
    time: np.ndarray
    event: np.ndarray
    centers: list[str]


def load_clinical_csv(path) -> ClinicalData:
    """Clinical CSV with the fixed header; empty cells are missing.
    Survival columns must be complete."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    if tuple(header) != CLINICAL_COLUMNS:
        raise ValueError(f"unexpected clinical header {header}; "
                         f"expected {list(CLINICAL_COLUMNS)}")
    cells = {name: [row[i] for row in rows] for i, name in enumerate(header)}
    row_ids = cells["PatientID"]

    def parse_float(name):
        out = []
        for v in cells[name]:
            if v == "":
                raise ValueError(f"missing value in survival column {name!r}")
            out.append(float(v))
        return np.array(out, dtype=np.float64)

    event = parse_float("Progression").astype(np.int64)
    if not np.isin(event, (0, 1)).all():
        raise ValueError("Progression must be 0 or 1")
    time = parse_float("PFS_days")
    if (time <= 0).any():
        raise ValueError("PFS_days must be positive")

    columns = []
    for name in CLINICAL_COLUMNS:
        if name in ("PatientID",) + _SURVIVAL_COLUMNS:
            continue
        raw = cells[name]
        if name in _CLINICAL_CONTINUOUS:
            vals = [float("nan") if v == "" else float(v) for v in raw]
            columns.append(Column(name, CONTINUOUS, vals))
        else:
            vals = [None if v == "" else v for v in raw]
            columns.append(Column(name, CATEGORICAL, vals))
    table = FeatureTable(row_ids, columns)
    return ClinicalData(table=table, time=time, event=event,
                        centers=[v if v is not None else ""
                                 for v in cells["CenterID"]])


def load_features_csv(path) -> FeatureTable:
    """Numeric feature CSV: PatientID plus continuous columns."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    if not header or header[0] != "PatientID":
        raise ValueError("feature CSV must start with a PatientID column")
    row_ids = [row[0] for row in rows]
    columns = []
    for j, name in enumerate(header[1:], start=1):
        vals = [float("nan") if row[j] == "" else float(row[j]) for row in rows]
        columns.append(Column(name, CONTINUOUS, vals))
    return FeatureTable(row_ids, columns)


def save_table_csv(table: FeatureTable, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["PatientID"] + table.names)
        for i, rid in enumerate(table.row_ids):
            row = [rid]
            for col in table.columns:
                v = col.values[i]
                if col.kind == CONTINUOUS:
                    row.append("" if math.isnan(v) else repr(v))
                else:
                    row.append("" if v is None else v)
            writer.writerow(row)


def join_tables(tables: list[FeatureTable]) -> FeatureTable:
    """Column-wise join over an identical row-id set (order from the
    first table)."""
    if not tables:
        raise ValueError("no tables to join")
    base_ids = tables[0].row_ids
    columns = list(tables[0].columns)
    for other in tables[1:]:
        if set(other.row_ids) != set(base_ids):
            raise ValueError("tables cover different row id sets")
        lookup = {rid: i for i, rid in enumerate(other.row_ids)}
        perm = [lookup[rid] for rid in base_ids]
        for col in other.columns:
            columns.append(Column(col.name, col.kind,
                                  [col.values[i] for i in perm]))
    return FeatureTable(list(base_ids), columns)
