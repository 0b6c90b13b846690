"""Tabular stage: dummy coding, round-robin imputation, rank screening,
and lasso selection."""

import math

import numpy as np
import pytest
import scipy.stats

from segsurv.tabular import (CATEGORICAL, CONTINUOUS, ClinicalData, Column,
                             FeatureTable, encode_dummies, iterative_impute,
                             join_tables, lasso_coordinate_descent,
                             lasso_objective, lasso_select,
                             load_clinical_csv, load_features_csv,
                             save_table_csv, selection_response,
                             spearman_filter, spearman_rho)


def cont_table(named_cols, row_ids=None):
    cols = [Column(n, CONTINUOUS, list(v)) for n, v in named_cols]
    if row_ids is None:
        row_ids = [f"P{i}" for i in range(len(cols[0].values))]
    return FeatureTable(row_ids, cols)


# --- table plumbing --------------------------------------------------------

def test_table_rejects_duplicate_row_ids():
    with pytest.raises(ValueError, match="row ids"):
        FeatureTable(["a", "a"], [Column("x", CONTINUOUS, [1.0, 2.0])])


def test_table_rejects_duplicate_column_names():
    with pytest.raises(ValueError, match="column names"):
        cont_table([("x", [1.0]), ("x", [2.0])])


def test_table_rejects_length_mismatch():
    with pytest.raises(ValueError, match="3 values for 2 rows"):
        FeatureTable(["a", "b"], [Column("x", CONTINUOUS, [1.0, 2.0, 3.0])])


def test_column_rejects_unknown_kind():
    with pytest.raises(ValueError, match="kind"):
        Column("x", "ordinal", [1])


def test_to_matrix_requires_continuous():
    t = FeatureTable(["a"], [Column("g", CATEGORICAL, ["M"])])
    with pytest.raises(ValueError, match="encode"):
        t.to_matrix()


def test_observed_masks():
    c = Column("x", CONTINUOUS, [1.0, None, 3.0])
    assert c.observed().tolist() == [True, False, True]
    g = Column("g", CATEGORICAL, ["M", None])
    assert g.observed().tolist() == [True, False]


# --- dummy coding -----------------------------------------------------------

def test_encode_dummies_two_level_reference():
    t = FeatureTable(["a", "b", "c"],
                     [Column("gender", CATEGORICAL, ["M", "F", "M"])])
    out = encode_dummies(t)
    assert out.names == ["gender=M"]
    assert out.column("gender=M").values == [1.0, 0.0, 1.0]


def test_encode_dummies_k_minus_one():
    t = FeatureTable(["a", "b", "c"],
                     [Column("t", CATEGORICAL, ["T1", "T2", "T3"])])
    out = encode_dummies(t)
    assert out.names == ["t=T2", "t=T3"]
    assert out.column("t=T2").values == [0.0, 1.0, 0.0]
    assert out.column("t=T3").values == [0.0, 0.0, 1.0]


def test_encode_dummies_missing_propagates():
    t = FeatureTable(["a", "b", "c"],
                     [Column("g", CATEGORICAL, ["M", None, "F"])])
    out = encode_dummies(t)
    vals = out.column("g=M").values
    assert vals[0] == 1.0 and math.isnan(vals[1]) and vals[2] == 0.0


def test_encode_dummies_single_category_warns_and_drops():
    t = FeatureTable(["a", "b"], [Column("g", CATEGORICAL, ["M", "M"]),
                                  Column("x", CONTINUOUS, [1.0, 2.0])])
    with pytest.warns(UserWarning, match="'g'"):
        out = encode_dummies(t)
    assert out.names == ["x"]


def test_encode_dummies_passes_continuous_through():
    t = cont_table([("x", [1.0, 2.0])])
    assert encode_dummies(t).names == ["x"]


# --- imputation --------------------------------------------------------------

def test_impute_linear_relation_exact():
    # B = 2A everywhere observed; the single missing B cell must land on
    # the line after one round of unpenalized regression
    t = cont_table([("A", [1.0, 2.0, 3.0, 4.0]),
                    ("B", [2.0, 4.0, 6.0, None])])
    out = iterative_impute(t, rounds=1, ridge=0.0)
    assert abs(out.column("B").values[3] - 8.0) < 1e-6


def test_impute_no_missing_is_identity():
    t = cont_table([("A", [1.0, 2.0]), ("B", [3.0, 4.0])])
    out = iterative_impute(t)
    assert out.column("A").values == [1.0, 2.0]
    assert out.column("B").values == [3.0, 4.0]


def test_impute_never_touches_observed_cells(rng):
    X = rng.normal(size=(12, 4))
    mask = rng.random((12, 4)) < 0.2
    mask[:, 0] = False
    values = np.where(mask, np.nan, X)
    t = FeatureTable.from_matrix([f"P{i}" for i in range(12)],
                                 list("abcd"), values)
    out = iterative_impute(t, rounds=3)
    got = out.to_matrix()
    assert np.array_equal(got[~mask], X[~mask])
    assert np.isfinite(got).all()


def test_impute_beats_mean_on_correlated_data(rng):
    n, p = 40, 5
    z = rng.normal(size=(n, 2))
    w = rng.normal(size=(2, p))
    X = z @ w + 0.05 * rng.normal(size=(n, p))
    mask = rng.random((n, p)) < 0.10
    mask[0, :] = False
    values = np.where(mask, np.nan, X)
    t = FeatureTable.from_matrix([f"P{i}" for i in range(n)],
                                 [f"f{j}" for j in range(p)], values)
    got = iterative_impute(t).to_matrix()
    col_means = np.nanmean(values, axis=0)
    mean_fill = np.where(mask, col_means[None, :], values)
    rmse_imp = np.sqrt(((got[mask] - X[mask]) ** 2).mean())
    rmse_mean = np.sqrt(((mean_fill[mask] - X[mask]) ** 2).mean())
    assert rmse_imp < rmse_mean


def test_impute_all_missing_column_errors():
    t = cont_table([("A", [1.0, 2.0]), ("B", [None, None])])
    with pytest.raises(ValueError, match="'B'"):
        iterative_impute(t)


def test_impute_validates_args():
    t = cont_table([("A", [1.0, None, 2.0])])
    with pytest.raises(ValueError, match="rounds"):
        iterative_impute(t, rounds=0)
    with pytest.raises(ValueError, match="ridge"):
        iterative_impute(t, ridge=-1.0)


# --- rank correlation ---------------------------------------------------------

def test_spearman_hand_case():
    assert abs(spearman_rho([1.0, 2.0, 3.0], [2.0, 1.0, 3.0]) - 0.5) < 1e-12


def test_spearman_monotone_is_one():
    x = [1.0, 2.0, 5.0, 9.0]
    assert abs(spearman_rho(x, [math.exp(v) for v in x]) - 1.0) < 1e-12


def test_spearman_reversal_is_minus_one():
    assert abs(spearman_rho([1.0, 2.0, 3.0], [9.0, 5.0, 1.0]) + 1.0) < 1e-12


def test_spearman_errors():
    with pytest.raises(ValueError, match="3"):
        spearman_rho([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(ValueError, match="finite"):
        spearman_rho([1.0, 2.0, float("nan")], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError, match="constant"):
        spearman_rho([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_spearman_matches_scipy_with_ties(rng):
    for _ in range(30):
        n = int(rng.integers(3, 40))
        x = rng.integers(0, 6, size=n).astype(float)
        y = rng.integers(0, 6, size=n).astype(float)
        if np.unique(x).size < 2 or np.unique(y).size < 2:
            continue
        expect = scipy.stats.spearmanr(x, y).statistic
        assert abs(spearman_rho(x, y) - expect) < 1e-12


# --- correlation filter --------------------------------------------------------

def test_filter_drops_duplicate_column():
    t = cont_table([("a", [1.0, 2.0, 3.0]), ("b", [1.0, 2.0, 3.0])])
    out, report = spearman_filter(t)
    assert out.names == ["a"]
    assert report.dropped_pairs == [("a", "b", 1.0)]


def test_filter_keeps_first_of_identical_triple():
    t = cont_table([("a", [1.0, 2.0, 3.0]), ("b", [1.0, 2.0, 3.0]),
                    ("c", [2.0, 4.0, 6.0])])
    out, report = spearman_filter(t)
    assert out.names == ["a"]
    assert len(report.dropped_pairs) == 2
    assert {pair[1] for pair in report.dropped_pairs} == {"b", "c"}


def test_filter_leaves_independent_columns(rng):
    t = cont_table([("a", [1.0, 2.0, 3.0, 4.0]), ("b", [2.0, 1.0, 4.0, 3.0])])
    out, report = spearman_filter(t)
    assert out.names == ["a", "b"]
    assert report.dropped_pairs == []


def test_filter_no_surviving_pair_above_threshold(rng):
    n, p = 30, 12
    base = rng.normal(size=(n, 3))
    X = np.column_stack([base[:, j % 3] + 0.1 * rng.normal(size=n)
                         for j in range(p)])
    t = FeatureTable.from_matrix([f"P{i}" for i in range(n)],
                                 [f"f{j:02d}" for j in range(p)], X)
    out, _ = spearman_filter(t, threshold=0.80)
    kept = out.to_matrix()
    for a in range(kept.shape[1]):
        for b in range(a + 1, kept.shape[1]):
            assert abs(spearman_rho(kept[:, a], kept[:, b])) <= 0.80


def test_filter_rejects_missing_values():
    t = cont_table([("a", [1.0, None, 3.0])])
    with pytest.raises(ValueError, match="impute"):
        spearman_filter(t)


def test_filter_ignores_constant_columns():
    t = cont_table([("a", [1.0, 1.0, 1.0]), ("b", [1.0, 2.0, 3.0])])
    out, _ = spearman_filter(t)
    assert out.names == ["a", "b"]


# --- lasso ----------------------------------------------------------------------

def standardized(rng, n, p):
    X = rng.normal(size=(n, p))
    X -= X.mean(axis=0)
    X /= X.std(axis=0)
    return X


def test_lasso_orthogonal_soft_threshold(rng):
    n, p = 16, 4
    q, _ = np.linalg.qr(rng.normal(size=(n, p)))
    X = q * math.sqrt(n)  # orthogonal columns with sum(x^2) = n
    y = rng.normal(size=n)
    lam = 0.1
    beta, _ = lasso_coordinate_descent(X, y, lam)
    for j in range(p):
        z = float(X[:, j] @ y) / n
        expect = math.copysign(max(abs(z) - lam, 0.0), z)
        assert abs(beta[j] - expect) < 1e-10


def test_lasso_objective_history_non_increasing(rng):
    X = standardized(rng, 30, 8)
    beta_true = np.array([2.0, 0, 0, -1.0, 0, 0, 0, 0])
    y = X @ beta_true + 0.1 * rng.normal(size=30)
    _, history = lasso_coordinate_descent(X, y, lam=0.05)
    assert len(history) >= 2
    for prev, cur in zip(history, history[1:]):
        assert cur <= prev + 1e-10 * max(1.0, abs(prev))


def test_lasso_huge_penalty_keeps_nothing(rng):
    X = standardized(rng, 25, 6)
    y = rng.normal(size=25)
    kept, report = lasso_select(X, y, lambda_grid=[1e9])
    assert kept == []
    assert report.n_after == 0


def test_lasso_recovers_planted_signal(rng):
    n, p = 100, 20
    X = rng.normal(size=(n, p))
    y = 3.0 * X[:, 1] - 2.0 * X[:, 5] + 0.1 * rng.normal(size=n)
    kept, report = lasso_select(X, y, seed=7)
    assert {1, 5} <= set(kept)
    assert report.chosen_lambda in report.lambda_grid


def test_lasso_select_deterministic(rng):
    X = rng.normal(size=(40, 8))
    y = X[:, 2] + 0.2 * rng.normal(size=40)
    a, _ = lasso_select(X, y, seed=3)
    b, _ = lasso_select(X, y, seed=3)
    assert a == b


def test_lasso_select_drops_constant_columns(rng):
    X = rng.normal(size=(30, 4))
    X[:, 2] = 5.0
    y = X[:, 0] + 0.1 * rng.normal(size=30)
    with pytest.warns(UserWarning, match="zero-variance"):
        kept, _ = lasso_select(X, y)
    assert 2 not in kept


def test_lasso_select_needs_enough_rows(rng):
    with pytest.raises(ValueError, match="rows"):
        lasso_select(rng.normal(size=(3, 2)), np.zeros(3), folds=5)


def test_lasso_objective_value(rng):
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([1.0, 2.0])
    beta = np.array([0.5, -0.5])
    # residual (0.5, 2.5): ||r||^2/(2*2) + lam*1.0
    assert abs(lasso_objective(X, y, beta, 0.3)
               - ((0.25 + 6.25) / 4.0 + 0.3)) < 1e-12


# --- selection response ------------------------------------------------------------

def test_response_log_time_events():
    resp, rows = selection_response([10.0, 20.0, 30.0], [1, 0, 1])
    assert rows.tolist() == [True, False, True]
    np.testing.assert_allclose(resp, [math.log(10.0), math.log(30.0)])


def test_response_martingale_hand_case():
    # H(1)=1/3, H(2)=1/3+1/2, H(3)=H(2); residual = event - H
    resp, rows = selection_response([1.0, 2.0, 3.0], [1, 1, 0],
                                    mode="martingale")
    assert rows.all()
    np.testing.assert_allclose(resp, [2.0 / 3.0, 1.0 / 6.0, -5.0 / 6.0],
                               atol=1e-12)
    assert abs(resp.sum()) < 1e-12


def test_response_errors():
    with pytest.raises(ValueError, match="positive"):
        selection_response([0.0, 1.0, 2.0], [1, 1, 1])
    with pytest.raises(ValueError, match="events"):
        selection_response([1.0, 2.0, 3.0], [1, 0, 0])
    with pytest.raises(ValueError, match="mode"):
        selection_response([1.0, 2.0], [1, 1], mode="rank")


# --- CSV plumbing --------------------------------------------------------------------

CLINICAL_HEADER = ("PatientID,CenterID,Age,Gender,T,N,M,TNMgroup,TNMedition,"
                   "Tobacco,Alcohol,Performance,HPV,Chemotherapy,"
                   "Progression,PFS_days")


def write_clinical(path, rows):
    path.write_text(CLINICAL_HEADER + "\n" + "\n".join(rows) + "\n")


def test_load_clinical_csv(tmp_path):
    f = tmp_path / "clinical.csv"
    write_clinical(f, [
        "P1,CA,63,M,T2,N1,M0,III,7,1,0,0,,1,1,412",
        "P2,CB,,F,T1,N0,M0,II,7,0,0,1,0,0,0,900",
    ])
    data = load_clinical_csv(f)
    assert data.table.row_ids == ["P1", "P2"]
    assert data.time.tolist() == [412.0, 900.0]
    assert data.event.tolist() == [1, 0]
    assert data.centers == ["CA", "CB"]
    age = data.table.column("Age")
    assert age.values[0] == 63.0 and math.isnan(age.values[1])
    assert data.table.column("HPV").values == [None, "0"]


def test_load_clinical_rejects_wrong_header(tmp_path):
    f = tmp_path / "clinical.csv"
    f.write_text("PatientID,Age\nP1,5\n")
    with pytest.raises(ValueError, match="header"):
        load_clinical_csv(f)


def test_load_clinical_rejects_missing_survival(tmp_path):
    f = tmp_path / "clinical.csv"
    write_clinical(f, ["P1,CA,63,M,T2,N1,M0,III,7,1,0,0,0,1,1,"])
    with pytest.raises(ValueError, match="PFS_days"):
        load_clinical_csv(f)


def test_load_clinical_rejects_bad_event(tmp_path):
    f = tmp_path / "clinical.csv"
    write_clinical(f, ["P1,CA,63,M,T2,N1,M0,III,7,1,0,0,0,1,2,100"])
    with pytest.raises(ValueError, match="Progression"):
        load_clinical_csv(f)


def test_load_clinical_rejects_nonpositive_time(tmp_path):
    f = tmp_path / "clinical.csv"
    write_clinical(f, ["P1,CA,63,M,T2,N1,M0,III,7,1,0,0,0,1,1,0"])
    with pytest.raises(ValueError, match="PFS_days"):
        load_clinical_csv(f)


def test_features_csv_round_trip(tmp_path):
    t = cont_table([("a", [1.5, None]), ("b", [0.1234567890123, -2.0])],
                   row_ids=["P1", "P2"])
    f = tmp_path / "features.csv"
    save_table_csv(t, f)
    back = load_features_csv(f)
    assert back.row_ids == ["P1", "P2"]
    assert back.names == ["a", "b"]
    assert back.column("a").values[0] == 1.5
    assert math.isnan(back.column("a").values[1])
    assert back.column("b").values == [0.1234567890123, -2.0]


def test_features_csv_requires_patient_id(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("id,a\nP1,2\n")
    with pytest.raises(ValueError, match="PatientID"):
        load_features_csv(f)


def test_join_tables_aligns_row_order():
    t1 = cont_table([("a", [1.0, 2.0])], row_ids=["P1", "P2"])
    t2 = cont_table([("b", [20.0, 10.0])], row_ids=["P2", "P1"])
    joined = join_tables([t1, t2])
    assert joined.row_ids == ["P1", "P2"]
    assert joined.column("b").values == [10.0, 20.0]


def test_join_tables_rejects_mismatched_ids():
    t1 = cont_table([("a", [1.0])], row_ids=["P1"])
    t2 = cont_table([("b", [1.0])], row_ids=["P9"])
    with pytest.raises(ValueError, match="row id"):
        join_tables([t1, t2])
