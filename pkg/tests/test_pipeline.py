"""End-to-end pipeline: config validation, stage orchestration, fail-soft
semantics, and deterministic reruns."""

import json
from pathlib import Path

import numpy as np
import pytest

from segsurv.pipeline import (ConfigError, ManifestRow, load_config,
                              load_manifest_csv, leave_one_center_out_splits,
                              run_pipeline)
from segsurv.synth import CohortSpec, PhantomSpec, synth_cohort


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    spec = CohortSpec(n_patients=8, centers=("A", "B"),
                      phantom=PhantomSpec(dims=(8, 8, 8), n_probmaps=2),
                      n_deep_features=3)
    return synth_cohort(spec, root, seed=60)


def base_config(cohort, out_dir, stages) -> dict:
    return {
        "schema_version": 1,
        "seed": 7,
        "output_dir": str(out_dir),
        "inputs": {
            "manifest_csv": cohort["manifest_csv"],
            "clinical_csv": cohort["clinical_csv"],
            "deep_features_csv": cohort["deep_features_csv"],
        },
        "stages": stages,
    }


# --- manifest -------------------------------------------------------------

def test_manifest_rejects_wrong_header(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text("patient,ct\nP1,x\n")
    with pytest.raises(ValueError, match="header"):
        load_manifest_csv(f)


def test_manifest_rejects_duplicate_ids(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text("patient_id,ct_path,pet_path,probmap_paths,"
                 "truth_mask_path,center_id\n"
                 "P1,a,b,c,,X\nP1,a,b,c,,X\n")
    with pytest.raises(ValueError, match="duplicate"):
        load_manifest_csv(f)


def test_manifest_rejects_uneven_probmap_counts(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text("patient_id,ct_path,pet_path,probmap_paths,"
                 "truth_mask_path,center_id\n"
                 "P1,a,b,p1;p2,,X\nP2,a,b,p1,,X\n")
    with pytest.raises(ValueError, match="probmap"):
        load_manifest_csv(f)


def test_manifest_empty_truth_is_none(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text("patient_id,ct_path,pet_path,probmap_paths,"
                 "truth_mask_path,center_id\nP1,a,b,p,,X\n")
    row = load_manifest_csv(f)[0]
    assert row.truth_mask_path is None
    assert row.probmap_paths == [str(tmp_path / "p")]


# --- leave-one-center-out -----------------------------------------------------

def make_rows(center_counts: dict) -> list[ManifestRow]:
    rows = []
    i = 0
    for center, count in center_counts.items():
        for _ in range(count):
            rows.append(ManifestRow(patient_id=f"P{i:02d}", ct_path="",
                                    pet_path="", probmap_paths=[],
                                    truth_mask_path=None, center_id=center))
            i += 1
    return rows


def test_loco_one_split_per_center():
    splits = leave_one_center_out_splits(
        make_rows({"C1": 2, "C2": 2, "C3": 2, "C4": 2, "C5": 2}))
    assert len(splits) == 5
    for train, test in splits:
        assert len(train) == 8 and len(test) == 2
        assert not set(train) & set(test)


def test_loco_split_sizes_follow_center_sizes():
    splits = leave_one_center_out_splits(make_rows({"A": 3, "B": 7}))
    sizes = sorted(len(test) for _, test in splits)
    assert sizes == [3, 7]
    for train, test in splits:
        assert len(train) + len(test) == 10


def test_loco_single_center_errors():
    with pytest.raises(ValueError, match="2 centers"):
        leave_one_center_out_splits(make_rows({"only": 4}))


# --- config validation ------------------------------------------------------------

def test_config_reports_all_errors_together(cohort, tmp_path):
    cfg = base_config(cohort, tmp_path / "out", {"impute": {}})
    cfg["schema_version"] = 99
    cfg["bogus_top"] = 1
    cfg["stages"]["impute"]["bogus_param"] = 2
    cfg["stages"]["crf"] = {}
    with pytest.raises(ConfigError) as err:
        load_config(cfg)
    msg = str(err.value)
    assert "schema_version" in msg
    assert "bogus_top" in msg
    assert "bogus_param" in msg
    assert "requires stage(s) ['ensemble']" in msg


def test_config_missing_manifest_names_path_no_partial_output(cohort, tmp_path):
    out = tmp_path / "never_created"
    cfg = base_config(cohort, out, {"metrics": {}})
    cfg["inputs"]["manifest_csv"] = str(tmp_path / "absent.csv")
    with pytest.raises(ConfigError, match="absent.csv"):
        load_config(cfg)
    assert not out.exists()


def test_config_missing_referenced_volume_fails_validation(cohort, tmp_path):
    import csv as csv_mod
    rows = list(csv_mod.reader(open(cohort["manifest_csv"])))
    rows[1][1] = "missing_ct.json"
    broken = tmp_path / "broken_manifest.csv"
    with open(broken, "w", newline="") as fh:
        csv_mod.writer(fh).writerows(rows)
    out = tmp_path / "out"
    cfg = base_config(cohort, out, {"metrics": {}})
    cfg["inputs"]["manifest_csv"] = str(broken)
    with pytest.raises(ConfigError, match="missing_ct.json"):
        load_config(cfg)
    assert not out.exists()


def test_config_rejects_unknown_model(cohort, tmp_path):
    cfg = base_config(cohort, tmp_path / "out",
                      {"impute": {}, "fit": {"models": ["xgboost"]}})
    with pytest.raises(ConfigError, match="xgboost"):
        load_config(cfg)


def test_config_compare_needs_two_models(cohort, tmp_path):
    cfg = base_config(cohort, tmp_path / "out",
                      {"impute": {}, "compare": {"models": ["coxph"]}})
    with pytest.raises(ConfigError, match="two models"):
        load_config(cfg)


def test_config_non_strict_warns_on_unknown_keys(cohort, tmp_path):
    cfg = base_config(cohort, tmp_path / "out", {"impute": {}})
    cfg["stages"]["impute"]["mystery"] = 1
    with pytest.warns(UserWarning, match="mystery"):
        parsed = load_config(cfg, strict=False)
    assert parsed.stages["impute"]["rounds"] == 10


def test_config_merges_stage_defaults(cohort, tmp_path):
    cfg = base_config(cohort, tmp_path / "out", {"crf": {"iterations": 2},
                                                 "ensemble": {}})
    parsed = load_config(cfg)
    assert parsed.stages["crf"]["iterations"] == 2
    assert parsed.stages["crf"]["w_appearance"] == 3.0


# --- runs ----------------------------------------------------------------------

def test_metrics_only_run_perfect_probmaps(tmp_path):
    # zero-noise probability maps equal the truth, so the fallback
    # prediction (first probmap thresholded) scores dsc 1.0
    spec = CohortSpec(n_patients=3, centers=("A",),
                      phantom=PhantomSpec(dims=(8, 8, 8), noise_prob=0.0))
    paths = synth_cohort(spec, tmp_path / "cohort", seed=2)
    out = tmp_path / "out"
    cfg = {
        "schema_version": 1, "seed": 1, "output_dir": str(out),
        "inputs": {"manifest_csv": paths["manifest_csv"]},
        "stages": {"metrics": {}},
    }
    report = run_pipeline(load_config(cfg))
    assert report["failures_total"] == 0
    summary = report["stages"]["metrics"]["summary"]
    assert summary["mean_dsc_refined"] == 1.0
    assert (out / "metrics.csv").is_file()


@pytest.mark.filterwarnings("ignore:n=.*fit may be unstable")
def test_rerun_is_bit_identical(cohort, tmp_path):
    out = tmp_path / "out"
    cfg = base_config(cohort, out, {
        "preprocess": {}, "ensemble": {},
        "crf": {"iterations": 1, "neighborhood_radius": 1},
        "metrics": {}, "radiomics": {"bins": 8},
        "impute": {"rounds": 2},
        "fit": {"models": ["coxph"], "cox_ridge": 1.0},
        "eval": {},
    })
    report1 = run_pipeline(load_config(cfg))
    bytes1 = (out / "report.json").read_bytes()
    report2 = run_pipeline(load_config(cfg))
    bytes2 = (out / "report.json").read_bytes()
    assert report1["failures_total"] == 0
    assert bytes1 == bytes2
    assert report1["artifacts"] == report2["artifacts"]


@pytest.mark.filterwarnings("ignore:n=.*fit may be unstable")
def test_full_run_with_loco_and_compare(cohort, tmp_path):
    out = tmp_path / "out"
    cfg = base_config(cohort, out, {
        "preprocess": {}, "ensemble": {},
        "crf": {"iterations": 1, "neighborhood_radius": 1},
        "metrics": {}, "radiomics": {"bins": 8},
        "impute": {"rounds": 2},
        "fit": {"models": ["coxph", "rsf"], "cox_ridge": 1.0,
                "rsf_min_leaf": 2},
        "eval": {"loco": True},
        "compare": {"models": ["coxph", "rsf"], "folds": 2},
    })
    report = run_pipeline(load_config(cfg))
    stages = report["stages"]
    assert report["failures_total"] == 0
    loco = stages["eval"]["summary"]["loco"]
    assert sorted(loco.keys()) == ["A", "B"]
    assert all(isinstance(v, float) for entry in loco.values()
               for v in entry.values())
    compare = stages["compare"]["summary"]
    assert set(compare["fold_scores"]) == {"coxph", "rsf"}
    assert len(compare["fold_scores"]["coxph"]) == 2
    assert "coxph_vs_rsf" in compare["pairwise"]
    assert (out / "models" / "coxph.json").is_file()
    assert (out / "models" / "rsf.json").is_file()
    assert (out / "compare.json").is_file()


def test_corrupt_patient_fails_soft(cohort, tmp_path):
    # damage one CT after validation-time existence checks pass
    import csv as csv_mod
    import shutil
    spec = CohortSpec(n_patients=4, centers=("A",),
                      phantom=PhantomSpec(dims=(8, 8, 8)))
    paths = synth_cohort(spec, tmp_path / "cohort", seed=5)
    bad_ct = tmp_path / "cohort" / "patients" / "P001" / "ct.nii.gz"
    bad_ct.write_bytes(b"garbage")
    out = tmp_path / "out"
    cfg = {
        "schema_version": 1, "seed": 3, "output_dir": str(out),
        "inputs": {"manifest_csv": paths["manifest_csv"]},
        "stages": {"preprocess": {}, "metrics": {}},
    }
    report = run_pipeline(load_config(cfg))
    pre = report["stages"]["preprocess"]
    assert pre["succeeded"] == ["P000", "P002", "P003"]
    assert list(pre["failed"]) == ["P001"]
    assert len(pre["succeeded"]) + len(pre["failed"]) == report["manifest_size"]
    # the broken patient never reaches metrics
    met = report["stages"]["metrics"]
    assert "P001" not in met["succeeded"] and "P001" not in met["failed"]
    assert report["failures_total"] == 1


@pytest.mark.filterwarnings("ignore:n=.*fit may be unstable")
def test_select_failure_lets_fit_fall_back(cohort, tmp_path):
    # one observed event makes the selection response unbuildable, but
    # fit only needs the imputed table, so it must still run (ridge keeps
    # the one-event likelihood bounded)
    import csv as csv_mod
    rows = list(csv_mod.reader(open(cohort["clinical_csv"])))
    header = rows[0]
    ev = header.index("Progression")
    for i, row in enumerate(rows[1:], start=1):
        row[ev] = "1" if i == 1 else "0"
    clinical = tmp_path / "one_event.csv"
    with open(clinical, "w", newline="") as fh:
        csv_mod.writer(fh).writerows(rows)

    out = tmp_path / "out"
    cfg = base_config(cohort, out, {
        "impute": {"rounds": 2}, "select": {},
        "fit": {"models": ["coxph"], "cox_ridge": 1.0}, "eval": {}})
    cfg["inputs"]["clinical_csv"] = str(clinical)
    report = run_pipeline(load_config(cfg))
    stages = report["stages"]
    assert stages["impute"]["failed"] == {}
    assert "_stage" in stages["select"]["failed"]
    assert "events" in stages["select"]["failed"]["_stage"]
    assert stages["fit"]["failed"] == {}
    assert stages["eval"]["failed"] == {}
    assert (out / "models" / "coxph.json").is_file()
    assert report["failures_total"] == 1


def test_impute_failure_blocks_dependents(cohort, tmp_path):
    # age column with no observed values cannot be imputed; everything
    # downstream of impute is skipped, not crashed
    import csv as csv_mod
    rows = list(csv_mod.reader(open(cohort["clinical_csv"])))
    age = rows[0].index("Age")
    for row in rows[1:]:
        row[age] = ""
    clinical = tmp_path / "no_age.csv"
    with open(clinical, "w", newline="") as fh:
        csv_mod.writer(fh).writerows(rows)

    out = tmp_path / "out"
    cfg = base_config(cohort, out, {
        "impute": {"rounds": 1}, "select": {}, "fit": {"models": ["coxph"]},
        "eval": {}, "compare": {"models": ["coxph", "rsf"], "folds": 2},
    })
    cfg["inputs"]["clinical_csv"] = str(clinical)
    report = run_pipeline(load_config(cfg))
    stages = report["stages"]
    assert "Age" in stages["impute"]["failed"]["_stage"]
    for stage in ("select", "fit", "eval", "compare"):
        assert stages[stage]["failed"]["_stage"].startswith(
            "skipped: failed dependency")
    assert report["failures_total"] == 5


def test_report_hash_covers_artifacts(cohort, tmp_path):
    out = tmp_path / "out"
    cfg = base_config(cohort, out, {"impute": {"rounds": 1}})
    report = run_pipeline(load_config(cfg))
    assert "features_imputed.csv" in report["artifacts"]
    assert "report.json" not in report["artifacts"]
    on_disk = json.loads((out / "report.json").read_text())
    assert on_disk == report
