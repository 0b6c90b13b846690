"""End-to-end checks of the command line: every subcommand on tiny
inputs, JSON/CSV outputs parsed back, and exit codes for the usual
failure modes."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from segsurv import losses
from segsurv.cli import main
from segsurv.synth import CohortSpec, PhantomSpec, synth_cohort
from segsurv.volume import load_volume, save_volume

from conftest import make_mask, make_probmap, make_volume


def run_cli(capsys, argv):
    """Invoke main() in-process; return (exit code, parsed stdout JSON)."""
    rc = main(argv)
    out = capsys.readouterr().out.strip()
    return rc, json.loads(out.splitlines()[-1]) if out else None


def test_no_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_bad_spacing_triplet_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["preprocess", "--ct", "a", "--pet", "b", "--output",
              str(tmp_path), "--target-spacing", "1,2"])
    assert exc.value.code == 2


def test_loss_eval_matches_library(capsys, tmp_path):
    rng = np.random.default_rng(11)
    truth = (rng.random((4, 4, 4)) < 0.4).astype(np.uint8)
    # volumes store float32, so pre-round to make save/load lossless
    pred = rng.uniform(0.01, 0.99, size=(4, 4, 4)).astype(np.float32)
    pred = pred.astype(np.float64)
    save_volume(make_mask(np.argwhere(truth), dims=(4, 4, 4)),
                tmp_path / "truth.json")
    save_volume(make_probmap(pred), tmp_path / "pred.json")

    rc, out = run_cli(capsys, [
        "--threads", "1", "loss-eval",
        "--truth", str(tmp_path / "truth.json"),
        "--pred", str(tmp_path / "pred.json"),
        "--gamma", "1.5", "--smooth", "0.5"])
    assert rc == 0
    params = losses.LossParams(gamma=1.5, smooth=0.5)
    y, p = truth.ravel().astype(np.float64), pred.ravel()
    assert out["dice"] == pytest.approx(losses.dice_loss(y, p, params),
                                        abs=1e-12)
    assert out["focal"] == pytest.approx(losses.focal_loss(y, p, params),
                                         abs=1e-12)
    assert out["log_cosh_dice_focal"] == pytest.approx(
        losses.log_cosh_dice_focal(y, p, params), abs=1e-12)


def test_preprocess_normalizes(capsys, tmp_path):
    rng = np.random.default_rng(3)
    save_volume(make_volume(rng.normal(50.0, 30.0, size=(6, 6, 6))),
                tmp_path / "ct.json")
    save_volume(make_volume(rng.uniform(0.0, 9.0, size=(6, 6, 6))),
                tmp_path / "pet.nii.gz")
    out_dir = tmp_path / "pre"
    rc, out = run_cli(capsys, [
        "preprocess", "--ct", str(tmp_path / "ct.json"),
        "--pet", str(tmp_path / "pet.nii.gz"),
        "--output", str(out_dir), "--ct-clip", "0,100"])
    assert rc == 0
    ct = load_volume(out["ct"])
    pet = load_volume(out["pet"])
    assert ct.data.shape == (6, 6, 6)
    # float32 storage limits how exactly the z-scoring survives the disk
    for vol in (ct, pet):
        assert abs(vol.data.mean()) < 1e-6
        assert abs(vol.data.std() - 1.0) < 1e-6


def test_preprocess_no_normalize_keeps_clip_bounds(capsys, tmp_path):
    data = np.linspace(-500.0, 500.0, 5 ** 3).reshape(5, 5, 5)
    save_volume(make_volume(data), tmp_path / "ct.json")
    save_volume(make_volume(np.abs(data)), tmp_path / "pet.json")
    rc, out = run_cli(capsys, [
        "preprocess", "--ct", str(tmp_path / "ct.json"),
        "--pet", str(tmp_path / "pet.json"),
        "--output", str(tmp_path / "pre"),
        "--ct-clip=-100,100", "--no-normalize"])
    assert rc == 0
    ct = load_volume(out["ct"])
    assert ct.data.min() == -100.0 and ct.data.max() == 100.0


def test_ensemble_averages(capsys, tmp_path):
    save_volume(make_probmap(np.full((4, 4, 4), 0.2)), tmp_path / "a.json")
    save_volume(make_probmap(np.full((4, 4, 4), 0.6)), tmp_path / "b.json")
    out_path = tmp_path / "mean.json"
    rc, out = run_cli(capsys, [
        "ensemble", "--probmaps", str(tmp_path / "a.json"),
        str(tmp_path / "b.json"), "--output", str(out_path)])
    assert rc == 0
    assert out["n_members"] == 2
    mean = load_volume(out_path)
    np.testing.assert_allclose(mean.data, 0.4, atol=1e-12)


def test_refine_writes_mask_and_marginal(capsys, tmp_path):
    rng = np.random.default_rng(8)
    inside = np.zeros((5, 5, 5))
    inside[1:4, 1:4, 1:4] = 1.0
    pmap = np.clip(inside + rng.normal(0.0, 0.2, inside.shape), 0.0, 1.0)
    save_volume(make_probmap(pmap), tmp_path / "prob.json")
    save_volume(make_volume(inside + rng.normal(0.0, 0.05, inside.shape)),
                tmp_path / "ct.json")
    save_volume(make_volume(2 * inside + rng.normal(0.0, 0.05, inside.shape)),
                tmp_path / "pet.json")
    (tmp_path / "crf.json").write_text(
        json.dumps({"iterations": 2, "neighborhood_radius": 1}))

    rc, out = run_cli(capsys, [
        "refine", "--probmap", str(tmp_path / "prob.json"),
        "--ct", str(tmp_path / "ct.json"), "--pet", str(tmp_path / "pet.json"),
        "--output", str(tmp_path / "ref"),
        "--config", str(tmp_path / "crf.json")])
    assert rc == 0
    mask = load_volume(out["mask"])
    marginal = load_volume(out["marginal"])
    assert set(np.unique(mask.data)) <= {0, 1}
    assert marginal.data.min() >= 0.0 and marginal.data.max() <= 1.0
    assert out["foreground_voxels"] == int(mask.data.sum())


def test_metrics_hand_values(capsys, tmp_path):
    same = make_mask([(1, 1, 1), (1, 1, 2)], dims=(4, 4, 4))
    a = make_mask([(0, 0, 0)], dims=(4, 4, 4))
    b = make_mask([(3, 0, 0)], dims=(4, 4, 4))
    for name, m in [("same.json", same), ("a.json", a), ("b.json", b)]:
        save_volume(m, tmp_path / name)
    pairs = tmp_path / "pairs.csv"
    with open(pairs, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "pred_path", "truth_path"])
        w.writerow(["X", str(tmp_path / "same.json"), str(tmp_path / "same.json")])
        w.writerow(["Y", str(tmp_path / "a.json"), str(tmp_path / "b.json")])
    out_csv = tmp_path / "scores.csv"

    rc, out = run_cli(capsys, ["metrics", "--pairs", str(pairs),
                               "--output", str(out_csv)])
    assert rc == 0
    assert out["n_cases"] == 2
    assert out["mean_dsc"] == 0.5

    with open(out_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["patient_id", "dsc", "avg_hd", "hd95"]
    by_id = {r[0]: [float(v) for v in r[1:]] for r in rows[1:]}
    assert by_id["X"] == [1.0, 0.0, 0.0]
    assert by_id["Y"] == [0.0, 3.0, 3.0]
    assert by_id["MEAN"] == [0.5, 1.5, 1.5]


def test_metrics_bad_header_exits_1(capsys, tmp_path):
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("id,pred,truth\n")
    rc = main(["metrics", "--pairs", str(pairs),
               "--output", str(tmp_path / "out.csv")])
    captured = capsys.readouterr()
    assert rc == 1
    assert "error:" in captured.err


def test_radiomics_append_rows(capsys, tmp_path):
    rng = np.random.default_rng(21)
    save_volume(make_volume(rng.normal(size=(6, 6, 6))), tmp_path / "ct.json")
    save_volume(make_volume(rng.normal(size=(6, 6, 6))), tmp_path / "pet.json")
    voxels = [(i, j, k) for i in (2, 3) for j in (2, 3) for k in (2, 3)]
    save_volume(make_mask(voxels, dims=(6, 6, 6)), tmp_path / "mask.json")
    (tmp_path / "rad.json").write_text(json.dumps({"bins": 8}))
    out_csv = tmp_path / "features.csv"

    base = ["radiomics", "--ct", str(tmp_path / "ct.json"),
            "--pet", str(tmp_path / "pet.json"),
            "--mask", str(tmp_path / "mask.json"),
            "--output", str(out_csv), "--config", str(tmp_path / "rad.json")]
    rc, out = run_cli(capsys, base + ["--patient-id", "P0"])
    assert rc == 0
    rc, out2 = run_cli(capsys, base + ["--patient-id", "P1", "--append"])
    assert rc == 0
    assert out["n_features"] == out2["n_features"]

    with open(out_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 3
    assert rows[0][0] == "PatientID"
    assert len(rows[0]) == out["n_features"] + 1
    assert [r[0] for r in rows[1:]] == ["P0", "P1"]
    assert all(np.isfinite(float(v)) for r in rows[1:] for v in r[1:])


@pytest.fixture(scope="module")
def cli_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("clicohort")
    spec = CohortSpec(n_patients=12, centers=("A", "B", "C"),
                      phantom=PhantomSpec(dims=(8, 8, 8), n_probmaps=2),
                      n_deep_features=4)
    return synth_cohort(spec, out / "cohort", seed=14)


def test_impute_cli(capsys, cli_cohort, tmp_path):
    out_csv = tmp_path / "imputed.csv"
    rc, out = run_cli(capsys, [
        "impute", "--clinical", cli_cohort["clinical_csv"],
        "--deep", cli_cohort["deep_features_csv"],
        "--output", str(out_csv), "--rounds", "2"])
    assert rc == 0
    assert out["n_rows"] == 12
    with open(out_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 13
    assert len(rows[0]) == out["n_features"] + 1
    assert all(np.isfinite(float(v)) for r in rows[1:] for v in r[1:])


def test_select_cli(capsys, cli_cohort, tmp_path):
    imputed = tmp_path / "imputed.csv"
    run_cli(capsys, ["impute", "--clinical", cli_cohort["clinical_csv"],
                     "--deep", cli_cohort["deep_features_csv"],
                     "--output", str(imputed), "--rounds", "2"])
    out_dir = tmp_path / "sel"
    rc, out = run_cli(capsys, [
        "select", "--features", str(imputed),
        "--clinical", cli_cohort["clinical_csv"],
        "--output", str(out_dir), "--folds", "3"])
    assert rc == 0
    report = json.loads((out_dir / "selection_report.json").read_text())
    assert report["kept"] == out["kept"]
    with open(imputed, newline="") as fh:
        all_names = next(csv.reader(fh))[1:]
    assert set(out["kept"]) <= set(all_names)
    with open(out_dir / "features_selected.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header == ["PatientID"] + out["kept"]


@pytest.mark.filterwarnings("ignore:n=.*fit may be unstable")
def test_survival_fit_eval_roundtrip(capsys, cli_cohort, tmp_path):
    imputed = tmp_path / "imputed.csv"
    run_cli(capsys, ["impute", "--clinical", cli_cohort["clinical_csv"],
                     "--deep", cli_cohort["deep_features_csv"],
                     "--output", str(imputed), "--rounds", "2"])
    configs = {
        "coxph": {"ridge": 5.0},
        "rsf": {"n_trees": 5, "min_leaf": 2},
        "mlpcox": {"hidden": 4, "epochs": 2, "dropout": 0.0},
    }
    for name, cfg in configs.items():
        cfg_path = tmp_path / f"{name}_cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        model_path = tmp_path / f"{name}.json"
        rc, out = run_cli(capsys, [
            "survival", "fit", "--model", name, "--features", str(imputed),
            "--clinical", cli_cohort["clinical_csv"],
            "--output", str(model_path), "--config", str(cfg_path)])
        assert rc == 0 and out == {"model": name, "output": str(model_path)}

        risks_csv = tmp_path / f"{name}_risks.csv"
        rc, out = run_cli(capsys, [
            "survival", "eval", "--model", str(model_path),
            "--features", str(imputed),
            "--clinical", cli_cohort["clinical_csv"],
            "--output", str(risks_csv)])
        assert rc == 0
        assert out["model"] == name
        assert 0.0 <= out["c_index"] <= 1.0
        with open(risks_csv, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["PatientID", "risk"]
        assert len(rows) == 13


def test_survival_compare_cli(capsys, tmp_path):
    def write_scores(name, values):
        path = tmp_path / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "score"])
            for i, v in enumerate(values):
                w.writerow([i, repr(v)])
        return str(path)

    a = write_scores("a.csv", [0.70, 0.72, 0.68, 0.71])
    b = write_scores("b.csv", [0.65, 0.66, 0.64, 0.70])
    rc, out = run_cli(capsys, ["survival", "compare", "--scores-a", a,
                               "--scores-b", b, "--n-train", "9",
                               "--n-test", "3"])
    assert rc == 0
    assert out["k"] == 4
    assert np.isfinite(out["t"]) and 0.0 <= out["p"] <= 1.0

    rc, out = run_cli(capsys, ["survival", "compare", "--scores-a", a,
                               "--scores-b", a, "--n-train", "9",
                               "--n-test", "3"])
    assert rc == 0
    assert out["t"] == 0.0 and out["p"] == 1.0


def test_synth_then_run_end_to_end(capsys, tmp_path):
    rc, paths = run_cli(capsys, [
        "synth", "--output", str(tmp_path / "cohort"), "--seed", "4",
        "--patients", "4", "--dims", "8", "8", "8", "--probmaps", "2",
        "--noise-prob", "0.0"])
    assert rc == 0

    cfg = {
        "schema_version": 1, "seed": 2,
        "output_dir": str(tmp_path / "out"),
        "inputs": {"manifest_csv": paths["manifest_csv"]},
        "stages": {"preprocess": {}, "ensemble": {}, "metrics": {}},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    rc, out = run_cli(capsys, ["run", "--config", str(cfg_path)])
    assert rc == 0
    assert out["failures_total"] == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["stages"]["metrics"]["summary"]["mean_dsc_refined"] == 1.0


def test_run_exits_1_on_patient_failure(capsys, tmp_path):
    rc, paths = run_cli(capsys, [
        "synth", "--output", str(tmp_path / "cohort"), "--seed", "4",
        "--patients", "3", "--dims", "8", "8", "8"])
    assert rc == 0
    (tmp_path / "cohort" / "patients" / "P001" / "ct.nii.gz").write_bytes(
        b"garbage")
    cfg = {
        "schema_version": 1, "seed": 2,
        "output_dir": str(tmp_path / "out"),
        "inputs": {"manifest_csv": paths["manifest_csv"]},
        "stages": {"preprocess": {}},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    rc, out = run_cli(capsys, ["run", "--config", str(cfg_path)])
    assert rc == 1
    assert out["failures_total"] == 1


def test_run_strictness_on_unknown_key(capsys, cli_cohort, tmp_path):
    cfg = {
        "schema_version": 1, "seed": 2,
        "output_dir": str(tmp_path / "out"),
        "inputs": {"manifest_csv": cli_cohort["manifest_csv"]},
        "stages": {"metrics": {}, "mystery": {"x": 1}},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))

    rc = main(["run", "--config", str(cfg_path)])
    err = capsys.readouterr().err
    assert rc == 1
    assert "error:" in err and "mystery" in err

    with pytest.warns(UserWarning, match="mystery"):
        rc, out = run_cli(capsys, ["run", "--config", str(cfg_path),
                                   "--no-strict",
                                   "--output", str(tmp_path / "out2")])
    assert rc == 0
    assert (tmp_path / "out2" / "report.json").is_file()


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "segsurv.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for word in ("preprocess", "refine", "survival", "synth", "run"):
        assert word in proc.stdout
