"""Cohort pipeline: validated JSON configuration, fixed stage order,
per-patient fail-soft execution, and a deterministic run report.

Stages run in the canonical order

    preprocess -> ensemble -> crf -> metrics -> radiomics
               -> impute -> select -> fit -> eval -> compare

with any subset configured. Volume stages record per-patient failures
and keep going; a failed patient drops out of the downstream stages.
The run report carries a sha256 for every artifact written, and a rerun
with identical config, inputs, and seed reproduces every byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import crf as crf_mod
from . import tabular
from .metrics import SegScore, average_hd, dice_similarity, hd95
from .radiomics import RadiomicsConfig, extract_all
from .seeding import derive_seed
from .survival import (SurvivalDataset, concordance_index,
                       corrected_paired_ttest, cox_risk, fit_coxph,
                       fit_mlp_cox, fit_rsf, kfold_cv, mlp_risk, rsf_risk,
                       save_model)
from .volume import (Mask3D, ensemble_mean, load_boxes_csv, load_volume,
                     mask_from_volume, probmap_from_volume, save_volume,
                     threshold_map, zscore_normalize, clip_intensities,
                     resample_trilinear, crop_to_box)

__all__ = ["ConfigError", "PipelineConfig", "ManifestRow", "load_config",
           "load_manifest_csv", "leave_one_center_out_splits", "run_pipeline",
           "CANONICAL_STAGES", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1

CANONICAL_STAGES = ("preprocess", "ensemble", "crf", "metrics", "radiomics",
                    "impute", "select", "fit", "eval", "compare")

_TOP_KEYS = {"schema_version", "seed", "output_dir", "inputs", "stages"}
_INPUT_KEYS = {"manifest_csv", "clinical_csv", "deep_features_csv", "boxes_csv"}

_STAGE_DEFAULTS: dict[str, dict] = {
    "preprocess": {"target_spacing": None, "ct_clip": None, "pet_clip": None,
                   "pet_prescale": None, "normalize": True},
    "ensemble": {},
    "crf": {"iterations": 5, "neighborhood_radius": 3, "w_appearance": 3.0,
            "w_smoothness": 1.0, "theta_alpha": 30.0, "theta_beta": 0.5,
            "theta_gamma": 3.0, "threshold": 0.5},
    "metrics": {},
    "radiomics": {"bins": 32, "modalities": ["ct", "pet"],
                  "mask_source": None},
    "impute": {"rounds": 10, "ridge": 1e-3},
    "select": {"spearman_threshold": 0.80, "response": "log_time_events",
               "folds": 5},
    "fit": {"models": ["coxph"], "cox_ridge": 0.0, "rsf_trees": 50,
            "rsf_min_leaf": 3, "rsf_mtry": None, "mlp_hidden": 32,
            "mlp_dropout": 0.2, "mlp_l2": 1e-3, "mlp_epochs": 50,
            "mlp_lr": 0.01, "mlp_momentum": 0.9},
    "eval": {"loco": False},
    "compare": {"models": ["coxph", "rsf"], "folds": 5},
}

_MODEL_NAMES = ("coxph", "rsf", "mlpcox")

# stages a configured stage needs to have run before it
_STAGE_DEPS = {
    "preprocess": (), "ensemble": (), "crf": ("ensemble",), "metrics": (),
    "radiomics": (), "impute": (), "select": ("impute",), "fit": ("impute",),
    "eval": ("fit",), "compare": ("impute",),
}

# which stages need which input files
_VOLUME_STAGES = ("preprocess", "ensemble", "crf", "metrics", "radiomics")
_TABLE_STAGES = ("impute", "select", "fit", "eval", "compare")


class ConfigError(ValueError):
    """All validation failures, one per line."""


@dataclass
class ManifestRow:
    patient_id: str
    ct_path: str
    pet_path: str
    probmap_paths: list[str]
    truth_mask_path: str | None
    center_id: str


@dataclass
class PipelineConfig:
    seed: int
    output_dir: str
    inputs: dict
    stages: dict
    raw: dict = field(repr=False, default_factory=dict)

    def config_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_manifest_csv(path) -> list[ManifestRow]:
    """Cohort manifest: patient_id, ct_path, pet_path, probmap_paths
    (semicolon-joined), truth_mask_path (may be empty), center_id.
    Relative paths are resolved against the manifest's directory."""
    expected = ["patient_id", "ct_path", "pet_path", "probmap_paths",
                "truth_mask_path", "center_id"]
    base = Path(path).parent

    def resolve(p: str) -> str:
        return p if Path(p).is_absolute() else str(base / p)

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != expected:
            raise ValueError(f"manifest header {header} != {expected}")
        rows = []
        for rec in reader:
            if not rec:
                continue
            rows.append(ManifestRow(
                patient_id=rec[0], ct_path=resolve(rec[1]),
                pet_path=resolve(rec[2]),
                probmap_paths=[resolve(p) for p in rec[3].split(";") if p],
                truth_mask_path=resolve(rec[4]) if rec[4] else None,
                center_id=rec[5]))
    ids = [r.patient_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids in manifest")
    n_maps = {len(r.probmap_paths) for r in rows}
    if len(n_maps) > 1:
        raise ValueError(f"inconsistent probmap counts across patients: {sorted(n_maps)}")
    return rows


def leave_one_center_out_splits(rows: list[ManifestRow]) -> list[tuple[list[str], list[str]]]:
    """One (train ids, test ids) split per center, centers sorted by name."""
    centers: dict[str, list[str]] = {}
    for r in rows:
        centers.setdefault(r.center_id, []).append(r.patient_id)
    if len(centers) < 2:
        raise ValueError(f"leave-one-center-out needs >= 2 centers, "
                         f"got {len(centers)}")
    splits = []
    for center in sorted(centers):
        test = centers[center]
        train = [r.patient_id for r in rows if r.center_id != center]
        splits.append((train, test))
    return splits


def _validate(cfg: dict, strict: bool) -> list[str]:
    errors = []

    def unknown(keys, allowed, where):
        extra = sorted(set(keys) - allowed)
        if extra:
            msg = f"unknown key(s) in {where}: {extra}"
            if strict:
                errors.append(msg)
            else:
                warnings.warn(msg)

    unknown(cfg.keys(), _TOP_KEYS, "config")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        errors.append(f"schema_version must be {SCHEMA_VERSION}, "
                      f"got {cfg.get('schema_version')!r}")
    if not isinstance(cfg.get("seed"), int):
        errors.append("seed must be set (integer)")
    if not isinstance(cfg.get("output_dir"), str) or not cfg.get("output_dir"):
        errors.append("output_dir must be a non-empty string")

    inputs = cfg.get("inputs", {})
    if not isinstance(inputs, dict):
        errors.append("inputs must be an object")
        inputs = {}
    unknown(inputs.keys(), _INPUT_KEYS, "inputs")

    stages = cfg.get("stages", {})
    if not isinstance(stages, dict) or not stages:
        errors.append("stages must be a non-empty object")
        stages = {}
    unknown(stages.keys(), set(CANONICAL_STAGES), "stages")
    for name, params in stages.items():
        if name not in _STAGE_DEFAULTS:
            continue
        if not isinstance(params, dict):
            errors.append(f"stage {name!r} parameters must be an object")
            continue
        unknown(params.keys(), set(_STAGE_DEFAULTS[name]), f"stage {name!r}")

    configured = [s for s in stages if s in _STAGE_DEFAULTS]
    for name in configured:
        missing = [d for d in _STAGE_DEPS[name] if d not in configured]
        if missing:
            errors.append(f"stage {name!r} requires stage(s) {missing}")

    needs_manifest = any(s in _VOLUME_STAGES for s in configured)
    needs_clinical = any(s in _TABLE_STAGES for s in configured)
    if needs_manifest and not inputs.get("manifest_csv"):
        errors.append("volume stages configured but inputs.manifest_csv missing")
    if needs_clinical and not inputs.get("clinical_csv"):
        errors.append("table stages configured but inputs.clinical_csv missing")

    for key in ("manifest_csv", "clinical_csv", "deep_features_csv", "boxes_csv"):
        p = inputs.get(key)
        if p is not None and not Path(p).exists():
            errors.append(f"inputs.{key}: file not found: {p}")

    # every path a manifest row references must exist before anything runs
    mpath = inputs.get("manifest_csv")
    if mpath and Path(mpath).exists():
        try:
            rows = load_manifest_csv(mpath)
        except ValueError as exc:
            errors.append(f"manifest: {exc}")
            rows = []
        for row in rows:
            refs = [row.ct_path, row.pet_path, *row.probmap_paths]
            if row.truth_mask_path:
                refs.append(row.truth_mask_path)
            for ref in refs:
                if not Path(ref).exists():
                    errors.append(f"manifest {row.patient_id}: "
                                  f"file not found: {ref}")

    fit_params = stages.get("fit")
    if isinstance(fit_params, dict):
        for m in fit_params.get("models", _STAGE_DEFAULTS["fit"]["models"]):
            if m not in _MODEL_NAMES:
                errors.append(f"unknown model {m!r} in stage 'fit'")
    cmp_params = stages.get("compare")
    if isinstance(cmp_params, dict):
        models = cmp_params.get("models", _STAGE_DEFAULTS["compare"]["models"])
        if len(models) < 2:
            errors.append("stage 'compare' needs at least two models")
        for m in models:
            if m not in _MODEL_NAMES:
                errors.append(f"unknown model {m!r} in stage 'compare'")
    return errors


def load_config(source, strict: bool = True) -> PipelineConfig:
    """Parse and validate a pipeline config from a JSON file path or an
    already-parsed dict. All failures are reported together."""
    if isinstance(source, (str, Path)):
        raw = json.loads(Path(source).read_text())
    else:
        raw = source
    errors = _validate(raw, strict)
    if errors:
        raise ConfigError("\n".join(errors))
    stages = {}
    for name in CANONICAL_STAGES:
        if name in raw["stages"]:
            params = dict(_STAGE_DEFAULTS[name])
            params.update(raw["stages"][name])
            stages[name] = params
    return PipelineConfig(seed=raw["seed"], output_dir=raw["output_dir"],
                          inputs=dict(raw.get("inputs", {})), stages=stages,
                          raw=raw)


class _Run:
    """Mutable state threaded through the stages of one pipeline run."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.output_dir)
        self.rows: list[ManifestRow] = []
        self.store: dict[str, dict] = {}   # pid -> named in-memory artifacts
        self.tables: dict[str, tabular.FeatureTable] = {}
        self.clinical: tabular.ClinicalData | None = None
        self.models: dict = {}
        self.scaler: tuple | None = None
        self.fit_data: SurvivalDataset | None = None
        self.report: dict = {"stages": {}}

    def patient_dir(self, pid: str) -> Path:
        d = self.out / "patients" / pid
        d.mkdir(parents=True, exist_ok=True)
        return d

    def record_stage(self, stage: str, ok: list[str], failed: dict,
                     summary: dict | None = None):
        entry = {"succeeded": sorted(ok), "failed": dict(sorted(failed.items()))}
        if summary:
            entry["summary"] = summary
        self.report["stages"][stage] = entry


def _per_patient(run: _Run, stage: str, rows, fn, summary_fn=None):
    """Run fn per patient, record successes/failures, and return the
    surviving rows plus fn's results keyed by patient id."""
    ok, failed = [], {}
    results = {}
    for row in rows:
        try:
            results[row.patient_id] = fn(row)
            ok.append(row.patient_id)
        except Exception as exc:
            failed[row.patient_id] = f"{type(exc).__name__}: {exc}"
    summary = summary_fn(results) if summary_fn else None
    run.record_stage(stage, ok, failed, summary)
    keep = set(ok)
    return [r for r in rows if r.patient_id in keep], results


def _get_ct_pet(run: _Run, row: ManifestRow):
    entry = run.store.get(row.patient_id, {})
    if "pre_ct" in entry:
        return entry["pre_ct"], entry["pre_pet"]
    return load_volume(row.ct_path), load_volume(row.pet_path)


def _stage_preprocess(run: _Run, rows, params):
    boxes = {}
    if run.config.inputs.get("boxes_csv"):
        boxes = load_boxes_csv(run.config.inputs["boxes_csv"])

    def work(row: ManifestRow):
        ct = load_volume(row.ct_path)
        pet = load_volume(row.pet_path)
        if boxes:
            box = boxes[row.patient_id]
            ct = crop_to_box(ct, box)
            pet = crop_to_box(pet, box)
        if params["target_spacing"] is not None:
            target = tuple(params["target_spacing"])
            ct = resample_trilinear(ct, target)
            pet = resample_trilinear(pet, target)
        if params["ct_clip"] is not None:
            ct = clip_intensities(ct, *params["ct_clip"])
        if params["pet_clip"] is not None:
            pet = clip_intensities(pet, *params["pet_clip"],
                                   prescale=params["pet_prescale"])
        if params["normalize"]:
            ct = zscore_normalize(ct)
            pet = zscore_normalize(pet)
        pdir = run.patient_dir(row.patient_id)
        save_volume(ct, pdir / "pre_ct.json")
        save_volume(pet, pdir / "pre_pet.json")
        run.store.setdefault(row.patient_id, {}).update(pre_ct=ct, pre_pet=pet)

    kept, _ = _per_patient(run, "preprocess", rows, work)
    return kept


def _stage_ensemble(run: _Run, rows, params):
    def work(row: ManifestRow):
        maps = [probmap_from_volume(load_volume(p)) for p in row.probmap_paths]
        mean = ensemble_mean(maps)
        save_volume(mean, run.patient_dir(row.patient_id) / "ensemble.json")
        run.store.setdefault(row.patient_id, {})["ensemble"] = mean

    kept, _ = _per_patient(run, "ensemble", rows, work)
    return kept


def _stage_crf(run: _Run, rows, params):
    crf_params = crf_mod.CrfParams(
        w_appearance=params["w_appearance"],
        w_smoothness=params["w_smoothness"],
        theta_alpha=params["theta_alpha"], theta_beta=params["theta_beta"],
        theta_gamma=params["theta_gamma"], iterations=params["iterations"],
        neighborhood_radius=params["neighborhood_radius"])
    threshold = params["threshold"]

    def work(row: ManifestRow):
        entry = run.store[row.patient_id]
        pmap = entry["ensemble"]
        ct, pet = _get_ct_pet(run, row)
        initial = threshold_map(pmap, threshold)
        mask, marginal = crf_mod.refine_mask(pmap, ct, pet, crf_params,
                                             threshold)
        pdir = run.patient_dir(row.patient_id)
        save_volume(initial, pdir / "initial_mask.json")
        save_volume(mask, pdir / "refined_mask.json")
        save_volume(marginal, pdir / "refined_prob.json")
        entry.update(initial_mask=initial, refined_mask=mask)

    kept, _ = _per_patient(run, "crf", rows, work)
    return kept


def _prediction_mask(run: _Run, row: ManifestRow) -> Mask3D:
    """Best available predicted mask: refined, else thresholded ensemble,
    else the first raw probability map thresholded at 0.5."""
    entry = run.store.get(row.patient_id, {})
    if "refined_mask" in entry:
        return entry["refined_mask"]
    if "ensemble" in entry:
        return threshold_map(entry["ensemble"], 0.5)
    pmap = probmap_from_volume(load_volume(row.probmap_paths[0]))
    return threshold_map(pmap, 0.5)


def _seg_scores(pred: Mask3D, truth: Mask3D) -> SegScore:
    return SegScore(dsc=dice_similarity(pred, truth),
                    avg_hd=average_hd(pred, truth),
                    hd95=hd95(pred, truth))


def _stage_metrics(run: _Run, rows, params):
    def work(row: ManifestRow):
        if not row.truth_mask_path:
            raise ValueError("no truth mask in manifest")
        truth = mask_from_volume(load_volume(row.truth_mask_path))
        pred = _prediction_mask(run, row)
        scores = {"refined": _seg_scores(pred, truth)}
        entry = run.store.get(row.patient_id, {})
        if "initial_mask" in entry:
            scores["initial"] = _seg_scores(entry["initial_mask"], truth)
        return scores

    def summary(results):
        out = {}
        for kind in ("refined", "initial"):
            scored = [s[kind] for s in results.values() if kind in s]
            if scored:
                out[f"mean_dsc_{kind}"] = float(
                    np.mean([s.dsc for s in scored]))
                out[f"mean_hd95_{kind}"] = float(
                    np.mean([s.hd95 for s in scored]))
        out["n_scored"] = len(results)
        return out

    kept, results = _per_patient(run, "metrics", rows, work, summary)
    with open(run.out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["PatientID", "dsc", "avg_hd", "hd95",
                         "dsc_initial", "avg_hd_initial", "hd95_initial"])
        for row in kept:
            scores = results[row.patient_id]
            s = scores["refined"]
            rec = [row.patient_id, repr(s.dsc), repr(s.avg_hd), repr(s.hd95)]
            if "initial" in scores:
                si = scores["initial"]
                rec += [repr(si.dsc), repr(si.avg_hd), repr(si.hd95)]
            else:
                rec += ["", "", ""]
            writer.writerow(rec)
    return kept


def _stage_radiomics(run: _Run, rows, params):
    source = params["mask_source"]
    if source is None:
        source = "refined" if "crf" in run.config.stages else "truth"
    if source not in ("refined", "truth"):
        raise ConfigError(f"radiomics mask_source must be refined/truth, "
                          f"got {source!r}")
    config = RadiomicsConfig(bins=params["bins"],
                             modalities=tuple(params["modalities"]))

    def work(row: ManifestRow):
        if source == "refined":
            mask = run.store[row.patient_id]["refined_mask"]
        else:
            if not row.truth_mask_path:
                raise ValueError("no truth mask in manifest")
            mask = mask_from_volume(load_volume(row.truth_mask_path))
        ct, pet = _get_ct_pet(run, row)
        return extract_all(ct, pet, mask, config)

    kept, results = _per_patient(run, "radiomics", rows, work)
    if kept:
        names = results[kept[0].patient_id].names
        matrix = np.array([results[r.patient_id].values for r in kept])
        table = tabular.FeatureTable.from_matrix(
            [r.patient_id for r in kept], names, matrix)
        run.tables["radiomics"] = table
        tabular.save_table_csv(table, run.out / "radiomics.csv")
    return kept


def _load_clinical(run: _Run) -> tabular.ClinicalData:
    if run.clinical is None:
        run.clinical = tabular.load_clinical_csv(
            run.config.inputs["clinical_csv"])
    return run.clinical


def _stage_impute(run: _Run, params):
    clinical = _load_clinical(run)
    encoded = tabular.encode_dummies(clinical.table)
    parts = [encoded]
    ids = list(clinical.table.row_ids)
    if "radiomics" in run.tables:
        ids = [i for i in ids if i in set(run.tables["radiomics"].row_ids)]
    if run.config.inputs.get("deep_features_csv"):
        deep = tabular.load_features_csv(run.config.inputs["deep_features_csv"])
        run.tables["deep"] = deep
        ids = [i for i in ids if i in set(deep.row_ids)]

    id_set = set(ids)
    keep = np.array([rid in id_set for rid in encoded.row_ids])
    parts[0] = encoded.subset_rows(keep)
    for key in ("radiomics", "deep"):
        if key in run.tables:
            t = run.tables[key]
            parts.append(t.subset_rows(
                np.array([rid in id_set for rid in t.row_ids])))
    joined = tabular.join_tables(parts)
    completed = tabular.iterative_impute(joined, rounds=params["rounds"],
                                         ridge=params["ridge"])
    run.tables["imputed"] = completed
    tabular.save_table_csv(completed, run.out / "features_imputed.csv")
    run.record_stage("impute", list(completed.row_ids), {},
                     {"n_rows": len(completed.row_ids),
                      "n_features": len(completed.names)})


def _survival_for_ids(run: _Run, ids: list[str]):
    clinical = _load_clinical(run)
    lookup = {rid: i for i, rid in enumerate(clinical.table.row_ids)}
    idx = [lookup[rid] for rid in ids]
    return clinical.time[idx], clinical.event[idx]


def _stage_select(run: _Run, params):
    table = run.tables["imputed"]
    filtered, spearman_report = tabular.spearman_filter(
        table, threshold=params["spearman_threshold"])
    time, event = _survival_for_ids(run, filtered.row_ids)
    y, row_mask = tabular.selection_response(time, event,
                                             mode=params["response"])
    X = filtered.to_matrix()[row_mask]
    kept_idx, lasso_report = tabular.lasso_select(
        X, y, feature_names=filtered.names, folds=params["folds"],
        seed=derive_seed(run.config.seed, "select"))
    kept_names = [filtered.names[j] for j in kept_idx]
    if not kept_names:
        raise RuntimeError("selection kept no features")
    selected = filtered.select_columns(kept_names)
    run.tables["selected"] = selected
    tabular.save_table_csv(selected, run.out / "features_selected.csv")
    report = {
        "spearman": spearman_report.to_dict(),
        "lasso": lasso_report.to_dict(),
        "kept": kept_names,
        "response": params["response"],
    }
    (run.out / "selection_report.json").write_text(
        json.dumps(report, sort_keys=True, indent=1))
    run.record_stage("select", list(selected.row_ids), {},
                     {"n_before": len(table.names),
                      "n_after_spearman": len(filtered.names),
                      "n_after_lasso": len(kept_names)})


def _fit_table(run: _Run) -> tabular.FeatureTable:
    if "selected" in run.tables and run.tables["selected"].names:
        return run.tables["selected"]
    return run.tables["imputed"]


def _standardized_dataset(run: _Run) -> SurvivalDataset:
    table = _fit_table(run)
    X = table.to_matrix()
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    keep = sd > 0
    if not keep.all():
        dropped = [table.names[j] for j in np.flatnonzero(~keep)]
        warnings.warn(f"dropping zero-variance feature(s) for fitting: {dropped}")
    Xs = (X[:, keep] - mu[keep]) / sd[keep]
    names = [n for n, k in zip(table.names, keep) if k]
    run.scaler = (names, mu[keep], sd[keep])
    time, event = _survival_for_ids(run, table.row_ids)
    return SurvivalDataset(Xs, time, event, names)


def _fit_one(run: _Run, name: str, data: SurvivalDataset, params):
    if name == "coxph":
        return fit_coxph(data, ridge=params["cox_ridge"])
    if name == "rsf":
        return fit_rsf(data, n_trees=params["rsf_trees"],
                       mtry=params["rsf_mtry"],
                       min_leaf=params["rsf_min_leaf"],
                       seed=derive_seed(run.config.seed, "fit", "rsf"))
    if name == "mlpcox":
        return fit_mlp_cox(data, hidden=params["mlp_hidden"],
                           dropout=params["mlp_dropout"],
                           l2=params["mlp_l2"], epochs=params["mlp_epochs"],
                           lr=params["mlp_lr"],
                           momentum=params["mlp_momentum"],
                           seed=derive_seed(run.config.seed, "fit", "mlp"))
    raise ValueError(f"unknown model {name!r}")


_RISK_FNS = {"coxph": cox_risk, "rsf": rsf_risk, "mlpcox": mlp_risk}


def _fit_score_split(run: _Run, name: str, data: SurvivalDataset,
                     train_idx, test_idx, fit_params) -> float:
    """Fit on the training rows, score C-index on the test rows.

    Columns constant within the training split (e.g. a center indicator
    when that center is entirely held out) are dropped from both sides.
    """
    train = data.subset(train_idx)
    keep = train.X.std(axis=0) > 0
    if not keep.any():
        raise ValueError("all features constant in training split")
    names = [n for n, k in zip(data.feature_names, keep) if k]
    train = SurvivalDataset(train.X[:, keep], train.time, train.event, names)
    test = data.subset(test_idx)
    model = _fit_one(run, name, train, fit_params)
    risk = _RISK_FNS[name](model, test.X[:, keep])
    return float(concordance_index(risk, test.time, test.event))


def _stage_fit(run: _Run, params):
    data = _standardized_dataset(run)
    models_dir = run.out / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    names, mu, sd = run.scaler
    (models_dir / "scaler.json").write_text(json.dumps(
        {"feature_names": names, "mean": mu.tolist(), "std": sd.tolist()},
        sort_keys=True, indent=1))
    summary = {}
    for name in params["models"]:
        model = _fit_one(run, name, data, params)
        save_model(model, models_dir / f"{name}.json")
        run.models[name] = model
        if name == "coxph":
            summary[name] = {"n_iter": model.n_iter,
                             "grad_norm": model.grad_norm}
        else:
            summary[name] = {"fitted": True}
    run.record_stage("fit", list(_fit_table(run).row_ids), {}, summary)
    run.fit_data = data  # reused by eval/compare


def _stage_eval(run: _Run, params):
    data = run.fit_data
    table = _fit_table(run)
    summary = {}
    for name, model in run.models.items():
        risk = _RISK_FNS[name](model, data.X)
        cindex = concordance_index(risk, data.time, data.event)
        summary[name] = {"c_index": float(cindex)}
        with open(run.out / f"eval_{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["PatientID", "risk"])
            for rid, r in zip(table.row_ids, risk):
                writer.writerow([rid, repr(float(r))])
    if params["loco"]:
        summary["loco"] = _loco_eval(run, params)
    run.record_stage("eval", list(table.row_ids), {}, summary)


def _loco_eval(run: _Run, params) -> dict:
    data = run.fit_data
    table = _fit_table(run)
    by_center = {}
    centers = {r.patient_id: r.center_id for r in run.rows} if run.rows else {}
    if not centers:
        clinical = _load_clinical(run)
        centers = dict(zip(clinical.table.row_ids, clinical.centers))
    ids = list(table.row_ids)
    fit_params = run.config.stages.get("fit", dict(_STAGE_DEFAULTS["fit"]))
    out = {}
    for center in sorted({centers[i] for i in ids}):
        test = np.array([centers[i] == center for i in ids])
        if test.all() or not test.any():
            continue
        entry = {}
        for name in run.models:
            try:
                entry[name] = _fit_score_split(run, name, data, ~test, test,
                                               fit_params)
            except Exception as exc:
                entry[name] = f"error: {exc}"
        out[center] = entry
    return out


def _stage_compare(run: _Run, params):
    data = run.fit_data
    if data is None:
        data = _standardized_dataset(run)
        run.fit_data = data
    fit_params = run.config.stages.get("fit", dict(_STAGE_DEFAULTS["fit"]))
    k = params["folds"]
    splits = kfold_cv(data, k=k, stratify_by_event=True,
                      seed=derive_seed(run.config.seed, "compare"))
    fold_scores: dict[str, list[float]] = {}
    for name in params["models"]:
        fold_scores[name] = [
            _fit_score_split(run, name, data, train_idx, test_idx, fit_params)
            for train_idx, test_idx in splits]

    n_test = max(1, round(data.n / k))
    n_train = data.n - n_test
    pairwise = {}
    models = list(params["models"])
    for i in range(len(models)):
        for j in range(i + 1, len(models)):
            a, b = models[i], models[j]
            t, p = corrected_paired_ttest(fold_scores[a], fold_scores[b],
                                          n_train=n_train, n_test=n_test)
            pairwise[f"{a}_vs_{b}"] = {
                "t": t if np.isfinite(t) else repr(t), "p": p}
    report = {"folds": k, "fold_scores": fold_scores, "pairwise": pairwise,
              "n_train": n_train, "n_test": n_test}
    (run.out / "compare.json").write_text(
        json.dumps(report, sort_keys=True, indent=1))
    run.record_stage("compare", list(_fit_table(run).row_ids), {}, report)


def _hash_artifacts(out_dir: Path) -> dict[str, str]:
    hashes = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "report.json":
            hashes[str(path.relative_to(out_dir))] = hashlib.sha256(
                path.read_bytes()).hexdigest()
    return hashes


def _transitive_deps(stage: str) -> set[str]:
    out: set[str] = set()
    frontier = list(_STAGE_DEPS[stage])
    while frontier:
        dep = frontier.pop()
        if dep not in out:
            out.add(dep)
            frontier.extend(_STAGE_DEPS[dep])
    return out


def run_pipeline(config: PipelineConfig) -> dict:
    """Execute the configured stages and write out/report.json.

    Per-patient failures in volume stages are recorded and skipped
    downstream; a table-stage failure marks that stage failed and skips
    the stages that depend on it (stages without a failed dependency
    still run, e.g. fit falls back to the imputed table if select
    failed). The returned report includes artifact hashes and a total
    failure count (nonzero means the run had problems).
    """
    run = _Run(config)
    run.out.mkdir(parents=True, exist_ok=True)

    rows: list[ManifestRow] = []
    if config.inputs.get("manifest_csv"):
        rows = load_manifest_csv(config.inputs["manifest_csv"])
    run.rows = rows
    manifest_size = len(rows)

    volume_stage_fns = {"preprocess": _stage_preprocess,
                        "ensemble": _stage_ensemble, "crf": _stage_crf,
                        "metrics": _stage_metrics,
                        "radiomics": _stage_radiomics}
    table_stage_fns = {"impute": _stage_impute, "select": _stage_select,
                       "fit": _stage_fit, "eval": _stage_eval,
                       "compare": _stage_compare}

    active = rows
    failed_tables: set[str] = set()
    for stage in CANONICAL_STAGES:
        if stage not in config.stages:
            continue
        params = config.stages[stage]
        if stage in volume_stage_fns:
            active = volume_stage_fns[stage](run, active, params)
        else:
            blocked = sorted(_transitive_deps(stage) & failed_tables)
            if blocked:
                run.record_stage(stage, [],
                                 {"_stage": "skipped: failed dependency "
                                            f"{', '.join(blocked)}"})
                failed_tables.add(stage)
                continue
            try:
                table_stage_fns[stage](run, params)
            except Exception as exc:
                run.record_stage(stage, [],
                                 {"_stage": f"{type(exc).__name__}: {exc}"})
                failed_tables.add(stage)

    failures = sum(len(s["failed"]) for s in run.report["stages"].values())
    report = {
        "schema_version": SCHEMA_VERSION,
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "manifest_size": manifest_size,
        "stages": run.report["stages"],
        "failures_total": failures,
        "artifacts": _hash_artifacts(run.out),
    }
    (run.out / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=1))
    return report
