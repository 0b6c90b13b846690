"""Command-line entry points.

One subcommand per pipeline stage for standalone use, plus ``synth`` to
generate a desk-scale cohort and ``run`` to execute a configured
pipeline end to end. Tabular outputs are CSV with header rows; reports
are JSON on stdout or disk. Exit code 0 means no failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import _accel, losses, tabular
from .crf import CrfParams, refine_mask
from .metrics import evaluate_batch
from .pipeline import ConfigError, load_config, run_pipeline
from .radiomics import RadiomicsConfig, extract_all
from .seeding import derive_seed
from .survival import (SurvivalDataset, concordance_index,
                       corrected_paired_ttest, cox_risk, fit_coxph,
                       fit_mlp_cox, fit_rsf, load_model, mlp_risk, rsf_risk,
                       save_model)
from .synth import CohortSpec, PhantomSpec, synth_cohort
from .volume import (clip_intensities, ensemble_mean, load_volume,
                     mask_from_volume, probmap_from_volume,
                     resample_trilinear, save_volume, zscore_normalize)

THREADS_ENV = "SEGSURV_THREADS"


def _apply_threads(threads: int | None) -> None:
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else None
    if threads is not None and _accel.USE_NUMBA:
        import numba
        numba.set_num_threads(max(1, threads))


def _parse_triplet(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three values, got {text!r}")
    return tuple(parts)


def _parse_pair(text: str) -> tuple[float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two values, got {text!r}")
    return tuple(parts)


def _load_json_or_empty(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _cmd_preprocess(args) -> int:
    ct = load_volume(args.ct)
    pet = load_volume(args.pet)
    if args.target_spacing:
        ct = resample_trilinear(ct, args.target_spacing)
        pet = resample_trilinear(pet, args.target_spacing)
    if args.ct_clip:
        ct = clip_intensities(ct, *args.ct_clip)
    if args.pet_clip:
        pet = clip_intensities(pet, *args.pet_clip, prescale=args.pet_prescale)
    if not args.no_normalize:
        ct = zscore_normalize(ct)
        pet = zscore_normalize(pet)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(ct, out / "pre_ct.json")
    save_volume(pet, out / "pre_pet.json")
    print(json.dumps({"ct": str(out / "pre_ct.json"),
                      "pet": str(out / "pre_pet.json")}))
    return 0


def _cmd_ensemble(args) -> int:
    maps = [probmap_from_volume(load_volume(p)) for p in args.probmaps]
    save_volume(ensemble_mean(maps), args.output)
    print(json.dumps({"ensemble": args.output, "n_members": len(maps)}))
    return 0


def _cmd_refine(args) -> int:
    params = CrfParams(**_load_json_or_empty(args.config))
    pmap = probmap_from_volume(load_volume(args.probmap))
    ct = load_volume(args.ct)
    pet = load_volume(args.pet)
    mask, marginal = refine_mask(pmap, ct, pet, params, args.threshold)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(mask, out / "refined_mask.json")
    save_volume(marginal, out / "refined_prob.json")
    print(json.dumps({"mask": str(out / "refined_mask.json"),
                      "marginal": str(out / "refined_prob.json"),
                      "foreground_voxels": int(mask.voxel_count())}))
    return 0


def _cmd_metrics(args) -> int:
    with open(args.pairs, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["patient_id", "pred_path", "truth_path"]:
            raise ValueError(f"pairs CSV header must be "
                             f"patient_id,pred_path,truth_path, got {header}")
        rows = [r for r in reader if r]
    pairs = []
    for _, pred_path, truth_path in rows:
        pairs.append((mask_from_volume(load_volume(pred_path)),
                      mask_from_volume(load_volume(truth_path))))
    scores, mean = evaluate_batch(pairs)
    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "dsc", "avg_hd", "hd95"])
        for (pid, _, _), s in zip(rows, scores):
            writer.writerow([pid, repr(s.dsc), repr(s.avg_hd), repr(s.hd95)])
        writer.writerow(["MEAN", repr(mean.dsc), repr(mean.avg_hd),
                         repr(mean.hd95)])
    print(json.dumps({"n_cases": len(scores), "mean_dsc": mean.dsc,
                      "mean_avg_hd": mean.avg_hd, "mean_hd95": mean.hd95}))
    return 0


def _cmd_radiomics(args) -> int:
    config = RadiomicsConfig(**_load_json_or_empty(args.config))
    ct = load_volume(args.ct)
    pet = load_volume(args.pet)
    mask = mask_from_volume(load_volume(args.mask))
    features = extract_all(ct, pet, mask, config)
    write_header = not (Path(args.output).exists() and args.append)
    mode = "a" if args.append else "w"
    with open(args.output, mode, newline="") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(["PatientID"] + features.names)
        writer.writerow([args.patient_id]
                        + [repr(float(v)) for v in features.values])
    print(json.dumps({"patient_id": args.patient_id,
                      "n_features": len(features)}))
    return 0


def _cmd_impute(args) -> int:
    clinical = tabular.load_clinical_csv(args.clinical)
    tables = [tabular.encode_dummies(clinical.table)]
    if args.deep:
        tables.append(tabular.load_features_csv(args.deep))
    if args.features:
        tables.append(tabular.load_features_csv(args.features))
    joined = tabular.join_tables(tables)
    completed = tabular.iterative_impute(joined, rounds=args.rounds,
                                         ridge=args.ridge)
    tabular.save_table_csv(completed, args.output)
    print(json.dumps({"output": args.output,
                      "n_rows": len(completed.row_ids),
                      "n_features": len(completed.names)}))
    return 0


def _cmd_select(args) -> int:
    table = tabular.load_features_csv(args.features)
    clinical = tabular.load_clinical_csv(args.clinical)
    lookup = {rid: i for i, rid in enumerate(clinical.table.row_ids)}
    idx = [lookup[rid] for rid in table.row_ids]
    time, event = clinical.time[idx], clinical.event[idx]

    filtered, spearman_report = tabular.spearman_filter(
        table, threshold=args.threshold)
    y, row_mask = tabular.selection_response(time, event, mode=args.response)
    kept_idx, lasso_report = tabular.lasso_select(
        filtered.to_matrix()[row_mask], y, feature_names=filtered.names,
        folds=args.folds, seed=derive_seed(args.seed, "select"))
    kept_names = [filtered.names[j] for j in kept_idx]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    tabular.save_table_csv(filtered.select_columns(kept_names),
                           out / "features_selected.csv")
    report = {"spearman": spearman_report.to_dict(),
              "lasso": lasso_report.to_dict(), "kept": kept_names,
              "response": args.response}
    (out / "selection_report.json").write_text(
        json.dumps(report, sort_keys=True, indent=1))
    print(json.dumps({"kept": kept_names}))
    return 0


def _survival_dataset(features_csv: str, clinical_csv: str) -> SurvivalDataset:
    table = tabular.load_features_csv(features_csv)
    clinical = tabular.load_clinical_csv(clinical_csv)
    lookup = {rid: i for i, rid in enumerate(clinical.table.row_ids)}
    idx = [lookup[rid] for rid in table.row_ids]
    return SurvivalDataset(table.to_matrix(), clinical.time[idx],
                           clinical.event[idx], table.names)


def _cmd_survival_fit(args) -> int:
    data = _survival_dataset(args.features, args.clinical)
    params = _load_json_or_empty(args.config)
    if args.model == "coxph":
        model = fit_coxph(data, ridge=params.get("ridge", 0.0))
    elif args.model == "rsf":
        model = fit_rsf(data, n_trees=params.get("n_trees", 100),
                        mtry=params.get("mtry"),
                        min_leaf=params.get("min_leaf", 3),
                        seed=args.seed)
    else:
        model = fit_mlp_cox(data, hidden=params.get("hidden", 32),
                            dropout=params.get("dropout", 0.2),
                            l2=params.get("l2", 1e-3),
                            epochs=params.get("epochs", 100),
                            lr=params.get("lr", 0.01),
                            momentum=params.get("momentum", 0.9),
                            seed=args.seed)
    save_model(model, args.output)
    print(json.dumps({"model": args.model, "output": args.output}))
    return 0


_RISK = {"coxph": cox_risk, "rsf": rsf_risk, "mlpcox": mlp_risk}


def _cmd_survival_eval(args) -> int:
    model = load_model(args.model)
    name = {"CoxModel": "coxph", "RsfModel": "rsf",
            "MlpSurvModel": "mlpcox"}[type(model).__name__]
    data = _survival_dataset(args.features, args.clinical)
    risk = _RISK[name](model, data.X)
    cindex = concordance_index(risk, data.time, data.event)
    table = tabular.load_features_csv(args.features)
    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["PatientID", "risk"])
        for rid, r in zip(table.row_ids, risk):
            writer.writerow([rid, repr(float(r))])
    print(json.dumps({"model": name, "c_index": cindex,
                      "risks": args.output}))
    return 0


def _read_scores_csv(path: str) -> list[float]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if "score" not in header:
            raise ValueError(f"{path}: fold score CSV needs a 'score' column")
        col = header.index("score")
        return [float(r[col]) for r in reader if r]


def _cmd_survival_compare(args) -> int:
    a = _read_scores_csv(args.scores_a)
    b = _read_scores_csv(args.scores_b)
    t, p = corrected_paired_ttest(a, b, n_train=args.n_train,
                                  n_test=args.n_test)
    print(json.dumps({"t": t if np.isfinite(t) else repr(t), "p": p,
                      "k": len(a)}))
    return 0


def _cmd_synth(args) -> int:
    phantom = PhantomSpec(dims=tuple(int(v) for v in args.dims),
                          spacing=args.spacing, noise_prob=args.noise_prob,
                          n_probmaps=args.probmaps)
    spec = CohortSpec(n_patients=args.patients, phantom=phantom)
    paths = synth_cohort(spec, args.output, seed=args.seed)
    print(json.dumps(paths, sort_keys=True))
    return 0


def _cmd_run(args) -> int:
    config = load_config(args.config, strict=not args.no_strict)
    if args.output:
        config.output_dir = args.output
    if args.seed is not None:
        config.seed = args.seed
    report = run_pipeline(config)
    print(json.dumps({"report": str(Path(config.output_dir) / "report.json"),
                      "failures_total": report["failures_total"]}))
    return 0 if report["failures_total"] == 0 else 1


def _cmd_loss_eval(args) -> int:
    y = load_volume(args.truth).data.ravel()
    p = load_volume(args.pred).data.ravel()
    params = losses.LossParams(gamma=args.gamma, smooth=args.smooth)
    out = {
        "dice": losses.dice_loss(y, p, params),
        "focal": losses.focal_loss(y, p, params),
        "log_cosh_dice_focal": losses.log_cosh_dice_focal(y, p, params),
    }
    print(json.dumps(out, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segsurv",
        description="Tumour segmentation post-processing, radiomics, and "
                    "survival modeling toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="resample/clip/normalize a CT+PET pair")
    p.add_argument("--ct", required=True)
    p.add_argument("--pet", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--target-spacing", type=_parse_triplet, default=None)
    p.add_argument("--ct-clip", type=_parse_pair, default=None)
    p.add_argument("--pet-clip", type=_parse_pair, default=None)
    p.add_argument("--pet-prescale", type=float, default=None)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(fn=_cmd_preprocess)

    p = sub.add_parser("ensemble", help="average probability maps")
    p.add_argument("--probmaps", nargs="+", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=_cmd_ensemble)

    p = sub.add_parser("refine", help="mean-field refinement of a probability map")
    p.add_argument("--probmap", required=True)
    p.add_argument("--ct", required=True)
    p.add_argument("--pet", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config", default=None, help="JSON file of CrfParams fields")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(fn=_cmd_refine)

    p = sub.add_parser("metrics", help="segmentation scores for mask pairs")
    p.add_argument("--pairs", required=True,
                   help="CSV: patient_id,pred_path,truth_path")
    p.add_argument("--output", required=True)
    p.set_defaults(fn=_cmd_metrics)

    p = sub.add_parser("radiomics", help="feature vector for one patient")
    p.add_argument("--ct", required=True)
    p.add_argument("--pet", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--patient-id", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config", default=None,
                   help="JSON file of RadiomicsConfig fields")
    p.add_argument("--append", action="store_true",
                   help="append a row instead of rewriting the file")
    p.set_defaults(fn=_cmd_radiomics)

    p = sub.add_parser("impute", help="encode and impute the feature table")
    p.add_argument("--clinical", required=True)
    p.add_argument("--deep", default=None)
    p.add_argument("--features", default=None,
                   help="extra numeric feature CSV (e.g. radiomics)")
    p.add_argument("--output", required=True)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--ridge", type=float, default=1e-3)
    p.set_defaults(fn=_cmd_impute)

    p = sub.add_parser("select", help="correlation filter + Lasso selection")
    p.add_argument("--features", required=True, help="imputed feature CSV")
    p.add_argument("--clinical", required=True)
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=0.80)
    p.add_argument("--response", default="log_time_events",
                   choices=["log_time_events", "martingale"])
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_select)

    p = sub.add_parser("survival", help="fit/eval/compare survival models")
    ssub = p.add_subparsers(dest="survival_command", required=True)

    pf = ssub.add_parser("fit")
    pf.add_argument("--model", required=True, choices=["coxph", "rsf", "mlpcox"])
    pf.add_argument("--features", required=True)
    pf.add_argument("--clinical", required=True)
    pf.add_argument("--output", required=True)
    pf.add_argument("--config", default=None, help="JSON hyperparameters")
    pf.add_argument("--seed", type=int, default=0)
    pf.set_defaults(fn=_cmd_survival_fit)

    pe = ssub.add_parser("eval")
    pe.add_argument("--model", required=True, help="model JSON path")
    pe.add_argument("--features", required=True)
    pe.add_argument("--clinical", required=True)
    pe.add_argument("--output", required=True, help="risks CSV path")
    pe.set_defaults(fn=_cmd_survival_eval)

    pc = ssub.add_parser("compare")
    pc.add_argument("--scores-a", required=True, help="fold scores CSV (score column)")
    pc.add_argument("--scores-b", required=True)
    pc.add_argument("--n-train", type=int, required=True)
    pc.add_argument("--n-test", type=int, required=True)
    pc.set_defaults(fn=_cmd_survival_compare)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patients", type=int, default=15)
    p.add_argument("--dims", nargs=3, type=int, default=[16, 16, 16])
    p.add_argument("--spacing", type=_parse_triplet, default=(2.0, 2.0, 2.0))
    p.add_argument("--probmaps", type=int, default=3)
    p.add_argument("--noise-prob", type=float, default=0.3)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("run", help="run a configured pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--output", default=None, help="override output_dir")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--no-strict", action="store_true",
                   help="warn on unknown config keys instead of failing")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("loss-eval", help="evaluate losses on stored volumes")
    p.add_argument("--truth", required=True, help="binary volume (raw_json/nifti)")
    p.add_argument("--pred", required=True, help="probability volume")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--smooth", type=float, default=1.0)
    p.set_defaults(fn=_cmd_loss_eval)

    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default ${THREADS_ENV})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args.threads)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
