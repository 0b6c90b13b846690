"""Seeded desk-scale test data: sphere phantoms with noisy probability
maps, and exponential-hazard survival cohorts with known coefficients.

Every generated intensity is rounded through float32 before use so that
volumes survive save/load in either format bit for bit. Ground-truth
generating parameters are written next to the cohort for later checks.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import derive_rng
from .survival.data import SurvivalDataset
from .volume import Mask3D, ProbMap3D, Volume3D, save_volume

__all__ = ["PhantomSpec", "CohortSpec", "Phantom", "make_phantom",
           "make_survival_data", "synth_cohort", "DEFAULT_CENTERS"]

DEFAULT_CENTERS = ("CHGJ", "CHMR", "CHUS", "CHUP", "CHUM")


def _f32(a: np.ndarray) -> np.ndarray:
    """Round to float32-representable values, keeping float64 storage."""
    return a.astype(np.float32).astype(np.float64)


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (16, 16, 16)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    radius_mm: tuple[float, float] = (6.0, 12.0)
    contrast: float = 1.0
    noise_image: float = 0.05
    noise_prob: float = 0.3
    n_probmaps: int = 3

    def __post_init__(self):
        if self.n_probmaps < 1:
            raise ValueError("need at least one probability map")
        if self.radius_mm[0] > self.radius_mm[1]:
            raise ValueError("radius range is inverted")


@dataclass
class Phantom:
    ct: Volume3D
    pet: Volume3D
    probmaps: list[ProbMap3D]
    truth: Mask3D
    center_mm: tuple[float, float, float]
    radius_mm: float


def make_phantom(spec: PhantomSpec, rng: np.random.Generator) -> Phantom:
    """One noisy sphere: binary truth from voxel-center rasterization,
    CT/PET with in-sphere contrast, probability maps as truth plus noise."""
    dims = spec.dims
    spacing = np.asarray(spec.spacing, dtype=np.float64)
    extent = np.asarray(dims) * spacing
    radius = float(rng.uniform(*spec.radius_mm))
    # keep the sphere inside the grid
    lo = np.minimum(radius + spacing, extent / 2.0)
    center = rng.uniform(lo, extent - lo)

    idx = np.indices(dims, dtype=np.float64)
    coords = (idx + 0.5) * spacing.reshape(3, 1, 1, 1)
    d2 = ((coords - center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0)
    inside = d2 <= radius ** 2
    truth = Mask3D(inside.astype(np.uint8), tuple(spec.spacing))

    def image(contrast_scale):
        img = spec.contrast * contrast_scale * inside.astype(np.float64)
        img += rng.normal(0.0, spec.noise_image, size=dims)
        return Volume3D(_f32(img), tuple(spec.spacing))

    ct = image(1.0)
    pet = image(2.0)
    probmaps = []
    for _ in range(spec.n_probmaps):
        p = inside.astype(np.float64)
        if spec.noise_prob > 0:
            p = p + rng.normal(0.0, spec.noise_prob, size=dims)
        probmaps.append(ProbMap3D(_f32(np.clip(p, 0.0, 1.0)),
                                  tuple(spec.spacing)))
    return Phantom(ct=ct, pet=pet, probmaps=probmaps, truth=truth,
                   center_mm=tuple(float(c) for c in center),
                   radius_mm=radius)


def make_survival_data(n: int, p: int, beta, seed: int = 0,
                       baseline_hazard: float = 0.002,
                       censor_scale: float = 1500.0) -> SurvivalDataset:
    """Exponential survival times with log hazard ratios ``beta``.

    Covariates are independent standard normals; censoring times are
    exponential with the given scale, independent of everything else.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.size != p:
        raise ValueError(f"beta has {beta.size} entries for p={p}")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    eta = X @ beta
    t_event = rng.exponential(1.0, size=n) / (baseline_hazard * np.exp(eta))
    t_censor = rng.exponential(censor_scale, size=n)
    time = np.minimum(t_event, t_censor)
    event = (t_event <= t_censor).astype(np.int64)
    time = np.maximum(time, 1e-3)  # keep times strictly positive
    return SurvivalDataset(X=X, time=time, event=event)


@dataclass
class CohortSpec:
    n_patients: int = 15
    phantom: PhantomSpec = None
    centers: tuple[str, ...] = DEFAULT_CENTERS
    n_deep_features: int = 8
    hazard_beta_radius: float = 1.2
    baseline_hazard: float = 0.002
    censor_scale_days: float = 1500.0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("cohort must have at least one patient")
        if not self.centers:
            raise ValueError("need at least one center")
        if self.phantom is None:
            self.phantom = PhantomSpec()


_CATEGORIES = {
    "Gender": ("M", "F"),
    "T": ("T1", "T2", "T3", "T4"),
    "N": ("N0", "N1", "N2"),
    "M": ("M0", "M1"),
    "TNMgroup": ("I", "II", "III", "IV"),
    "TNMedition": ("7", "8"),
    "Tobacco": ("no", "yes"),
    "Alcohol": ("no", "yes"),
    "Performance": ("0", "1", "2"),
    "HPV": ("negative", "positive"),
    "Chemotherapy": ("no", "yes"),
}
_MISSINGABLE = ("Tobacco", "Alcohol", "HPV")


def synth_cohort(spec: CohortSpec, out_dir, seed: int = 0) -> dict:
    """Write a complete synthetic cohort under ``out_dir``.

    Produces per-patient CT/PET (nifti1), probability maps and truth
    masks (raw_json), a cohort manifest CSV, a clinical CSV, a
    deep-feature CSV, and the generating parameters as JSON. Returns the
    paths. Deterministic in (spec, seed).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    patients_dir = out / "patients"
    patients_dir.mkdir(exist_ok=True)

    pids = [f"P{idx:03d}" for idx in range(spec.n_patients)]
    radii = np.zeros(spec.n_patients)
    manifest_rows = []
    truth_params = {"seed": seed, "patients": []}

    for idx, pid in enumerate(pids):
        rng = derive_rng(seed, "phantom", pid)
        phantom = make_phantom(spec.phantom, rng)
        radii[idx] = phantom.radius_mm
        pdir = patients_dir / pid
        pdir.mkdir(exist_ok=True)
        ct_path = pdir / "ct.nii.gz"
        pet_path = pdir / "pet.nii.gz"
        truth_path = pdir / "truth.json"
        save_volume(phantom.ct, ct_path)
        save_volume(phantom.pet, pet_path)
        save_volume(phantom.truth, truth_path)
        prob_paths = []
        for k, pmap in enumerate(phantom.probmaps):
            prob_path = pdir / f"prob_{k}.json"
            save_volume(pmap, prob_path)
            prob_paths.append(prob_path)
        center = spec.centers[idx % len(spec.centers)]
        # manifest paths are relative to the manifest file, so the
        # cohort directory stays relocatable
        rel = [p.relative_to(out).as_posix()
               for p in (ct_path, pet_path, *prob_paths, truth_path)]
        manifest_rows.append([pid, rel[0], rel[1], ";".join(rel[2:-1]),
                              rel[-1], center])
        truth_params["patients"].append({
            "patient_id": pid, "center": center,
            "sphere_center_mm": list(phantom.center_mm),
            "sphere_radius_mm": phantom.radius_mm,
        })

    manifest_csv = out / "manifest.csv"
    with open(manifest_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "ct_path", "pet_path",
                         "probmap_paths", "truth_mask_path", "center_id"])
        writer.writerows(manifest_rows)

    # survival outcomes driven by sphere size
    rng = derive_rng(seed, "survival")
    z_radius = (radii - radii.mean()) / (radii.std() if radii.std() > 0 else 1.0)
    eta = spec.hazard_beta_radius * z_radius
    t_event = rng.exponential(1.0, size=spec.n_patients) \
        / (spec.baseline_hazard * np.exp(eta))
    t_censor = rng.exponential(spec.censor_scale_days, size=spec.n_patients)
    pfs = np.maximum(np.minimum(t_event, t_censor), 1.0).round(1)
    progression = (t_event <= t_censor).astype(int)
    if progression.sum() == 0:
        progression[int(np.argmin(pfs))] = 1  # fitting needs one event

    clinical_csv = out / "clinical.csv"
    with open(clinical_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["PatientID", "CenterID", "Age", "Gender", "T", "N",
                         "M", "TNMgroup", "TNMedition", "Tobacco", "Alcohol",
                         "Performance", "HPV", "Chemotherapy",
                         "Progression", "PFS_days"])
        for idx, pid in enumerate(pids):
            crng = derive_rng(seed, "clinical", pid)
            row = [pid, spec.centers[idx % len(spec.centers)],
                   f"{crng.uniform(40.0, 80.0):.1f}"]
            for name, cats in _CATEGORIES.items():
                value = cats[int(crng.integers(len(cats)))]
                if name in _MISSINGABLE and crng.random() < 0.1:
                    value = ""
                row.append(value)
            row.extend([str(progression[idx]), repr(float(pfs[idx]))])
            writer.writerow(row)

    deep_csv = out / "deep_features.csv"
    with open(deep_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        names = [f"dl_{k:03d}" for k in range(spec.n_deep_features)]
        writer.writerow(["PatientID"] + names)
        for idx, pid in enumerate(pids):
            drng = derive_rng(seed, "deep", pid)
            vals = drng.standard_normal(spec.n_deep_features)
            vals[0] = radii[idx] + drng.normal(0.0, 0.5)  # one informative column
            writer.writerow([pid] + [repr(float(v)) for v in vals])

    truth_params["hazard_beta_radius"] = spec.hazard_beta_radius
    params_json = out / "truth_params.json"
    params_json.write_text(json.dumps(truth_params, indent=1, sort_keys=True))

    return {"manifest_csv": str(manifest_csv),
            "clinical_csv": str(clinical_csv),
            "deep_features_csv": str(deep_csv),
            "truth_params_json": str(params_json),
            "patients_dir": str(patients_dir)}
