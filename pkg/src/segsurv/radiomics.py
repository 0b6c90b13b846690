"""Intensity, shape, and texture features over a masked region.

The feature set is 14 values per modality: 5 intensity histogram
statistics, 3 shape descriptors, and 6 texture values (2 each from the
co-occurrence, run-length, and size-zone matrices). Texture features are
computed on equal-width discretized gray levels; intensity features on
the raw values. All three texture matrices aggregate the 13 unique 3D
directions (offsets modulo sign) by summing into one matrix before
normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .volume import Mask3D, Volume3D

__all__ = ["DiscretizedRoi", "FeatureVector", "RadiomicsConfig", "discretize",
           "intensity_features", "shape_features", "glcm_features",
           "glrlm_features", "glszm_features", "extract_all",
           "shannon_entropy", "DIRECTIONS_3D", "hand_examples"]

# The 26-neighborhood modulo sign: 13 unique direction offsets.
DIRECTIONS_3D = tuple(
    (dx, dy, dz)
    for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
    if (dx, dy, dz) > (0, 0, 0)
)
assert len(DIRECTIONS_3D) == 13


@dataclass
class FeatureVector:
    """Ordered (name, value) pairs with unique names and finite values."""

    items: list[tuple[str, float]]

    def __post_init__(self):
        names = [n for n, _ in self.items]
        if len(set(names)) != len(names):
            raise ValueError("duplicate feature names")
        for name, value in self.items:
            if not math.isfinite(value):
                raise ValueError(f"feature {name!r} is not finite: {value}")
        self.items = [(n, float(v)) for n, v in self.items]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.items]

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.items], dtype=np.float64)

    def __getitem__(self, name: str) -> float:
        for n, v in self.items:
            if n == name:
                return v
        raise KeyError(name)

    def __len__(self) -> int:
        return len(self.items)

    def prefixed(self, prefix: str) -> "FeatureVector":
        return FeatureVector([(prefix + n, v) for n, v in self.items])

    @staticmethod
    def concat(parts: list["FeatureVector"]) -> "FeatureVector":
        merged = []
        for part in parts:
            merged.extend(part.items)
        return FeatureVector(merged)


@dataclass
class DiscretizedRoi:
    """Gray levels in [1, levels] for the in-mask voxels, plus the dense
    level grid (0 outside the mask) the texture matrices are built from."""

    levels: int
    voxel_levels: np.ndarray
    voxel_coords: np.ndarray
    spacing: tuple[float, float, float]
    grid: np.ndarray

    def __post_init__(self):
        if self.voxel_levels.size == 0:
            raise ValueError("discretized ROI is empty")
        if self.voxel_levels.min() < 1 or self.voxel_levels.max() > self.levels:
            raise ValueError("voxel levels outside [1, levels]")


@dataclass
class RadiomicsConfig:
    bins: int = 32
    modalities: tuple[str, ...] = ("ct", "pet")

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        bad = set(self.modalities) - {"ct", "pet"}
        if bad or not self.modalities:
            raise ValueError(f"modalities must be drawn from ct/pet, got {self.modalities}")


def _roi_values(vol: Volume3D, mask: Mask3D) -> np.ndarray:
    if vol.dims != mask.dims:
        raise ValueError(f"volume dims {vol.dims} do not match mask dims {mask.dims}")
    if mask.voxel_count() == 0:
        raise ValueError("mask is empty")
    return vol.data[mask.data == 1]


def _bin_indices(values: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bins over [min, max]; the max value lands in the top bin.
    Returns 0-based bin indices."""
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.zeros(values.shape, dtype=np.int64)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def discretize(vol: Volume3D, mask: Mask3D, bins: int) -> DiscretizedRoi:
    """Equal-width discretization of the in-mask intensities into ``bins``
    gray levels (1-based). A constant ROI collapses to level 1."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    values = _roi_values(vol, mask)
    coords = np.argwhere(mask.data == 1)
    levels = _bin_indices(values, bins) + 1
    grid = np.zeros(mask.dims, dtype=np.int64)
    grid[mask.data == 1] = levels
    return DiscretizedRoi(levels=bins, voxel_levels=levels, voxel_coords=coords,
                          spacing=mask.spacing, grid=grid)


def shannon_entropy(values: np.ndarray, bins: int = 64) -> float:
    """Histogram entropy in bits over equal-width bins; 0 for constant input."""
    idx = _bin_indices(np.asarray(values, dtype=np.float64).ravel(), bins)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    p = counts[counts > 0] / idx.size
    return float(-(p * np.log2(p)).sum())


def intensity_features(vol: Volume3D, mask: Mask3D) -> FeatureVector:
    """First-order statistics of the raw in-mask intensities.

    Variance is the population variance. Skewness is the moment
    coefficient g1 and kurtosis is Fisher's excess; both are undefined on
    a constant ROI, which is an error here.
    """
    values = _roi_values(vol, mask)
    mean = float(values.mean())
    centered = values - mean
    m2 = float((centered ** 2).mean())
    if m2 == 0.0:
        raise ValueError("constant ROI: skewness and kurtosis are undefined "
                         "(zero variance)")
    m3 = float((centered ** 3).mean())
    m4 = float((centered ** 4).mean())
    return FeatureVector([
        ("mean", mean),
        ("variance", m2),
        ("skewness", m3 / m2 ** 1.5),
        ("kurtosis", m4 / m2 ** 2 - 3.0),
        ("entropy", shannon_entropy(values)),
    ])


def shape_features(mask: Mask3D) -> FeatureVector:
    """Volume, face-counted surface area, and sphericity of the mask.

    Surface area sums the areas of voxel faces adjoining background or
    the grid boundary, so it respects anisotropic spacing exactly.
    """
    n = mask.voxel_count()
    if n == 0:
        raise ValueError("mask is empty")
    sx, sy, sz = mask.spacing
    volume = n * sx * sy * sz

    m = mask.data.astype(bool)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    area = 0.0
    face_areas = (sy * sz, sx * sz, sx * sy)
    for axis, face in enumerate(face_areas):
        lo = np.roll(padded, 1, axis=axis)
        hi = np.roll(padded, -1, axis=axis)
        area += face * float((padded & ~lo).sum() + (padded & ~hi).sum())

    sphericity = math.pi ** (1.0 / 3.0) * (6.0 * volume) ** (2.0 / 3.0) / area
    return FeatureVector([
        ("volume_mm3", volume),
        ("surface_area_mm2", area),
        ("sphericity", sphericity),
    ])


def _offsets_array() -> np.ndarray:
    return np.array(DIRECTIONS_3D, dtype=np.int64)


def glcm_features(roi: DiscretizedRoi, backend: str | None = None) -> FeatureVector:
    """Contrast and joint entropy of the symmetrized co-occurrence matrix."""
    counts = kernels.glcm_accumulate(roi.grid, _offsets_array(), roi.levels,
                                     backend=backend)
    total = counts.sum()
    if total == 0:
        raise ValueError("no co-occurring voxel pairs in the ROI")
    p = counts / total
    i = np.arange(1, roi.levels + 1, dtype=np.float64)
    diff2 = (i[:, None] - i[None, :]) ** 2
    contrast = float((diff2 * p).sum())
    nz = p[p > 0]
    joint_entropy = float(-(nz * np.log2(nz)).sum())
    return FeatureVector([
        ("glcm_contrast", contrast),
        ("glcm_joint_entropy", joint_entropy),
    ])


def _run_lengths(grid: np.ndarray, directions=DIRECTIONS_3D) -> np.ndarray:
    """Lengths of all maximal same-level runs over the given directions."""
    dims = grid.shape
    lengths = []
    for d in directions:
        step = np.array(d, dtype=np.int64)
        starts = np.argwhere(grid > 0)
        prev = starts - step
        ok = np.all((prev >= 0) & (prev < dims), axis=1)
        has_prev = np.zeros(len(starts), dtype=bool)
        if ok.any():
            pv = prev[ok]
            has_prev[ok] = grid[pv[:, 0], pv[:, 1], pv[:, 2]] == \
                grid[starts[ok, 0], starts[ok, 1], starts[ok, 2]]
        for x, y, z in starts[~has_prev]:
            level = grid[x, y, z]
            length = 1
            cx, cy, cz = x + d[0], y + d[1], z + d[2]
            while (0 <= cx < dims[0] and 0 <= cy < dims[1]
                   and 0 <= cz < dims[2] and grid[cx, cy, cz] == level):
                length += 1
                cx, cy, cz = cx + d[0], cy + d[1], cz + d[2]
            lengths.append(length)
    return np.array(lengths, dtype=np.int64)


def glrlm_features(roi: DiscretizedRoi, directions=DIRECTIONS_3D) -> FeatureVector:
    """Short- and long-run emphasis over the aggregated run-length matrix.

    ``directions`` defaults to all 13; restricting it gives the
    per-direction matrices (useful for hand verification).
    """
    lengths = _run_lengths(roi.grid, directions).astype(np.float64)
    n_runs = lengths.size
    sre = float((1.0 / lengths ** 2).sum() / n_runs)
    lre = float((lengths ** 2).sum() / n_runs)
    return FeatureVector([
        ("glrlm_sre", sre),
        ("glrlm_lre", lre),
    ])


_CONN26 = np.ones((3, 3, 3), dtype=bool)


def zone_sizes(grid: np.ndarray) -> np.ndarray:
    """Sizes of the 26-connected equal-level zones of a level grid."""
    sizes = []
    for level in np.unique(grid[grid > 0]):
        labeled, n_zones = ndimage.label(grid == level, structure=_CONN26)
        if n_zones:
            sizes.extend(np.bincount(labeled.ravel())[1:].tolist())
    return np.array(sizes, dtype=np.int64)


def glszm_features(roi: DiscretizedRoi) -> FeatureVector:
    """Small-zone emphasis and zone-size nonuniformity over 26-connected
    equal-level zones."""
    sizes = zone_sizes(roi.grid).astype(np.float64)
    n_zones = sizes.size
    sze = float((1.0 / sizes ** 2).sum() / n_zones)
    size_counts = np.bincount(sizes.astype(np.int64))
    zsn = float((size_counts.astype(np.float64) ** 2).sum() / n_zones)
    return FeatureVector([
        ("glszm_sze", sze),
        ("glszm_zsn", zsn),
    ])


def _modality_features(vol: Volume3D, mask: Mask3D,
                       config: RadiomicsConfig) -> FeatureVector:
    roi = discretize(vol, mask, config.bins)
    return FeatureVector.concat([
        intensity_features(vol, mask),
        shape_features(mask),
        glcm_features(roi),
        glrlm_features(roi),
        glszm_features(roi),
    ])


def hand_examples() -> list[tuple[str, FeatureVector, dict[str, float]]]:
    """Closed-form worked cases for every feature family.

    Returns (label, computed vector, expected values) triples; the test
    suite replays them, and they double as reference derivations.
    """
    unit = (1.0, 1.0, 1.0)

    def full_mask(dims, spacing=unit):
        return Mask3D(np.ones(dims, dtype=np.uint8), spacing)

    out = []

    # two voxels at -1 and +1: mean 0, population variance 1, symmetric
    # so skewness 0, m4/m2^2 = 1 so excess kurtosis -2, two occupied
    # histogram bins of probability 1/2 each so entropy 1 bit
    two_point = Volume3D(np.array([-1.0, 1.0]).reshape(2, 1, 1), unit)
    out.append(("intensity two-point",
                intensity_features(two_point, full_mask((2, 1, 1))),
                {"mean": 0.0, "variance": 1.0, "skewness": 0.0,
                 "kurtosis": -2.0, "entropy": 1.0}))

    # one unit voxel: volume 1, six unit faces, sphericity of a cube
    out.append(("shape unit voxel", shape_features(full_mask((1, 1, 1))),
                {"volume_mm3": 1.0, "surface_area_mm2": 6.0,
                 "sphericity": math.pi ** (1 / 3) * 6.0 ** (2 / 3) / 6.0}))

    # single voxel at spacing (1,2,3): volume 6, faces 2*(2*3 + 1*3 + 1*2)
    out.append(("shape anisotropic voxel",
                shape_features(full_mask((1, 1, 1), (1.0, 2.0, 3.0))),
                {"volume_mm3": 6.0, "surface_area_mm2": 22.0,
                 "sphericity": math.pi ** (1 / 3) * 36.0 ** (2 / 3) / 22.0}))

    # two adjacent voxels at levels 1 and 2: the symmetrized matrix is
    # uniform over (1,2) and (2,1), contrast (2-1)^2, entropy 1 bit
    pair = discretize(Volume3D(np.array([1.0, 2.0]).reshape(2, 1, 1), unit),
                      full_mask((2, 1, 1)), bins=2)
    out.append(("glcm two-level pair", glcm_features(pair),
                {"glcm_contrast": 1.0, "glcm_joint_entropy": 1.0}))

    # constant 3x1x1 line along x only: one run of length 3
    line = discretize(Volume3D(np.zeros((3, 1, 1)), unit),
                      full_mask((3, 1, 1)), bins=4)
    out.append(("glrlm single run",
                glrlm_features(line, directions=((1, 0, 0),)),
                {"glrlm_sre": 1.0 / 9.0, "glrlm_lre": 9.0}))

    # constant 2x2x1 patch: one zone of size 4
    patch = discretize(Volume3D(np.zeros((2, 2, 1)), unit),
                       full_mask((2, 2, 1)), bins=4)
    out.append(("glszm single zone", glszm_features(patch),
                {"glszm_sze": 1.0 / 16.0, "glszm_zsn": 1.0}))

    return out


def extract_all(ct: Volume3D, pet: Volume3D, mask: Mask3D,
                config: RadiomicsConfig = RadiomicsConfig()) -> FeatureVector:
    """All 14 features per configured modality, names prefixed ct_/pet_.

    Failures are re-raised with the modality attached so a cohort run can
    point at the offending feature family.
    """
    if mask.voxel_count() == 0:
        raise ValueError("tumour mask is empty")
    volumes = {"ct": ct, "pet": pet}
    parts = []
    for modality in config.modalities:
        try:
            part = _modality_features(volumes[modality], mask, config)
        except ValueError as exc:
            raise ValueError(f"{modality}: {exc}") from exc
        parts.append(part.prefixed(modality + "_"))
    return FeatureVector.concat(parts)
