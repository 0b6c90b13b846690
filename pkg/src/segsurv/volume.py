"""Volumetric grids: I/O, resampling, normalization, cropping, ensembling.

A grid is a scalar field over ``(nx, ny, nz)`` voxels with per-axis spacing
in mm and a world origin in mm; voxel centres sit at
``origin + (index + 0.5) * spacing``. CT fields are in Hounsfield units,
PET fields in standard uptake values. Probability maps constrain voxels to
``[0, 1]``; masks to ``{0, 1}``.

Two file formats are supported:

* ``nifti1`` - single-file NIfTI-1 (``.nii``, optionally gzipped), the
  little-endian int16/float32/float64 subset; written as float32.
* ``raw_json`` - a ``.json`` sidecar ``{dims, spacing, origin, dtype}``
  plus a ``.bin`` of little-endian float32 in x-fastest order.

Both formats carry float32 payloads, so round-trips are bit-exact for
float32-representable data and rounding for anything else.
"""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

__all__ = [
    "Volume3D", "ProbMap3D", "Mask3D", "BoundingBox",
    "load_volume", "save_volume", "load_boxes_csv",
    "resample_trilinear", "zscore_normalize", "clip_intensities",
    "crop_to_box", "ensemble_mean", "threshold_map",
    "mask_from_volume", "probmap_from_volume",
]


@dataclass
class Volume3D:
    """Scalar voxel grid with spacing (mm/voxel) and world origin (mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=self._dtype())
        if self.data.ndim != 3:
            raise ValueError(f"expected a 3D array, got ndim={self.data.ndim}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or len(self.origin) != 3:
            raise ValueError("spacing and origin must have 3 components")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self._validate()

    def _dtype(self):
        return np.float64

    def _validate(self):
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def same_grid(self, other, atol=1e-9) -> bool:
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing, atol=atol)
                and np.allclose(self.origin, other.origin, atol=atol))


@dataclass
class ProbMap3D(Volume3D):
    """Per-voxel foreground probability in [0, 1]."""

    def _validate(self):
        super()._validate()
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("probability map has voxels outside [0, 1]")


@dataclass
class Mask3D(Volume3D):
    """Binary label grid stored as uint8."""

    def _dtype(self):
        return np.uint8

    def _validate(self):
        bad = ~np.isin(self.data, (0, 1))
        if bad.any():
            raise ValueError("mask has voxels outside {0, 1}")

    def voxel_count(self) -> int:
        return int(self.data.sum())

    def coordinates_mm(self) -> np.ndarray:
        """(n, 3) physical coordinates of foreground voxels (index * spacing)."""
        idx = np.argwhere(self.data > 0).astype(np.float64)
        return idx * np.asarray(self.spacing, dtype=np.float64)


@dataclass
class BoundingBox:
    """Voxel-space crop window: inclusive start plus size per axis."""

    start: tuple[int, int, int]
    size: tuple[int, int, int]

    def __post_init__(self):
        self.start = tuple(int(v) for v in self.start)
        self.size = tuple(int(v) for v in self.size)
        if any(v < 0 for v in self.start):
            raise ValueError(f"box start must be non-negative, got {self.start}")
        if any(v <= 0 for v in self.size):
            raise ValueError(f"box size must be positive, got {self.size}")

    def check_within(self, dims):
        for a in range(3):
            if self.start[a] + self.size[a] > dims[a]:
                raise ValueError(
                    f"box start+size {self.start[a] + self.size[a]} exceeds "
                    f"volume dim {dims[a]} on axis {a}")


def mask_from_volume(vol: Volume3D) -> Mask3D:
    return Mask3D(vol.data.astype(np.uint8), vol.spacing, vol.origin)


def probmap_from_volume(vol: Volume3D) -> ProbMap3D:
    return ProbMap3D(vol.data, vol.spacing, vol.origin)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {4: np.dtype("<i2"), 16: np.dtype("<f4"), 64: np.dtype("<f8")}


def _infer_format(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti1"
    if name.endswith(".json"):
        return "raw_json"
    raise ValueError(f"cannot infer volume format from {path.name!r}; pass fmt=")


def load_volume(path, fmt: str | None = None) -> Volume3D:
    """Read a volume file; data is converted to float64."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    fmt = fmt or _infer_format(path)
    if fmt == "nifti1":
        return _load_nifti(path)
    if fmt == "raw_json":
        return _load_raw_json(path)
    raise ValueError(f"unsupported format {fmt!r}")


def save_volume(vol: Volume3D, path, fmt: str | None = None) -> None:
    """Write a volume; the file loads back with identical (float32) content."""
    path = Path(path)
    fmt = fmt or _infer_format(path)
    if fmt == "nifti1":
        _save_nifti(vol, path)
    elif fmt == "raw_json":
        _save_raw_json(vol, path)
    else:
        raise ValueError(f"unsupported format {fmt!r}")


def _load_raw_json(path: Path) -> Volume3D:
    with open(path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    for key in ("dims", "spacing", "origin", "dtype"):
        if key not in meta:
            raise ValueError(f"raw_json sidecar missing key {key!r}")
    if meta["dtype"] != "f32":
        raise ValueError(f"unsupported raw_json dtype {meta['dtype']!r}")
    dims = tuple(int(d) for d in meta["dims"])
    bin_path = path.with_suffix(".bin")
    if not bin_path.exists():
        raise FileNotFoundError(str(bin_path))
    raw = np.fromfile(bin_path, dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise ValueError(
            f"dims/data-length mismatch: dims {dims} need {int(np.prod(dims))} "
            f"voxels, payload has {raw.size}")
    data = raw.astype(np.float64).reshape(dims, order="F")
    return Volume3D(data, tuple(meta["spacing"]), tuple(meta["origin"]))


def _save_raw_json(vol: Volume3D, path: Path) -> None:
    meta = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "dtype": "f32",
    }
    payload = np.asarray(vol.data, dtype=np.float64).astype("<f4").ravel(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True)
    payload.tofile(path.with_suffix(".bin"))


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _load_nifti(path: Path) -> Volume3D:
    with _open_maybe_gzip(path) as f:
        hdr = f.read(348)
        if len(hdr) < 348:
            raise ValueError(f"{path.name}: truncated NIfTI header")
        sizeof_hdr = struct.unpack_from("<i", hdr, 0)[0]
        magic = hdr[344:348]
        if sizeof_hdr != 348 or magic[:2] not in (b"n+", b"ni"):
            raise ValueError(f"{path.name}: not a little-endian NIfTI-1 file")
        dim = struct.unpack_from("<8h", hdr, 40)
        datatype = struct.unpack_from("<h", hdr, 70)[0]
        pixdim = struct.unpack_from("<8f", hdr, 76)
        vox_offset = struct.unpack_from("<f", hdr, 108)[0]
        scl_slope = struct.unpack_from("<f", hdr, 112)[0]
        scl_inter = struct.unpack_from("<f", hdr, 116)[0]
        qform_code, sform_code = struct.unpack_from("<2h", hdr, 252)
        qoffset = struct.unpack_from("<3f", hdr, 268)
        srow = struct.unpack_from("<12f", hdr, 280)

        if datatype not in _NIFTI_DTYPES:
            raise ValueError(f"{path.name}: unsupported NIfTI datatype code {datatype}")
        ndim = dim[0]
        if ndim < 3:
            raise ValueError(f"{path.name}: expected 3 spatial dims, header says {ndim}")
        dims = tuple(int(d) for d in dim[1:4])
        if any(d <= 0 for d in dims):
            raise ValueError(f"{path.name}: non-positive dims {dims}")
        for extra in dim[4:1 + ndim]:
            if extra > 1:
                raise ValueError(f"{path.name}: multi-volume files are not supported")
        spacing = tuple(abs(float(p)) for p in pixdim[1:4])

        f.seek(int(max(vox_offset, 348)))
        dtype = _NIFTI_DTYPES[datatype]
        n = int(np.prod(dims))
        raw = np.frombuffer(f.read(n * dtype.itemsize), dtype=dtype)
        if raw.size != n:
            raise ValueError(
                f"{path.name}: dims/data-length mismatch: dims {dims} need {n} "
                f"voxels, payload has {raw.size}")

    data = raw.astype(np.float64)
    if scl_slope not in (0.0, 1.0) or (scl_slope == 1.0 and scl_inter != 0.0):
        data = data * float(scl_slope) + float(scl_inter)
    data = data.reshape(dims, order="F")

    if sform_code > 0:
        origin = (float(srow[3]), float(srow[7]), float(srow[11]))
    elif qform_code > 0:
        origin = tuple(float(q) for q in qoffset)
    else:
        origin = (0.0, 0.0, 0.0)
    return Volume3D(data, spacing, origin)


def _save_nifti(vol: Volume3D, path: Path) -> None:
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    dims = vol.dims
    struct.pack_into("<8h", hdr, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)
    sx, sy, sz = vol.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)
    struct.pack_into("<2h", hdr, 252, 1, 1)  # qform, sform codes
    ox, oy, oz = vol.origin
    struct.pack_into("<3f", hdr, 256, 0.0, 0.0, 0.0)  # identity quaternion
    struct.pack_into("<3f", hdr, 268, ox, oy, oz)
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = b"n+1\x00"

    payload = np.asarray(vol.data, dtype=np.float64).astype("<f4").ravel(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = bytes(hdr) + b"\x00" * 4 + payload.tobytes()  # 4 = extension flag
    if path.name.lower().endswith(".gz"):
        # mtime and filename pinned so identical volumes produce
        # identical files
        with open(path, "wb") as raw, \
                gzip.GzipFile(filename="", fileobj=raw, mode="wb",
                              mtime=0) as f:
            f.write(blob)
    else:
        path.write_bytes(blob)


def load_boxes_csv(path) -> dict[str, BoundingBox]:
    """Read crop windows: rows of patient_id, x0, y0, z0, sx, sy, sz (voxels)."""
    boxes = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        required = {"patient_id", "x0", "y0", "z0", "sx", "sy", "sz"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"box CSV must have columns {sorted(required)}")
        for row in reader:
            boxes[row["patient_id"]] = BoundingBox(
                (int(row["x0"]), int(row["y0"]), int(row["z0"])),
                (int(row["sx"]), int(row["sy"]), int(row["sz"])))
    return boxes


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def resample_trilinear(vol: Volume3D, target_spacing) -> Volume3D:
    """Resample onto ``target_spacing``; output dims round the physical extent.

    Each output voxel interpolates the 8 enclosing input voxels at its
    centre coordinate; out-of-grid coordinates clamp to the nearest edge
    voxel. Output values therefore stay within the input value range.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if len(target_spacing) != 3 or any(s <= 0 for s in target_spacing):
        raise ValueError(f"target spacing must be 3 positive reals, got {target_spacing}")
    out_dims = tuple(
        max(1, int(round(vol.dims[a] * vol.spacing[a] / target_spacing[a])))
        for a in range(3))
    data = kernels.resample_trilinear_grid(vol.data, vol.spacing, out_dims, target_spacing)
    return Volume3D(data, target_spacing, vol.origin)


def zscore_normalize(vol: Volume3D) -> Volume3D:
    """Shift/scale to zero mean and unit population standard deviation."""
    mean = float(vol.data.mean())
    std = float(vol.data.std())
    if std == 0.0:
        raise ValueError("zero-variance volume cannot be z-score normalized")
    return Volume3D((vol.data - mean) / std, vol.spacing, vol.origin)


def clip_intensities(vol: Volume3D, lo: float, hi: float,
                     prescale: float | None = None) -> Volume3D:
    """Optionally divide by ``prescale``, then clamp values into [lo, hi]."""
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    data = vol.data
    if prescale is not None:
        if prescale == 0:
            raise ValueError("prescale divisor must be nonzero")
        data = data / float(prescale)
    return Volume3D(np.clip(data, lo, hi), vol.spacing, vol.origin)


def crop_to_box(vol: Volume3D, box: BoundingBox) -> Volume3D:
    """Copy the box window; origin shifts by start * spacing."""
    box.check_within(vol.dims)
    x0, y0, z0 = box.start
    sx, sy, sz = box.size
    data = vol.data[x0:x0 + sx, y0:y0 + sy, z0:z0 + sz].copy()
    origin = tuple(vol.origin[a] + box.start[a] * vol.spacing[a] for a in range(3))
    return type(vol)(data, vol.spacing, origin)


def ensemble_mean(maps: list[ProbMap3D]) -> ProbMap3D:
    """Voxelwise arithmetic mean of probability maps on one grid."""
    if not maps:
        raise ValueError("cannot ensemble an empty list of maps")
    first = maps[0]
    for i, m in enumerate(maps[1:], start=1):
        if m.dims != first.dims or not np.allclose(m.spacing, first.spacing):
            raise ValueError(f"map {i} grid does not match map 0")
    acc = np.zeros(first.dims, dtype=np.float64)
    for m in maps:
        acc += m.data
    acc /= len(maps)
    return ProbMap3D(np.clip(acc, 0.0, 1.0), first.spacing, first.origin)


def threshold_map(pmap: ProbMap3D, t: float) -> Mask3D:
    """Binarize: voxel -> 1 iff probability >= t (ties go to foreground)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {t}")
    return Mask3D((pmap.data >= t).astype(np.uint8), pmap.spacing, pmap.origin)
