"""Hot numeric kernels, each with a numba build and a pure-numpy build.

Every public function dispatches on :data:`segsurv._accel.USE_NUMBA` (or an
explicit ``backend=`` override). The two builds implement the same
expression tree so they agree to float64 round-off; integer kernels agree
exactly. ``benchmarks/bench_kernels.py`` times the pairs against each other.

Array conventions: volumetric grids are float64 arrays of shape
``(nx, ny, nz)`` indexed ``[x, y, z]``; point sets are ``(n, 3)`` float64
arrays of physical coordinates in mm.
"""

from __future__ import annotations

import numpy as np

from . import _accel

if _accel.NUMBA_AVAILABLE:
    from numba import njit, prange
else:  # pragma: no cover - environment without numba
    njit = None
    prange = range


def _dispatch(backend, numba_fn, numpy_fn):
    if backend is None:
        backend = "numba" if _accel.USE_NUMBA else "numpy"
    if backend == "numba":
        if numba_fn is None:
            raise RuntimeError("numba backend requested but numba is not importable")
        return numba_fn
    if backend == "numpy":
        return numpy_fn
    raise ValueError(f"unknown backend {backend!r}")


# ---------------------------------------------------------------------------
# trilinear resampling
# ---------------------------------------------------------------------------

def _resample_coords(n_src, src_sp, n_out, out_sp):
    # continuous source index of each output voxel centre, edge-clamped
    u = ((np.arange(n_out, dtype=np.float64) + 0.5) * out_sp) / src_sp - 0.5
    u = np.clip(u, 0.0, float(n_src - 1))
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, f


def _resample_trilinear_numpy(src, src_spacing, out_dims, out_spacing):
    nx, ny, nz = src.shape
    x0, x1, fx = _resample_coords(nx, src_spacing[0], out_dims[0], out_spacing[0])
    y0, y1, fy = _resample_coords(ny, src_spacing[1], out_dims[1], out_spacing[1])
    z0, z1, fz = _resample_coords(nz, src_spacing[2], out_dims[2], out_spacing[2])

    X0 = x0[:, None, None]
    X1 = x1[:, None, None]
    Y0 = y0[None, :, None]
    Y1 = y1[None, :, None]
    Z0 = z0[None, None, :]
    Z1 = z1[None, None, :]
    FX = fx[:, None, None]
    FY = fy[None, :, None]
    FZ = fz[None, None, :]

    c00 = src[X0, Y0, Z0] * (1.0 - FX) + src[X1, Y0, Z0] * FX
    c10 = src[X0, Y1, Z0] * (1.0 - FX) + src[X1, Y1, Z0] * FX
    c01 = src[X0, Y0, Z1] * (1.0 - FX) + src[X1, Y0, Z1] * FX
    c11 = src[X0, Y1, Z1] * (1.0 - FX) + src[X1, Y1, Z1] * FX
    c0 = c00 * (1.0 - FY) + c10 * FY
    c1 = c01 * (1.0 - FY) + c11 * FY
    return c0 * (1.0 - FZ) + c1 * FZ


def _make_resample_numba():
    @njit(cache=True)
    def _resample(src, x0, x1, fx, y0, y1, fy, z0, z1, fz, out):
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                for k in range(out.shape[2]):
                    c00 = src[x0[i], y0[j], z0[k]] * (1.0 - fx[i]) + src[x1[i], y0[j], z0[k]] * fx[i]
                    c10 = src[x0[i], y1[j], z0[k]] * (1.0 - fx[i]) + src[x1[i], y1[j], z0[k]] * fx[i]
                    c01 = src[x0[i], y0[j], z1[k]] * (1.0 - fx[i]) + src[x1[i], y0[j], z1[k]] * fx[i]
                    c11 = src[x0[i], y1[j], z1[k]] * (1.0 - fx[i]) + src[x1[i], y1[j], z1[k]] * fx[i]
                    c0 = c00 * (1.0 - fy[j]) + c10 * fy[j]
                    c1 = c01 * (1.0 - fy[j]) + c11 * fy[j]
                    out[i, j, k] = c0 * (1.0 - fz[k]) + c1 * fz[k]
        return out

    return _resample


_resample_numba_impl = _make_resample_numba() if _accel.NUMBA_AVAILABLE else None


def _resample_trilinear_numba(src, src_spacing, out_dims, out_spacing):
    nx, ny, nz = src.shape
    x0, x1, fx = _resample_coords(nx, src_spacing[0], out_dims[0], out_spacing[0])
    y0, y1, fy = _resample_coords(ny, src_spacing[1], out_dims[1], out_spacing[1])
    z0, z1, fz = _resample_coords(nz, src_spacing[2], out_dims[2], out_spacing[2])
    out = np.empty(tuple(out_dims), dtype=np.float64)
    return _resample_numba_impl(src, x0, x1, fx, y0, y1, fy, z0, z1, fz, out)


def resample_trilinear_grid(src, src_spacing, out_dims, out_spacing, backend=None):
    """Trilinear resampling of ``src`` onto a grid of ``out_dims`` voxels.

    Voxel centres sit at ``(index + 0.5) * spacing``; coordinates outside the
    source grid clamp to the nearest edge voxel.
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    fn = _dispatch(backend, _resample_trilinear_numba if _accel.NUMBA_AVAILABLE else None,
                   _resample_trilinear_numpy)
    return fn(src, src_spacing, out_dims, out_spacing)


# ---------------------------------------------------------------------------
# directed nearest-neighbour squared distances between point sets
# ---------------------------------------------------------------------------

def _nn_sqdist_numpy(from_pts, to_pts):
    n = from_pts.shape[0]
    out = np.empty(n, dtype=np.float64)
    # chunked exhaustive broadcast; memory bounded to ~8M pair entries
    chunk = max(1, int(8_000_000 // max(1, to_pts.shape[0])))
    for s in range(0, n, chunk):
        d = from_pts[s:s + chunk, None, :] - to_pts[None, :, :]
        out[s:s + chunk] = np.min((d * d).sum(axis=-1), axis=1)
    return out


def _make_nn_sqdist_numba():
    @njit(cache=True, parallel=True)
    def _nn(from_pts, to_pts, out):
        m = to_pts.shape[0]
        for i in prange(from_pts.shape[0]):
            best = np.inf
            fx = from_pts[i, 0]
            fy = from_pts[i, 1]
            fz = from_pts[i, 2]
            for j in range(m):
                dx = fx - to_pts[j, 0]
                dy = fy - to_pts[j, 1]
                dz = fz - to_pts[j, 2]
                d = (dx * dx + dy * dy) + dz * dz
                if d < best:
                    best = d
            out[i] = best
        return out

    return _nn


_nn_sqdist_numba_impl = _make_nn_sqdist_numba() if _accel.NUMBA_AVAILABLE else None


def _nn_sqdist_numba(from_pts, to_pts):
    out = np.empty(from_pts.shape[0], dtype=np.float64)
    return _nn_sqdist_numba_impl(from_pts, to_pts, out)


def directed_min_sqdist(from_pts, to_pts, backend=None):
    """Minimum squared Euclidean distance from each row of ``from_pts`` to
    the point set ``to_pts``. Exhaustive O(n*m); both builds evaluate the
    same ``(dx*dx + dy*dy) + dz*dz`` expression, so results are exact.
    """
    from_pts = np.ascontiguousarray(from_pts, dtype=np.float64)
    to_pts = np.ascontiguousarray(to_pts, dtype=np.float64)
    if from_pts.shape[0] == 0:
        return np.empty(0, dtype=np.float64)
    if to_pts.shape[0] == 0:
        raise ValueError("target point set is empty")
    fn = _dispatch(backend, _nn_sqdist_numba if _accel.NUMBA_AVAILABLE else None,
                   _nn_sqdist_numpy)
    return fn(from_pts, to_pts)


# ---------------------------------------------------------------------------
# one parallel mean-field sweep on a truncated pairwise neighbourhood
# ---------------------------------------------------------------------------

def _meanfield_sweep_numpy(q_fg, u_fg, u_bg, feat0, feat1, offsets,
                           app_off, smooth_off, inv_two_tb2):
    nx, ny, nz = q_fg.shape
    s_k = np.zeros_like(q_fg)
    s_kq = np.zeros_like(q_fg)
    for o in range(offsets.shape[0]):
        dx, dy, dz = int(offsets[o, 0]), int(offsets[o, 1]), int(offsets[o, 2])
        if abs(dx) >= nx or abs(dy) >= ny or abs(dz) >= nz:
            continue
        dst = (slice(max(0, -dx), nx - max(0, dx)),
               slice(max(0, -dy), ny - max(0, dy)),
               slice(max(0, -dz), nz - max(0, dz)))
        src = (slice(max(0, dx), nx - max(0, -dx)),
               slice(max(0, dy), ny - max(0, -dy)),
               slice(max(0, dz), nz - max(0, -dz)))
        d0 = feat0[dst] - feat0[src]
        d1 = feat1[dst] - feat1[src]
        k = app_off[o] * np.exp(-((d0 * d0 + d1 * d1) * inv_two_tb2)) + smooth_off[o]
        s_k[dst] += k
        s_kq[dst] += k * q_fg[src]
    e_fg = u_fg + (s_k - s_kq)
    e_bg = u_bg + s_kq
    m = np.minimum(e_fg, e_bg)
    a = np.exp(-(e_fg - m))
    b = np.exp(-(e_bg - m))
    return a / (a + b)


def _make_meanfield_numba():
    @njit(cache=True, parallel=True)
    def _sweep(q_fg, u_fg, u_bg, feat0, feat1, offsets, app_off, smooth_off,
               inv_two_tb2, out):
        nx, ny, nz = q_fg.shape
        n_off = offsets.shape[0]
        for x in prange(nx):
            for y in range(ny):
                for z in range(nz):
                    s_k = 0.0
                    s_kq = 0.0
                    f0 = feat0[x, y, z]
                    f1 = feat1[x, y, z]
                    for o in range(n_off):
                        jx = x + offsets[o, 0]
                        jy = y + offsets[o, 1]
                        jz = z + offsets[o, 2]
                        if jx < 0 or jx >= nx or jy < 0 or jy >= ny or jz < 0 or jz >= nz:
                            continue
                        d0 = f0 - feat0[jx, jy, jz]
                        d1 = f1 - feat1[jx, jy, jz]
                        k = app_off[o] * np.exp(-((d0 * d0 + d1 * d1) * inv_two_tb2)) + smooth_off[o]
                        s_k += k
                        s_kq += k * q_fg[jx, jy, jz]
                    e_fg = u_fg[x, y, z] + (s_k - s_kq)
                    e_bg = u_bg[x, y, z] + s_kq
                    m = e_fg if e_fg < e_bg else e_bg
                    a = np.exp(-(e_fg - m))
                    b = np.exp(-(e_bg - m))
                    out[x, y, z] = a / (a + b)
        return out

    return _sweep


_meanfield_numba_impl = _make_meanfield_numba() if _accel.NUMBA_AVAILABLE else None


def _meanfield_sweep_numba(q_fg, u_fg, u_bg, feat0, feat1, offsets,
                           app_off, smooth_off, inv_two_tb2):
    out = np.empty_like(q_fg)
    return _meanfield_numba_impl(q_fg, u_fg, u_bg, feat0, feat1, offsets,
                                 app_off, smooth_off, inv_two_tb2, out)


def meanfield_sweep(q_fg, u_fg, u_bg, feat0, feat1, offsets, app_off,
                    smooth_off, inv_two_tb2, backend=None):
    """One synchronous mean-field update of the foreground marginal.

    For each voxel i the pairwise message over the offset neighbourhood is
    ``sum_j k_ij * Q_j(other label)`` with
    ``k_ij = app_off * exp(-||dI||^2 * inv_two_tb2) + smooth_off``; the
    spatial Gaussian factors are folded per-offset into ``app_off`` and
    ``smooth_off``. Writes go to a fresh buffer (double-buffered caller),
    so parallel execution is deterministic.
    """
    args = [np.ascontiguousarray(a, dtype=np.float64)
            for a in (q_fg, u_fg, u_bg, feat0, feat1)]
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    app_off = np.ascontiguousarray(app_off, dtype=np.float64)
    smooth_off = np.ascontiguousarray(smooth_off, dtype=np.float64)
    fn = _dispatch(backend, _meanfield_sweep_numba if _accel.NUMBA_AVAILABLE else None,
                   _meanfield_sweep_numpy)
    return fn(*args, offsets, app_off, smooth_off, float(inv_two_tb2))


# ---------------------------------------------------------------------------
# grey-level co-occurrence accumulation
# ---------------------------------------------------------------------------

def _glcm_numpy(levels, offsets, n_levels):
    nx, ny, nz = levels.shape
    counts = np.zeros((n_levels, n_levels), dtype=np.float64)
    for o in range(offsets.shape[0]):
        dx, dy, dz = int(offsets[o, 0]), int(offsets[o, 1]), int(offsets[o, 2])
        if abs(dx) >= nx or abs(dy) >= ny or abs(dz) >= nz:
            continue
        dst = (slice(max(0, -dx), nx - max(0, dx)),
               slice(max(0, -dy), ny - max(0, dy)),
               slice(max(0, -dz), nz - max(0, dz)))
        src = (slice(max(0, dx), nx - max(0, -dx)),
               slice(max(0, dy), ny - max(0, -dy)),
               slice(max(0, dz), nz - max(0, -dz)))
        a = levels[dst]
        b = levels[src]
        valid = (a > 0) & (b > 0)
        av = a[valid] - 1
        bv = b[valid] - 1
        np.add.at(counts, (av, bv), 1.0)
        np.add.at(counts, (bv, av), 1.0)
    return counts


def _make_glcm_numba():
    @njit(cache=True)
    def _glcm(levels, offsets, counts):
        nx, ny, nz = levels.shape
        for o in range(offsets.shape[0]):
            dx, dy, dz = offsets[o, 0], offsets[o, 1], offsets[o, 2]
            for x in range(nx):
                jx = x + dx
                if jx < 0 or jx >= nx:
                    continue
                for y in range(ny):
                    jy = y + dy
                    if jy < 0 or jy >= ny:
                        continue
                    for z in range(nz):
                        jz = z + dz
                        if jz < 0 or jz >= nz:
                            continue
                        a = levels[x, y, z]
                        b = levels[jx, jy, jz]
                        if a > 0 and b > 0:
                            counts[a - 1, b - 1] += 1.0
                            counts[b - 1, a - 1] += 1.0
        return counts

    return _glcm


_glcm_numba_impl = _make_glcm_numba() if _accel.NUMBA_AVAILABLE else None


def _glcm_numba(levels, offsets, n_levels):
    counts = np.zeros((n_levels, n_levels), dtype=np.float64)
    return _glcm_numba_impl(levels, offsets, counts)


def glcm_accumulate(levels, offsets, n_levels, backend=None):
    """Symmetric co-occurrence counts over the given voxel offsets.

    ``levels`` holds discretized grey levels in ``1..n_levels`` inside the
    region of interest and 0 outside; each in-region pair contributes to
    both ``(a, b)`` and ``(b, a)``. Counts are integers, so the two builds
    agree exactly.
    """
    levels = np.ascontiguousarray(levels, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    fn = _dispatch(backend, _glcm_numba if _accel.NUMBA_AVAILABLE else None, _glcm_numpy)
    return fn(levels, offsets, int(n_levels))


KERNELS = ("resample_trilinear_grid", "directed_min_sqdist", "meanfield_sweep",
           "glcm_accumulate")
