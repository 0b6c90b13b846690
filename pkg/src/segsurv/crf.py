"""Mean-field inference on a pairwise two-label random field.

Refines a foreground probability map using CT and PET intensities. The
energy couples every voxel pair through two Gaussian kernels - an
appearance kernel over (position, CT, PET) and a smoothness kernel over
position only - with Potts label compatibility:

    k(i, j) = w_appearance * exp(-|pos_i-pos_j|^2 / (2*theta_alpha^2)
                                 - |I_i-I_j|^2   / (2*theta_beta^2))
            + w_smoothness * exp(-|pos_i-pos_j|^2 / (2*theta_gamma^2))

Updates are synchronous (parallel) into a fresh buffer each round. The
pairwise sums run over a truncated voxel neighbourhood; a radius of 0
means exact dense coupling. ``naive_meanfield`` is the O(N^2) reference
used to validate the truncated path on small grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .volume import Mask3D, ProbMap3D, Volume3D

__all__ = ["CrfParams", "LabelDistribution", "Unary", "unary_from_prob",
           "meanfield_refine", "naive_meanfield", "refine_mask"]


@dataclass
class CrfParams:
    w_appearance: float = 3.0
    w_smoothness: float = 1.0
    theta_alpha: float = 30.0   # spatial bandwidth of the appearance kernel, mm
    theta_beta: float = 0.5     # intensity bandwidth, normalized units
    theta_gamma: float = 3.0    # spatial bandwidth of the smoothness kernel, mm
    iterations: int = 5
    neighborhood_radius: int = 7  # voxels; 0 = exact dense coupling
    clamp: float = 1e-7

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("kernel bandwidths must be positive")
        if self.w_appearance < 0 or self.w_smoothness < 0:
            raise ValueError("kernel weights must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.neighborhood_radius < 0:
            raise ValueError("neighborhood radius must be >= 0")


@dataclass
class Unary:
    """Per-voxel label energies (negative log-probabilities)."""

    fg: np.ndarray
    bg: np.ndarray


@dataclass
class LabelDistribution:
    """Per-voxel two-class marginals; q_bg is 1 - q_fg by construction."""

    q_fg: np.ndarray

    @property
    def q_bg(self) -> np.ndarray:
        return 1.0 - self.q_fg


def unary_from_prob(pmap: ProbMap3D, params: CrfParams = CrfParams()) -> Unary:
    """Negative-log unaries from a probability map, clamped away from 0/1."""
    p = np.clip(pmap.data, params.clamp, 1.0 - params.clamp)
    return Unary(fg=-np.log(p), bg=-np.log(1.0 - p))


def _softmax_two(u_fg, u_bg):
    m = np.minimum(u_fg, u_bg)
    a = np.exp(-(u_fg - m))
    b = np.exp(-(u_bg - m))
    return a / (a + b)


def _neighborhood_offsets(radius: int, dims, spacing, params: CrfParams):
    """Offsets within the radius (zero offset excluded) plus the per-offset
    spatial kernel factors folded with the kernel weights."""
    if radius == 0:
        radius = max(dims) - 1  # dense: cover the whole grid
    rx = min(radius, dims[0] - 1)
    ry = min(radius, dims[1] - 1)
    rz = min(radius, dims[2] - 1)
    axes = [np.arange(-r, r + 1, dtype=np.int64) for r in (rx, ry, rz)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    grid = grid[~np.all(grid == 0, axis=1)]
    d2 = ((grid * np.asarray(spacing, dtype=np.float64)) ** 2).sum(axis=1)
    app = params.w_appearance * np.exp(-d2 / (2.0 * params.theta_alpha ** 2))
    smooth = params.w_smoothness * np.exp(-d2 / (2.0 * params.theta_gamma ** 2))
    return grid, app, smooth


def _check_reference(unary: Unary, reference):
    if len(reference) != 2:
        raise ValueError("reference must be [ct, pet]")
    for name, vol in zip(("ct", "pet"), reference):
        if vol.dims != unary.fg.shape:
            raise ValueError(f"{name} dims {vol.dims} do not match unary grid "
                             f"{unary.fg.shape}")


def meanfield_refine(unary: Unary, reference: list[Volume3D],
                     params: CrfParams = CrfParams(),
                     backend: str | None = None) -> LabelDistribution:
    """Run ``params.iterations`` synchronous mean-field rounds.

    Zero iterations returns the softmax of the negated unaries. Marginals
    are renormalized per voxel every round.
    """
    _check_reference(unary, reference)
    ct, pet = reference
    q_fg = _softmax_two(unary.fg, unary.bg)
    if params.iterations == 0:
        return LabelDistribution(q_fg)
    offsets, app, smooth = _neighborhood_offsets(
        params.neighborhood_radius, ct.dims, ct.spacing, params)
    inv_two_tb2 = 1.0 / (2.0 * params.theta_beta ** 2)
    for _ in range(params.iterations):
        q_fg = kernels.meanfield_sweep(q_fg, unary.fg, unary.bg,
                                       ct.data, pet.data, offsets, app, smooth,
                                       inv_two_tb2, backend=backend)
    return LabelDistribution(q_fg)


_NAIVE_MAX_VOXELS = 4096


def naive_meanfield(unary: Unary, reference: list[Volume3D],
                    params: CrfParams = CrfParams()) -> LabelDistribution:
    """Exact dense mean-field via the full N x N kernel matrix.

    Reference implementation for small grids (guarded at 4096 voxels);
    no truncation, independent of the sweep kernels.
    """
    _check_reference(unary, reference)
    ct, pet = reference
    dims = ct.dims
    n = int(np.prod(dims))
    if n > _NAIVE_MAX_VOXELS:
        raise ValueError(f"naive mean-field is limited to {_NAIVE_MAX_VOXELS} voxels")

    idx = np.argwhere(np.ones(dims, dtype=bool)).astype(np.float64)
    pos = idx * np.asarray(ct.spacing, dtype=np.float64)
    feats = np.stack([ct.data.ravel(), pet.data.ravel()], axis=1)

    d2_pos = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    d2_int = ((feats[:, None, :] - feats[None, :, :]) ** 2).sum(-1)
    K = (params.w_appearance
         * np.exp(-d2_pos / (2.0 * params.theta_alpha ** 2)
                  - d2_int / (2.0 * params.theta_beta ** 2))
         + params.w_smoothness * np.exp(-d2_pos / (2.0 * params.theta_gamma ** 2)))
    np.fill_diagonal(K, 0.0)

    u_fg = unary.fg.ravel()
    u_bg = unary.bg.ravel()
    q_fg = _softmax_two(u_fg, u_bg)
    for _ in range(params.iterations):
        msg_fg = K @ (1.0 - q_fg)  # coupling to the opposite label
        msg_bg = K @ q_fg
        q_fg = _softmax_two(u_fg + msg_fg, u_bg + msg_bg)
    return LabelDistribution(q_fg.reshape(dims))


def refine_mask(pmap: ProbMap3D, ct: Volume3D, pet: Volume3D,
                params: CrfParams = CrfParams(), threshold: float = 0.5,
                backend: str | None = None) -> tuple[Mask3D, ProbMap3D]:
    """Full refinement chain: unaries, mean-field, threshold.

    Returns the refined mask together with the foreground marginal map.
    """
    unary = unary_from_prob(pmap, params)
    dist = meanfield_refine(unary, [ct, pet], params, backend=backend)
    marginal = ProbMap3D(np.clip(dist.q_fg, 0.0, 1.0), pmap.spacing, pmap.origin)
    mask = Mask3D((marginal.data >= threshold).astype(np.uint8),
                  pmap.spacing, pmap.origin)
    return mask, marginal
