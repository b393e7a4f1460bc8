"""Constraint weights derived from a pre-rendered single-light reference table.

Smooth weights are inversely proportional to the reference table's mean alpha
gradients within and between slabs. Observation weights combine an SNR model
(shot + constant noise anchored to a 20 dB slab-0 green reference), a
forward-scatter PSF factor, and the inverse distance to the nearest voxel
center. Correspondence weights combine two observation weights by the
Pythagorean rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Observation
from .lut import FrustumSpec, GridLocation, LookupTable, grid_coords

GRADIENT_FLOOR = 1e-6
SMOOTH_SCALE = 0.01       # keeps smooth constraints subordinate to data constraints
SCENE_INTENSITY = 0.7     # gray-world average scene intensity
DEFAULT_SNR0 = 10.0       # amplitude ratio for the assumed 20 dB reference SNR
PURE_WATER_WEIGHT = 1.0


@dataclass
class ReferenceStats:
    """Per-slab statistics of the reference table (per channel)."""

    grad_within: np.ndarray    # (nz, 3) mean |alpha| gradient over lateral neighbours
    grad_between: np.ndarray   # (nz-1, 3) mean |alpha| gradient between aligned voxels
    mean: np.ndarray           # (nz, 3) gray-world slab intensity: mean(alpha)*0.7 + mean(beta)
    snr0: float                # reference SNR anchor (slab 0, green)
    mean0g: float              # slab-0 green mean intensity


@dataclass
class WeightSet:
    """Smooth weights per slab / slab pair, per channel, plus the hinge weight."""

    alpha_within: np.ndarray    # (nz, 3)
    alpha_between: np.ndarray   # (nz-1, 3)
    beta_within: np.ndarray
    beta_between: np.ndarray
    pure_water: float = PURE_WATER_WEIGHT


def reference_stats(ref_lut: LookupTable, snr0: float = DEFAULT_SNR0,
                    scene_intensity: float = SCENE_INTENSITY) -> ReferenceStats:
    """Slab gradient and intensity statistics of a reference table.

    Gradients are mean absolute differences of the alpha field over lateral
    4-neighbour pairs (within a slab) and aligned pairs (between consecutive
    slabs), floored to avoid division blow-ups on constant fields.
    """
    a = ref_lut.alpha
    nx, ny, nz = ref_lut.spec.shape
    grad_within = np.full((nz, 3), GRADIENT_FLOOR)
    dx = np.abs(a[1:, :, :, :] - a[:-1, :, :, :]) if nx > 1 else None
    dy = np.abs(a[:, 1:, :, :] - a[:, :-1, :, :]) if ny > 1 else None
    n_pairs = (nx - 1) * ny + nx * (ny - 1)
    if n_pairs > 0:
        for k in range(nz):
            total = np.zeros(3)
            if dx is not None:
                total += dx[:, :, k, :].sum(axis=(0, 1))
            if dy is not None:
                total += dy[:, :, k, :].sum(axis=(0, 1))
            grad_within[k] = np.maximum(total / n_pairs, GRADIENT_FLOOR)
    if nz > 1:
        dz = np.abs(a[:, :, 1:, :] - a[:, :, :-1, :])
        grad_between = np.maximum(dz.mean(axis=(0, 1)), GRADIENT_FLOOR)
    else:
        grad_between = np.zeros((0, 3))
    mean = (ref_lut.alpha.mean(axis=(0, 1)) * scene_intensity
            + ref_lut.beta.mean(axis=(0, 1)))
    return ReferenceStats(grad_within=grad_within, grad_between=grad_between,
                          mean=mean, snr0=float(snr0), mean0g=float(mean[0, 1]))


def smooth_weights(stats: ReferenceStats) -> WeightSet:
    """Smooth weights: 0.01 * 0.7 / grad for alpha, 0.01 / grad for beta."""
    return WeightSet(
        alpha_within=SMOOTH_SCALE * SCENE_INTENSITY / stats.grad_within,
        alpha_between=SMOOTH_SCALE * SCENE_INTENSITY / stats.grad_between,
        beta_within=SMOOTH_SCALE / stats.grad_within,
        beta_between=SMOOTH_SCALE / stats.grad_between,
    )


def _cell_diagonal(spec: FrustumSpec, ix0, iy0, iz0) -> np.ndarray:
    centers = spec.voxel_centers()
    lo = centers[ix0, iy0, iz0]
    hi = centers[np.minimum(ix0 + 1, spec.nx - 1),
                 np.minimum(iy0 + 1, spec.ny - 1),
                 np.minimum(iz0 + 1, spec.nz - 1)]
    return np.linalg.norm(hi - lo, axis=-1)


def observation_weights(points: np.ndarray, intensities: np.ndarray,
                        spec: FrustumSpec, stats: ReferenceStats,
                        clamp: bool = False) -> np.ndarray:
    """Vectorized per-channel observation weights for points (n, 3) / colours (n, 3).

    w = (1 / d_v) * snr / (e^{0.5 d})^2 with snr = I / (n_shot + n_const),
    n_shot = 0.01 sqrt(mean_N), n_const = mean_N / (snr0 * mean0g); d is the
    camera distance, d_v the distance to the nearest voxel center (floored at
    a tenth of the half cell diagonal).
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    intensities = np.asarray(intensities, dtype=float).reshape(-1, 3)
    gx, gy, gz = grid_coords(points, spec, clamp=clamp)
    nvx = np.round(gx).astype(int)
    nvy = np.round(gy).astype(int)
    nvz = np.round(gz).astype(int)
    centers = spec.voxel_centers()
    d = np.linalg.norm(points, axis=-1)
    d_v = np.linalg.norm(points - centers[nvx, nvy, nvz], axis=-1)
    ix0 = np.minimum(np.floor(gx).astype(int), max(spec.nx - 2, 0))
    iy0 = np.minimum(np.floor(gy).astype(int), max(spec.ny - 2, 0))
    iz0 = np.minimum(np.floor(gz).astype(int), max(spec.nz - 2, 0))
    floor = np.maximum(0.1 * 0.5 * _cell_diagonal(spec, ix0, iy0, iz0), 1e-9)
    d_v = np.maximum(d_v, floor)
    mean_n = stats.mean[nvz]                       # (n, 3)
    n_shot = 0.01 * np.sqrt(mean_n)
    n_const = mean_n / (stats.snr0 * stats.mean0g)
    snr = np.maximum(intensities, 0.0) / (n_shot + n_const)
    return snr / (d_v[:, None] * np.exp(d)[:, None])


def observation_weight(obs: Observation, stats: ReferenceStats, gloc: GridLocation,
                       spec: FrustumSpec) -> np.ndarray:
    """Scalar-path observation weight (RGB) for a located observation."""
    del gloc  # location is re-derived from the position; kept for API parity
    return observation_weights(obs.p[None, :], obs.color[None, :], spec, stats)[0]


def correspondence_weight(w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Pythagorean combination w1*w2 / sqrt(w1^2 + w2^2), zero when either is zero."""
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    denom = np.sqrt(w1 ** 2 + w2 ** 2)
    out = np.zeros(np.broadcast_shapes(w1.shape, w2.shape))
    nz = denom > 0
    out[nz] = (w1 * w2)[nz] / denom[nz]
    return out
