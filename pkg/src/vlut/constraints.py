"""Weighted residual system over lookup-table parameters.

Each colour channel is an independent least-squares system over the parameter
vector [alpha_0..alpha_{n-1}, beta_0..beta_{n-1}] (voxel-major). Block kinds:

* known_color:    w * (sum_c t_c alpha_c * I0 + sum_c t_c beta_c - I)
* correspondence: w * (a2*I1 - a2*b1 - a1*I2 + a1*b2), endpoints trilinear
* smooth:         w * (p_i - p_j) over the 6-connected voxel lattice
* pure_water:     w * max(0, beta_blend - I_pw), one per sampled ray and slab
* normalization:  w_n * (sum alpha - 1), correspondence-only mode

Known-colour and smooth blocks are linear in the parameters, correspondence
blocks are bilinear, the pure-water hinge is piecewise linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dataset import CorrespondencePair, Observation
from .lut import FrustumSpec, LookupTable, _corner_arrays, grid_coords
from .weights import ReferenceStats, WeightSet, correspondence_weight, observation_weights


class UnconstrainedSystemError(Exception):
    """No observations or correspondences were provided."""


@dataclass
class ResidualBlock:
    """One residual in scalar form; the solver uses the vectorized arrays instead."""

    kind: str
    w: float
    corners: np.ndarray | None = None     # (8,) voxel indices of endpoint 1
    t: np.ndarray | None = None           # (8,) trilinear weights of endpoint 1
    corners2: np.ndarray | None = None
    t2: np.ndarray | None = None
    albedo: float | None = None           # I0 for known-colour blocks
    intensity: float | None = None        # I (or I1)
    intensity2: float | None = None       # I2
    bound: float | None = None            # I_pw
    pair: tuple[int, int] | None = None   # absolute parameter indices for smooth blocks


def known_color_residual(block: ResidualBlock, params: np.ndarray) -> float:
    n = params.size // 2
    a = float(params[block.corners] @ block.t)
    b = float(params[n + block.corners] @ block.t)
    return block.w * (a * block.albedo + b - block.intensity)


def correspondence_residual(block: ResidualBlock, params: np.ndarray) -> float:
    n = params.size // 2
    a1 = float(params[block.corners] @ block.t)
    b1 = float(params[n + block.corners] @ block.t)
    a2 = float(params[block.corners2] @ block.t2)
    b2 = float(params[n + block.corners2] @ block.t2)
    return block.w * (a2 * block.intensity - a2 * b1 - a1 * block.intensity2 + a1 * b2)


def smooth_residual(block: ResidualBlock, params: np.ndarray) -> float:
    i, j = block.pair
    return block.w * (params[i] - params[j])


def pure_water_residual(block: ResidualBlock, params: np.ndarray) -> float:
    n = params.size // 2
    blend = float(params[n + block.corners] @ block.t)
    return block.w * max(0.0, blend - block.bound)


def normalization_residual(params: np.ndarray, w_n: float) -> float:
    n = params.size // 2
    return w_n * (float(params[:n].sum()) - 1.0)


@dataclass
class PureWaterRay:
    """One sampled viewing ray of a pure-water frame with its pixel intensity."""

    pixel: tuple[int, int]
    intensity: np.ndarray     # RGB


def pure_water_rays_from_image(image: np.ndarray, spec: FrustumSpec) -> list[PureWaterRay]:
    """Subsample a pure-water frame to one ray per voxel column (3x3 mean colour).

    The pixel intensity is lifted into the shading-compensated space the table
    lives in (all model intensities are compensated): for a viewing ray the
    compensation factor is the ray norm, i.e. 1/cos of a fronto-parallel
    surface at that pixel.
    """
    h, w = image.shape[:2]
    intr = spec.intr
    us, vs = spec.voxel_center_pixels()
    rays = []
    for v in np.clip(np.round(vs).astype(int), 0, h - 1):
        for u in np.clip(np.round(us).astype(int), 0, w - 1):
            win = image[max(v - 1, 0):v + 2, max(u - 1, 0):u + 2].reshape(-1, 3)
            ray_norm = np.sqrt(((u - intr.cx) / intr.fx) ** 2
                               + ((v - intr.cy) / intr.fy) ** 2 + 1.0)
            rays.append(PureWaterRay((int(u), int(v)), win.mean(axis=0) * ray_norm))
    return rays


@dataclass
class ChannelSystem:
    """Vectorized residual blocks of one colour channel."""

    n_vox: int
    estimate_beta: bool = True
    # known colour
    kc_idx: np.ndarray = field(default_factory=lambda: np.zeros((0, 8), dtype=np.int64))
    kc_t: np.ndarray = field(default_factory=lambda: np.zeros((0, 8)))
    kc_albedo: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kc_intensity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kc_w: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # correspondence
    co_idx1: np.ndarray = field(default_factory=lambda: np.zeros((0, 8), dtype=np.int64))
    co_t1: np.ndarray = field(default_factory=lambda: np.zeros((0, 8)))
    co_idx2: np.ndarray = field(default_factory=lambda: np.zeros((0, 8), dtype=np.int64))
    co_t2: np.ndarray = field(default_factory=lambda: np.zeros((0, 8)))
    co_i1: np.ndarray = field(default_factory=lambda: np.zeros(0))
    co_i2: np.ndarray = field(default_factory=lambda: np.zeros(0))
    co_w: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # smooth (voxel index pairs)
    sa_i: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sa_j: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sa_w: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sb_i: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sb_j: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sb_w: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # pure water hinge
    pw_idx: np.ndarray = field(default_factory=lambda: np.zeros((0, 8), dtype=np.int64))
    pw_t: np.ndarray = field(default_factory=lambda: np.zeros((0, 8)))
    pw_bound: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pw_w: float = 1.0
    # normalization
    norm_w: float | None = None

    @property
    def n_params(self) -> int:
        return 2 * self.n_vox

    @property
    def n_residuals(self) -> int:
        return (len(self.kc_w) + len(self.co_w) + len(self.sa_w) + len(self.sb_w)
                + len(self.pw_bound) + (1 if self.norm_w else 0))

    def beta_upper_bounds(self) -> np.ndarray:
        """Per-voxel beta cap implied by the pure-water blocks.

        Capping every corner of a block at the block's bound is sufficient for
        the interpolated value to satisfy it (trilinear weights are a convex
        combination); voxels no block touches are unbounded.
        """
        upper = np.full(self.n_vox, np.inf)
        if len(self.pw_bound):
            np.minimum.at(upper, self.pw_idx.ravel(),
                          np.repeat(self.pw_bound, self.pw_idx.shape[1]))
        return upper

    def free_mask(self) -> np.ndarray:
        mask = np.ones(self.n_params, dtype=bool)
        if not self.estimate_beta:
            mask[self.n_vox:] = False
        return mask

    def residuals(self, params: np.ndarray) -> np.ndarray:
        n = self.n_vox
        alpha, beta = params[:n], params[n:]
        parts = []
        if len(self.kc_w):
            a = np.sum(alpha[self.kc_idx] * self.kc_t, axis=1)
            b = np.sum(beta[self.kc_idx] * self.kc_t, axis=1)
            parts.append(self.kc_w * (a * self.kc_albedo + b - self.kc_intensity))
        if len(self.co_w):
            a1 = np.sum(alpha[self.co_idx1] * self.co_t1, axis=1)
            b1 = np.sum(beta[self.co_idx1] * self.co_t1, axis=1)
            a2 = np.sum(alpha[self.co_idx2] * self.co_t2, axis=1)
            b2 = np.sum(beta[self.co_idx2] * self.co_t2, axis=1)
            parts.append(self.co_w * (a2 * self.co_i1 - a2 * b1 - a1 * self.co_i2 + a1 * b2))
        if len(self.sa_w):
            parts.append(self.sa_w * (alpha[self.sa_i] - alpha[self.sa_j]))
        if len(self.sb_w):
            parts.append(self.sb_w * (beta[self.sb_i] - beta[self.sb_j]))
        if len(self.pw_bound):
            blend = np.sum(beta[self.pw_idx] * self.pw_t, axis=1)
            parts.append(self.pw_w * np.maximum(0.0, blend - self.pw_bound))
        if self.norm_w:
            parts.append(np.array([self.norm_w * (alpha.sum() - 1.0)]))
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    def jacobian(self, params: np.ndarray) -> sp.csr_matrix:
        """Analytic Jacobian as a sparse matrix (rows follow residuals order)."""
        n = self.n_vox
        alpha, beta = params[:n], params[n:]
        rows, cols, data = [], [], []
        row0 = 0

        def push(r, c, d):
            rows.append(np.asarray(r).ravel())
            cols.append(np.asarray(c).ravel())
            data.append(np.asarray(d).ravel())

        m = len(self.kc_w)
        if m:
            r = (row0 + np.arange(m))[:, None] * np.ones(8, dtype=int)
            push(r, self.kc_idx, self.kc_w[:, None] * self.kc_t * self.kc_albedo[:, None])
            push(r, self.kc_idx + n, self.kc_w[:, None] * self.kc_t)
            row0 += m
        m = len(self.co_w)
        if m:
            a1 = np.sum(alpha[self.co_idx1] * self.co_t1, axis=1)
            b1 = np.sum(beta[self.co_idx1] * self.co_t1, axis=1)
            a2 = np.sum(alpha[self.co_idx2] * self.co_t2, axis=1)
            b2 = np.sum(beta[self.co_idx2] * self.co_t2, axis=1)
            r = (row0 + np.arange(m))[:, None] * np.ones(8, dtype=int)
            push(r, self.co_idx1, self.co_w[:, None] * self.co_t1 * (b2 - self.co_i2)[:, None])
            push(r, self.co_idx1 + n, self.co_w[:, None] * self.co_t1 * (-a2)[:, None])
            push(r, self.co_idx2, self.co_w[:, None] * self.co_t2 * (self.co_i1 - b1)[:, None])
            push(r, self.co_idx2 + n, self.co_w[:, None] * self.co_t2 * a1[:, None])
            row0 += m
        m = len(self.sa_w)
        if m:
            r = row0 + np.arange(m)
            push(r, self.sa_i, self.sa_w)
            push(r, self.sa_j, -self.sa_w)
            row0 += m
        m = len(self.sb_w)
        if m:
            r = row0 + np.arange(m)
            push(r, self.sb_i + n, self.sb_w)
            push(r, self.sb_j + n, -self.sb_w)
            row0 += m
        m = len(self.pw_bound)
        if m:
            blend = np.sum(beta[self.pw_idx] * self.pw_t, axis=1)
            active = (blend > self.pw_bound).astype(float)
            r = (row0 + np.arange(m))[:, None] * np.ones(8, dtype=int)
            push(r, self.pw_idx + n, self.pw_w * self.pw_t * active[:, None])
            row0 += m
        if self.norm_w:
            push(np.full(n, row0), np.arange(n), np.full(n, self.norm_w))
            row0 += 1

        if not rows:
            return sp.csr_matrix((0, self.n_params))
        return sp.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(row0, self.n_params))

    def cost(self, params: np.ndarray) -> float:
        r = self.residuals(params)
        return float(r @ r)


@dataclass
class ConstraintSystem:
    """Three independent per-channel systems plus voxel observation support."""

    spec: FrustumSpec
    channels: list[ChannelSystem]
    obs_count: np.ndarray

    @property
    def n_voxels(self) -> int:
        return self.spec.n_voxels


def smooth_pair_count(nx: int, ny: int, nz: int) -> int:
    """Unordered 6-neighbour pairs of an nx x ny x nz lattice (per parameter kind)."""
    return 3 * nx * ny * nz - nx * ny - ny * nz - nx * nz


def _smooth_lattice(spec: FrustumSpec, within: np.ndarray, between: np.ndarray):
    """Voxel index pairs and per-channel weights of the 6-neighbour lattice."""
    nx, ny, nz = spec.shape
    shape = spec.shape
    idx = np.arange(spec.n_voxels).reshape(shape)
    slab = np.broadcast_to(np.arange(nz), shape)
    pairs_i, pairs_j, w = [], [], []
    if nx > 1:
        pairs_i.append(idx[:-1, :, :].ravel())
        pairs_j.append(idx[1:, :, :].ravel())
        w.append(within[slab[:-1, :, :].ravel()])
    if ny > 1:
        pairs_i.append(idx[:, :-1, :].ravel())
        pairs_j.append(idx[:, 1:, :].ravel())
        w.append(within[slab[:, :-1, :].ravel()])
    if nz > 1:
        pairs_i.append(idx[:, :, :-1].ravel())
        pairs_j.append(idx[:, :, 1:].ravel())
        w.append(between[slab[:, :, :-1].ravel()])
    if not pairs_i:
        return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 3)))
    return np.concatenate(pairs_i), np.concatenate(pairs_j), np.concatenate(w)


def _trilinear_footprints(points: np.ndarray, spec: FrustumSpec):
    gx, gy, gz = grid_coords(points, spec)
    ix, iy, iz, w = _corner_arrays(gx, gy, gz, spec)
    flat = np.ravel_multi_index((ix, iy, iz), spec.shape)
    return flat, w


def build_system(observations: list[Observation], pairs: list[CorrespondencePair],
                 pure_water_rays: list[list[PureWaterRay]], lut: LookupTable,
                 weight_set: WeightSet, stats: ReferenceStats,
                 mode: str = "known_color", estimate_beta: bool = True) -> ConstraintSystem:
    """Assemble the per-channel systems at the resolution of `lut`.

    Observation weights are filled from the reference stats where missing.
    Voxel support (trilinear mass of data endpoints) is accumulated so the
    solver can report coverage.
    """
    if not observations and not pairs:
        raise UnconstrainedSystemError("no observations or correspondence pairs")
    spec = lut.spec
    n_vox = spec.n_voxels
    obs_count = np.zeros(spec.shape).ravel()

    sm_i, sm_j, sm_w = _smooth_lattice(spec, weight_set.beta_within, weight_set.beta_between)
    _, _, sm_wa = _smooth_lattice(spec, weight_set.alpha_within, weight_set.alpha_between)

    systems = [ChannelSystem(n_vox=n_vox, estimate_beta=estimate_beta) for _ in range(3)]
    for c, sys_c in enumerate(systems):
        sys_c.sa_i, sys_c.sa_j, sys_c.sa_w = sm_i, sm_j, sm_wa[:, c] if sm_wa.size else np.zeros(0)
        if estimate_beta:
            sys_c.sb_i, sys_c.sb_j, sys_c.sb_w = sm_i, sm_j, sm_w[:, c] if sm_w.size else np.zeros(0)
        if mode == "correspondence_only":
            sys_c.norm_w = 10.0 / np.sqrt(n_vox)

    kc = [o for o in observations if o.known_albedo is not None]
    if kc:
        pts = np.stack([o.p for o in kc])
        colors = np.stack([o.color for o in kc])
        albedos = np.stack([o.known_albedo for o in kc])
        w = np.stack([o.weight if o.weight is not None else np.full(3, np.nan) for o in kc])
        missing = ~np.isfinite(w[:, 0])
        if np.any(missing):
            w[missing] = observation_weights(pts[missing], colors[missing], spec, stats)
        for o, wi in zip(kc, w):
            o.weight = wi
        flat, t = _trilinear_footprints(pts, spec)
        np.add.at(obs_count, flat.ravel(), t.ravel())
        for c, sys_c in enumerate(systems):
            sys_c.kc_idx, sys_c.kc_t = flat, t
            sys_c.kc_albedo = albedos[:, c]
            sys_c.kc_intensity = colors[:, c]
            sys_c.kc_w = w[:, c]

    if pairs:
        p1 = np.stack([p.a.p for p in pairs])
        p2 = np.stack([p.b.p for p in pairs])
        i1 = np.stack([p.a.color for p in pairs])
        i2 = np.stack([p.b.color for p in pairs])
        w1 = observation_weights(p1, i1, spec, stats)
        w2 = observation_weights(p2, i2, spec, stats)
        wc = correspondence_weight(w1, w2)
        for p, wa, wb in zip(pairs, w1, w2):
            p.a.weight, p.b.weight = wa, wb
        f1, t1 = _trilinear_footprints(p1, spec)
        f2, t2 = _trilinear_footprints(p2, spec)
        np.add.at(obs_count, f1.ravel(), t1.ravel())
        np.add.at(obs_count, f2.ravel(), t2.ravel())
        for c, sys_c in enumerate(systems):
            sys_c.co_idx1, sys_c.co_t1 = f1, t1
            sys_c.co_idx2, sys_c.co_t2 = f2, t2
            sys_c.co_i1, sys_c.co_i2 = i1[:, c], i2[:, c]
            sys_c.co_w = wc[:, c]

    if pure_water_rays and estimate_beta:
        all_idx, all_t, all_bounds = [], [], []
        for rays in pure_water_rays:
            if not rays:
                continue
            us = np.array([r.pixel[0] for r in rays], dtype=float)
            vs = np.array([r.pixel[1] for r in rays], dtype=float)
            bounds = np.stack([r.intensity for r in rays])
            gx = us / spec.intr.width * (spec.nx - 1)
            gy = vs / spec.intr.height * (spec.ny - 1)
            for k in range(spec.nz):
                ix, iy, iz, t = _corner_arrays(gx, gy, np.full_like(gx, float(k)), spec)
                all_idx.append(np.ravel_multi_index((ix, iy, iz), spec.shape))
                all_t.append(t)
                all_bounds.append(bounds)
        if all_idx:
            idx = np.concatenate(all_idx)
            t = np.concatenate(all_t)
            bounds = np.concatenate(all_bounds)
            for c, sys_c in enumerate(systems):
                sys_c.pw_idx, sys_c.pw_t = idx, t
                sys_c.pw_bound = bounds[:, c]
                sys_c.pw_w = weight_set.pure_water

    return ConstraintSystem(spec=spec, channels=systems,
                            obs_count=obs_count.reshape(spec.shape))
