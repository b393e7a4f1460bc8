"""Levenberg-Marquardt estimation of the lookup table with a coarse-to-fine schedule.

Per channel the damped normal equations (J^T J + lambda diag(J^T J)) delta =
-J^T r are solved (dense Cholesky for small systems, Jacobi-preconditioned CG
for large ones); a step is accepted only if it decreases the cost. Accepted
iterates are projected onto the feasible set (alpha >= eps, beta >= 0). After
the last iteration beta corners are clamped under the pure-water bounds so the
hinge constraints hold exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import simulate
from .constraints import (ChannelSystem, ConstraintSystem, build_system,
                          pure_water_rays_from_image)
from .dataset import CalibrationData
from .lut import FrustumSpec, LookupTable, grid_coords, upsample
from .weights import reference_stats, smooth_weights


class InvalidAnchorError(Exception):
    """The anchor voxel cannot provide a scale (no support or vanishing alpha)."""


@dataclass
class SolveOptions:
    schedule: list[tuple[int, int, int]]
    max_iterations: int = 50
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    lambda_max: float = 1e10
    rel_tol: float = 1e-6
    epsilon: float = 1e-6            # positivity floor for alpha
    mode: str = "known_color"        # known_color | correspondence_only
    estimate_beta: bool = True
    medium: str = "water"            # reference table medium: water | in_air
    use_pure_water: bool = True
    dense_threshold: int = 2000
    cg_tol: float = 1e-8
    cg_maxiter: int = 600

    def __post_init__(self):
        if not self.schedule:
            raise ValueError("schedule must contain at least one level")
        prev = (1, 1, 1)
        for dims in self.schedule:
            if any(d < p for d, p in zip(dims, prev)):
                raise ValueError("pyramid schedule must be non-decreasing per axis")
            prev = dims
        if self.mode not in ("known_color", "correspondence_only"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class ChannelInfo:
    initial_cost: float
    final_cost: float
    iterations: int
    accepted: int
    rejected: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"initial_cost": self.initial_cost, "final_cost": self.final_cost,
                "iterations": self.iterations, "accepted": self.accepted,
                "rejected": self.rejected, "degenerate": self.degenerate}


@dataclass
class LevelReport:
    resolution: tuple[int, int, int]
    channels: list[ChannelInfo]
    wall_time: float

    @property
    def initial_cost(self) -> float:
        return sum(c.initial_cost for c in self.channels)

    @property
    def final_cost(self) -> float:
        return sum(c.final_cost for c in self.channels)

    def to_dict(self) -> dict:
        return {"resolution": list(self.resolution),
                "initial_cost": self.initial_cost, "final_cost": self.final_cost,
                "channels": [c.to_dict() for c in self.channels],
                "wall_time": self.wall_time}


@dataclass
class SolveReport:
    levels: list[LevelReport] = field(default_factory=list)
    support: dict = field(default_factory=dict)
    wall_time: float = 0.0
    mode: str = "known_color"

    def to_dict(self) -> dict:
        return {"mode": self.mode, "wall_time": self.wall_time,
                "support": self.support, "levels": [l.to_dict() for l in self.levels]}


def _solve_normal_equations(H: sp.csr_matrix, g: np.ndarray, lam: float,
                            free: np.ndarray, opts: SolveOptions) -> np.ndarray | None:
    """One damped step on the free parameters; None if the system is singular."""
    Hf = H[free][:, free]
    gf = g[free]
    diag = np.asarray(Hf.diagonal())
    damped_diag = diag + lam * diag
    n_free = gf.size
    if n_free <= opts.dense_threshold:
        A = Hf.toarray()
        A[np.arange(n_free), np.arange(n_free)] = damped_diag
        try:
            step_f = np.linalg.solve(A, -gf)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(step_f)):
            return None
    else:
        A = Hf + sp.diags(lam * diag)
        safe = np.where(damped_diag > 0, damped_diag, 1.0)
        M = spla.LinearOperator((n_free, n_free), matvec=lambda x: x / safe)
        step_f, _ = spla.cg(A, -gf, rtol=opts.cg_tol, atol=0.0,
                            maxiter=opts.cg_maxiter, M=M)
        if not np.all(np.isfinite(step_f)):
            return None
    step = np.zeros(free.size)
    step[free] = step_f
    return step


def _project(params: np.ndarray, system: ChannelSystem, opts: SolveOptions,
             beta_upper: np.ndarray | None = None) -> np.ndarray:
    """Feasibility projection: alpha >= eps, 0 <= beta <= pure-water cap.

    Keeping the pure-water cap inside the iteration (rather than one clamp
    after the solve) preserves the accepted-cost monotonicity; the voxel cap
    is sufficient for every interpolated hinge bound, so the hinge residuals
    are exactly zero at the output.
    """
    n = system.n_vox
    out = params.copy()
    out[:n] = np.maximum(out[:n], opts.epsilon)
    if beta_upper is None:
        out[n:] = np.maximum(out[n:], 0.0)
    else:
        out[n:] = np.clip(out[n:], 0.0, beta_upper)
    return out


def _at_bound_mask(p: np.ndarray, g: np.ndarray, system: ChannelSystem,
                   opts: SolveOptions, beta_upper: np.ndarray) -> np.ndarray:
    """Parameters pinned at a bound with an inward-pushing gradient.

    Freezing them for the step avoids the projected-Newton zigzag where the
    unconstrained optimum lies outside the feasible box.
    """
    n = system.n_vox
    at_lower = np.empty(p.size, dtype=bool)
    at_lower[:n] = p[:n] <= opts.epsilon * (1 + 1e-9)
    at_lower[n:] = p[n:] <= 1e-15
    pinned = at_lower & (g > 0)
    at_upper = np.zeros(p.size, dtype=bool)
    finite = np.isfinite(beta_upper)
    at_upper[n:][finite] = p[n:][finite] >= beta_upper[finite] * (1 - 1e-12)
    return pinned | (at_upper & (g < 0))


def _solve_channel(system: ChannelSystem, p0: np.ndarray, opts: SolveOptions):
    free = system.free_mask()
    beta_upper = system.beta_upper_bounds()
    p = _project(p0, system, opts, beta_upper)
    cost = system.cost(p)
    info = ChannelInfo(initial_cost=cost, final_cost=cost, iterations=0,
                       accepted=0, rejected=0)
    lam = opts.lambda0
    for _ in range(opts.max_iterations):
        J = system.jacobian(p)
        r = system.residuals(p)
        g = np.asarray(J.T @ r).ravel()
        active = free & ~_at_bound_mask(p, g, system, opts, beta_upper)
        if not np.any(active) or np.linalg.norm(g[active]) < 1e-14 * (1.0 + cost):
            break
        H = (J.T @ J).tocsr()
        info.iterations += 1
        improved = False
        while lam <= opts.lambda_max:
            step = _solve_normal_equations(H, g, lam, active, opts)
            if step is not None:
                candidate = _project(p + step, system, opts, beta_upper)
                new_cost = system.cost(candidate)
                if new_cost < cost:
                    rel = (cost - new_cost) / cost if cost > 0 else 0.0
                    p, cost = candidate, new_cost
                    lam = max(lam * opts.lambda_down, 1e-12)
                    info.accepted += 1
                    improved = True
                    break
            lam *= opts.lambda_up
            info.rejected += 1
        if not improved:
            info.degenerate = lam > opts.lambda_max and system.cost(p) > 0
            break
        if rel < opts.rel_tol:
            break
    info.final_cost = cost
    return p, info


def solve_level(system: ConstraintSystem, lut_init: LookupTable,
                opts: SolveOptions) -> tuple[LookupTable, LevelReport]:
    """Minimize one resolution level starting from `lut_init`."""
    if system.spec.shape != lut_init.spec.shape:
        raise ValueError("system and initial table resolutions differ")
    t0 = time.monotonic()
    lut = lut_init.copy()
    n = system.n_voxels
    infos = []
    for c, chan in enumerate(system.channels):
        p0 = np.concatenate([lut.alpha[..., c].ravel(), lut.beta[..., c].ravel()])
        p, info = _solve_channel(chan, p0, opts)
        lut.alpha[..., c] = p[:n].reshape(system.spec.shape)
        lut.beta[..., c] = p[n:].reshape(system.spec.shape)
        infos.append(info)
    lut.obs_count = system.obs_count.copy()
    report = LevelReport(resolution=system.spec.shape, channels=infos,
                         wall_time=time.monotonic() - t0)
    return lut, report


def _initial_table(data: CalibrationData, spec: FrustumSpec, opts: SolveOptions) -> LookupTable:
    """Coarsest-level initialization.

    Known-colour mode: per-slab gray-world alpha (mean compensated intensity
    over 0.7) and a feasible beta underestimate (half the slab minimum).
    Correspondence mode: uniform alpha summing to one per channel.
    """
    nz = spec.nz
    points, colors = [], []
    for o in data.observations:
        points.append(o.p)
        colors.append(o.color)
    for pr in data.pairs:
        points.extend([pr.a.p, pr.b.p])
        colors.extend([pr.a.color, pr.b.color])
    alpha0 = np.ones((nz, 3))
    beta0 = np.zeros((nz, 3))
    if points:
        pts = np.stack(points)
        cols = np.stack(colors)
        _, _, gz = grid_coords(pts, spec, clamp=True)
        slab = np.clip(np.round(gz).astype(int), 0, nz - 1)
        global_mean = cols.mean(axis=0)
        global_min = cols.min(axis=0)
        for k in range(nz):
            sel = slab == k
            mean_k = cols[sel].mean(axis=0) if np.any(sel) else global_mean
            min_k = cols[sel].min(axis=0) if np.any(sel) else global_min
            alpha0[k] = np.clip(mean_k / 0.7, opts.epsilon, 5.0)
            beta0[k] = 0.5 * np.maximum(min_k, 0.0)
    lut = LookupTable.constant(spec)
    if opts.mode == "correspondence_only":
        lut.alpha[:] = 1.0 / spec.n_voxels
        lut.beta[:] = beta0[None, None, :, :] if opts.estimate_beta else 0.0
    else:
        lut.alpha[:] = alpha0[None, None, :, :]
        lut.beta[:] = beta0[None, None, :, :]
    if not opts.estimate_beta:
        lut.beta[:] = 0.0
    return lut


def calibrate_hierarchical(data: CalibrationData, frustum: FrustumSpec,
                           opts: SolveOptions) -> tuple[LookupTable, SolveReport]:
    """Coarse-to-fine calibration; each level seeds the next via upsampling."""
    if tuple(opts.schedule[-1]) != frustum.shape:
        raise ValueError("final schedule level must equal the target resolution")
    t0 = time.monotonic()
    report = SolveReport(mode=opts.mode)
    lut: LookupTable | None = None
    for dims in opts.schedule:
        spec_l = frustum.with_resolution(*dims)
        if lut is None:
            lut = _initial_table(data, spec_l, opts)
        elif lut.spec.shape != tuple(dims):
            lut = upsample(lut, *dims)
        ref = simulate.reference_lut(spec_l, medium=opts.medium)
        stats = reference_stats(ref)
        wset = smooth_weights(stats)
        rays = ([pure_water_rays_from_image(img, spec_l) for img in data.pure_water_images]
                if opts.use_pure_water else [])
        for o in data.observations:
            o.weight = None          # weights are resolution-dependent
        system = build_system(data.observations, data.pairs, rays, lut, wset, stats,
                              mode=opts.mode, estimate_beta=opts.estimate_beta)
        lut, level_report = solve_level(system, lut, opts)
        report.levels.append(level_report)
    support = lut.obs_count
    report.support = {
        "min": float(support.min()), "max": float(support.max()),
        "mean": float(support.mean()),
        "fraction_at_least_8": float(np.mean(support >= 8.0)),
    }
    report.wall_time = time.monotonic() - t0
    return lut, report


def fix_scale(lut: LookupTable, anchor_voxel: tuple[int, int, int],
              anchor_alpha, epsilon: float = 1e-6) -> LookupTable:
    """Rescale all alpha so the anchor voxel takes its known absolute value.

    Used after correspondence-only calibration, whose alpha is only defined up
    to the normalization scale. Beta is left untouched.
    """
    i, j, k = anchor_voxel
    if lut.obs_count[i, j, k] <= 0:
        raise InvalidAnchorError(f"anchor voxel {anchor_voxel} has no observation support")
    current = lut.alpha[i, j, k]
    if np.any(current < epsilon):
        raise InvalidAnchorError(f"anchor voxel {anchor_voxel} alpha below {epsilon}")
    scale = np.asarray(anchor_alpha, dtype=float) / current
    out = lut.copy()
    out.alpha *= scale[None, None, None, :]
    return out
