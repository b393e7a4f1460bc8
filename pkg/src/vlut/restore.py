"""Apply a calibrated lookup table: restored albedo, confidence maps, batch runs."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import image_io
from .dataset import FrameManifest, load_frame
from .geometry import DEFAULT_COS_MIN, cosine_map, normals_from_depth
from .lut import LookupTable, _corner_arrays, _gather, grid_coords
from .weights import reference_stats

THREADS_ENV = "VLUT_THREADS"


@dataclass
class RestoreOptions:
    shading: bool = True            # divide by the incidence cosine first
    cos_min: float = DEFAULT_COS_MIN
    alpha_min: float = 1e-3         # below this the inversion is meaningless
    clamp_output: bool = False      # write 16-bit PNG in [0, 1] instead of PFM
    n_min: float = 8.0              # voxel support at which coverage saturates
    overexposure: float = 0.98


@dataclass
class RestoredFrame:
    albedo: np.ndarray       # HxWx3, may exceed [0, 1]
    confidence: np.ndarray   # HxWx3 in [0, 1]
    valid: np.ndarray        # HxW


def _sample_lut_grid(depth: np.ndarray, lut: LookupTable):
    """Clamped trilinear (alpha, beta, support, slab) maps for a depth image."""
    intr = lut.spec.intr
    h, w = depth.shape
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    safe = np.where(np.isfinite(depth) & (depth > 0), depth, lut.spec.z_near)
    pts = np.stack([(u - intr.cx) * safe / intr.fx,
                    (v - intr.cy) * safe / intr.fy, safe], axis=-1)
    gx, gy, gz = grid_coords(pts, lut.spec, clamp=True)
    ix, iy, iz, wgt = _corner_arrays(gx, gy, gz, lut.spec)
    alpha = _gather(lut.alpha, ix, iy, iz, wgt)
    beta = _gather(lut.beta, ix, iy, iz, wgt)
    support = _gather(lut.obs_count, ix, iy, iz, wgt)
    slab = np.clip(np.round(gz).astype(int), 0, lut.spec.nz - 1)
    return alpha, beta, support, slab


def confidence_map(image: np.ndarray, depth: np.ndarray, lut: LookupTable,
                   opts: RestoreOptions | None = None) -> np.ndarray:
    """Per-channel restoration confidence in [0, 1].

    Product of an SNR factor (observed intensity against the slab's gray-world
    mean), a coverage factor (interpolated voxel support over n_min), and an
    overexposure gate. Pixels without valid depth get zero confidence.
    """
    opts = opts or RestoreOptions()
    if image.shape[:2] != depth.shape:
        raise ValueError("image and depth dimensions differ")
    _, _, support, slab = _sample_lut_grid(depth, lut)
    stats = reference_stats(lut)
    mean_n = np.maximum(stats.mean[slab], 1e-9)
    q_snr = np.clip(image / mean_n, 0.0, 1.0)
    q_cov = np.clip(support / opts.n_min, 0.0, 1.0)[..., None]
    q_exp = (image <= opts.overexposure).astype(float)
    conf = q_snr * q_cov * q_exp
    conf[~(np.isfinite(depth) & (depth > 0))] = 0.0
    return conf


def restore_image(image: np.ndarray, depth: np.ndarray, lut: LookupTable,
                  opts: RestoreOptions | None = None) -> RestoredFrame:
    """Invert the image formation per pixel: albedo = (I - beta) / alpha.

    Depths outside the frustum clamp to the nearest slab. Pixels with missing
    depth, grazing incidence (when shading compensation is on), or vanishing
    alpha are flagged invalid.
    """
    opts = opts or RestoreOptions()
    intr = lut.spec.intr
    if image.shape[:2] != depth.shape:
        raise ValueError("image and depth dimensions differ")
    if image.shape[:2] != (intr.height, intr.width):
        raise ValueError("image does not match the table's camera size")
    valid = np.isfinite(depth) & (depth > 0)
    compensated = np.array(image, dtype=float)
    if opts.shading:
        normals = normals_from_depth(depth, intr)
        cos = cosine_map(depth, normals, intr)
        ok = np.isfinite(cos) & (cos >= opts.cos_min)
        valid = valid & ok
        compensated = compensated / np.where(ok, cos, 1.0)[..., None]
    alpha, beta, _, _ = _sample_lut_grid(depth, lut)
    valid = valid & np.all(alpha >= opts.alpha_min, axis=-1)
    albedo = (compensated - beta) / np.maximum(alpha, opts.alpha_min)
    albedo[~valid] = 0.0
    conf = confidence_map(image, depth, lut, opts)
    conf[~valid] = 0.0
    return RestoredFrame(albedo=albedo, confidence=conf, valid=valid)


def _output_paths(out_dir: Path, frame_id: str, clamp: bool):
    suffix = "png" if clamp else "pfm"
    return (out_dir / f"{frame_id}_restored.{suffix}",
            out_dir / f"{frame_id}_confidence.png")


def restore_batch(manifest: FrameManifest, lut: LookupTable, out_dir,
                  opts: RestoreOptions | None = None,
                  roles: tuple[str, ...] | None = None) -> dict:
    """Restore every depth-bearing frame with one immutable table.

    Frames without depth are skipped (reported in the summary). Set the
    VLUT_THREADS environment variable to restore frames in parallel.
    """
    opts = opts or RestoreOptions()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = [f for f in manifest.frames if roles is None or f.role in roles]
    t0 = time.monotonic()
    skipped = [f.frame_id for f in frames if f.depth is None]
    todo = [f for f in frames if f.depth is not None]

    def run(entry):
        frame = load_frame(manifest, entry)
        restored = restore_image(frame.image, frame.depth, lut, opts)
        restored_path, conf_path = _output_paths(out_dir, entry.frame_id, opts.clamp_output)
        if opts.clamp_output:
            image_io.write_png(restored_path, np.clip(restored.albedo, 0.0, 1.0), bits=16)
        else:
            image_io.write_pfm(restored_path, restored.albedo)
        image_io.write_png(conf_path, restored.confidence, bits=8)
        return entry.frame_id, float(np.mean(~restored.valid)), str(restored_path)

    workers = max(1, int(os.environ.get(THREADS_ENV, "1")))
    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, todo))
    else:
        results = [run(entry) for entry in todo]

    return {
        "restored": len(results),
        "skipped": skipped,
        "invalid_fraction": {fid: frac for fid, frac, _ in results},
        "outputs": {fid: path for fid, _, path in results},
        "wall_time": time.monotonic() - t0,
    }
