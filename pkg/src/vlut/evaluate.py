"""Restoration quality evaluation against ground-truth annotations."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import image_io
from .dataset import FrameManifest


@dataclass
class PatchError:
    frame_id: str
    patch_index: int
    albedo: np.ndarray
    measured: np.ndarray
    error_pct: np.ndarray      # per-channel absolute error in percent of full scale
    coverage: float            # mean confidence/validity proxy over the patch

    def to_dict(self) -> dict:
        return {"frame": self.frame_id, "patch": self.patch_index,
                "albedo": self.albedo.tolist(), "measured": self.measured.tolist(),
                "error_pct": self.error_pct.tolist(), "coverage": self.coverage}


def _load_restored(restored_dir: Path, frame_id: str) -> np.ndarray:
    pfm = restored_dir / f"{frame_id}_restored.pfm"
    png = restored_dir / f"{frame_id}_restored.png"
    if pfm.exists():
        return image_io.read_pfm(pfm)
    if png.exists():
        return image_io.read_png(png)
    raise FileNotFoundError(f"no restored output for frame {frame_id} in {restored_dir}")


def patch_errors(manifest: FrameManifest, restored_dir, coverage_maps: dict | None = None,
                 roles: tuple[str, ...] = ("test",)) -> list[PatchError]:
    """Mean absolute per-patch restoration error in percent of full scale.

    Frames must carry patch annotations (pixel rects with true albedo);
    coverage_maps optionally supplies per-frame HxW support/validity maps
    whose patch means are reported as coverage.
    """
    restored_dir = Path(restored_dir)
    rows = []
    for entry in manifest.frames:
        if entry.role not in roles or not entry.patches:
            continue
        restored = _load_restored(restored_dir, entry.frame_id)
        for k, patch in enumerate(entry.patches):
            x0, y0, x1, y1 = patch.rect
            region = restored[y0:y1, x0:x1].reshape(-1, 3)
            measured = region.mean(axis=0)
            error = np.abs(measured - patch.albedo) * 100.0
            cov = 1.0
            if coverage_maps is not None and entry.frame_id in coverage_maps:
                cov = float(np.mean(coverage_maps[entry.frame_id][y0:y1, x0:x1]))
            rows.append(PatchError(entry.frame_id, k, np.asarray(patch.albedo, dtype=float),
                                   measured, error, cov))
    return rows


def distance_std_curve(manifest: FrameManifest, restored_dir,
                       roles: tuple[str, ...] = ("test",)) -> dict:
    """Per-distance standard deviation of restored single-albedo board frames.

    Uses frames that carry a distance and a single region annotation; the std
    is computed inside the annotated region, averaged over channels.
    """
    restored_dir = Path(restored_dir)
    by_distance: dict[float, list[float]] = {}
    for entry in manifest.frames:
        if entry.role not in roles or entry.distance is None or len(entry.annotations) != 1:
            continue
        ann = entry.annotations[0]
        if ann.mask is None:
            continue
        mask = image_io.read_mask(manifest.resolve(ann.mask))
        restored = _load_restored(restored_dir, entry.frame_id)
        vals = restored[mask]
        std = float(np.mean(vals.std(axis=0)))
        by_distance.setdefault(round(float(entry.distance), 6), []).append(std)
    distances = sorted(by_distance)
    return {"distance": distances,
            "std": [float(np.mean(by_distance[d])) for d in distances]}


def error_table(rows: list[PatchError]) -> dict:
    """Aggregate patch errors into the summary the CLI emits."""
    if not rows:
        return {"patches": [], "fraction_below_10pct": None, "fraction_below_25pct": None}
    errs = np.concatenate([r.error_pct for r in rows])
    return {
        "patches": [r.to_dict() for r in rows],
        "n_patch_channels": int(errs.size),
        "fraction_below_10pct": float(np.mean(errs < 10.0)),
        "fraction_below_25pct": float(np.mean(errs < 25.0)),
        "max_error_pct": float(errs.max()),
        "mean_error_pct": float(errs.mean()),
    }
