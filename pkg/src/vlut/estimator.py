"""Scikit-learn style wrapper: fit a lookup table from a manifest, transform frames."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import FrameManifest, extract_calibration_data, load_frame
from .lut import FrustumSpec
from .restore import RestoreOptions, RestoredFrame, restore_image
from .solver import SolveOptions, calibrate_hierarchical, fix_scale


class LookupTableCalibrator(BaseEstimator, TransformerMixin):
    """Estimates the frustum lookup table from a calibration dataset.

    ``fit`` consumes a FrameManifest (or a path to one) and estimates the
    voxel parameters with the hierarchical solver; ``transform`` restores
    depth-bearing frames with the fitted table. Follows the scikit-learn
    estimator conventions (get_params/set_params, trailing-underscore
    fitted attributes ``lut_`` and ``report_``).
    """

    def __init__(self, z_near: float = 0.5, z_far: float = 2.5,
                 schedule=((4, 3, 10), (40, 30, 10)), mode: str = "known_color",
                 estimate_beta: bool = True, use_pure_water: bool = True,
                 medium: str = "water", stride: int = 2, superpixels: int = 300,
                 max_iterations: int = 50, anchor_voxel=None, anchor_alpha=None,
                 shading: bool = True):
        self.z_near = z_near
        self.z_far = z_far
        self.schedule = schedule
        self.mode = mode
        self.estimate_beta = estimate_beta
        self.use_pure_water = use_pure_water
        self.medium = medium
        self.stride = stride
        self.superpixels = superpixels
        self.max_iterations = max_iterations
        self.anchor_voxel = anchor_voxel
        self.anchor_alpha = anchor_alpha
        self.shading = shading

    def _as_manifest(self, X) -> FrameManifest:
        if isinstance(X, FrameManifest):
            return X
        if isinstance(X, (str, Path)):
            return FrameManifest.load(X)
        raise TypeError("expected a FrameManifest or a path to a manifest.json")

    def fit(self, X, y=None):
        manifest = self._as_manifest(X)
        schedule = [tuple(int(v) for v in dims) for dims in self.schedule]
        frustum = FrustumSpec(self.z_near, self.z_far, *schedule[-1], manifest.intrinsics)
        opts = SolveOptions(schedule=schedule, mode=self.mode,
                            estimate_beta=self.estimate_beta,
                            use_pure_water=self.use_pure_water, medium=self.medium,
                            max_iterations=self.max_iterations)
        data = extract_calibration_data(
            manifest, frustum, stride=self.stride,
            use_correspondences=(self.mode == "correspondence_only"),
            superpixels=self.superpixels)
        lut, report = calibrate_hierarchical(data, frustum, opts)
        if self.anchor_voxel is not None and self.anchor_alpha is not None:
            lut = fix_scale(lut, tuple(self.anchor_voxel), np.asarray(self.anchor_alpha, dtype=float))
        self.lut_ = lut
        self.report_ = report
        return self

    def transform(self, X) -> list[RestoredFrame]:
        """Restore every depth-bearing frame of the manifest with the fitted table."""
        check_is_fitted(self, "lut_")
        manifest = self._as_manifest(X)
        opts = RestoreOptions(shading=self.shading)
        out = []
        for entry in manifest.frames:
            if entry.depth is None:
                continue
            frame = load_frame(manifest, entry)
            out.append(restore_image(frame.image, frame.depth, self.lut_, opts))
        return out
