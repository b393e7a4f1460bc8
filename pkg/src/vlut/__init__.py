"""vlut: volumetric lookup-table calibration and restoration.

Estimates per-voxel multiplicative (alpha) and additive (beta) light/medium
factors over a camera's viewing frustum from constrained image observations,
then batch-restores image sequences. Ships a forward simulator that doubles
as the verification oracle.
"""

from .geometry import CameraIntrinsics, Pose, backproject, normals_from_depth, project, shading_compensate
from .lut import (FrustumSpec, GridLocation, LookupTable, OutOfFrustumError,
                  deserialize, load, locate, sample, save, serialize, upsample)
from .dataset import (CalibrationData, CorrespondencePair, FrameEntry, FrameManifest,
                      Observation, SuperpixelMap, extract_calibration_data,
                      extract_correspondences, extract_known_color_samples,
                      load_frame, slic_superpixels)
from .weights import ReferenceStats, WeightSet, correspondence_weight, observation_weight, reference_stats, smooth_weights
from .constraints import ConstraintSystem, ResidualBlock, UnconstrainedSystemError, build_system
from .solver import InvalidAnchorError, SolveOptions, SolveReport, calibrate_hierarchical, fix_scale, solve_level
from .restore import RestoredFrame, RestoreOptions, confidence_map, restore_batch, restore_image
from .simulate import (LightSource, PlaneTarget, SceneSpec, WaterParams, WATER_PRESETS,
                       ground_truth_lut, make_dataset, pure_water_image, reference_lut, render_frame)
from .estimator import LookupTableCalibrator

__version__ = "0.1.0"
