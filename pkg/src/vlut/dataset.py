"""Dataset ingestion: manifests, frame loading, color-sample and correspondence extraction."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.segmentation import slic as skimage_slic

from . import image_io
from .geometry import (CameraIntrinsics, Pose, backproject, cosine_map,
                       normals_from_depth, project, DEFAULT_COS_MIN)
from .lut import FrustumSpec, OutOfFrustumError, grid_coords

# Per-channel colour standard deviation above which a patch is not homogeneous
# enough to provide a reliable colour sample.
SIGMA_MAX = 0.03
# Relative depth agreement required to accept a reprojected correspondence.
DEPTH_TOL = 0.02
# Keep at most this many observations per voxel (nearest to the center first).
VOXEL_CAP = 50


class FrameLoadError(Exception):
    """A frame's files are missing, unreadable, or inconsistent."""


@dataclass
class RegionAnnotation:
    """Known-albedo image region: PNG mask (nonzero = inside) plus reference RGB."""

    albedo: np.ndarray
    mask: str | None = None

    def to_dict(self) -> dict:
        d = {"albedo": list(np.asarray(self.albedo, dtype=float))}
        if self.mask is not None:
            d["mask"] = self.mask
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegionAnnotation":
        return cls(albedo=np.asarray(d["albedo"], dtype=float), mask=d.get("mask"))


@dataclass
class PatchAnnotation:
    """Ground-truth evaluation patch: pixel rect [x0, y0, x1, y1) and true albedo."""

    rect: tuple[int, int, int, int]
    albedo: np.ndarray

    def to_dict(self) -> dict:
        return {"rect": [int(v) for v in self.rect],
                "albedo": list(np.asarray(self.albedo, dtype=float))}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchAnnotation":
        return cls(rect=tuple(int(v) for v in d["rect"]),
                   albedo=np.asarray(d["albedo"], dtype=float))


@dataclass
class FrameEntry:
    frame_id: str
    image: str
    depth: str | None = None
    pose: Pose | None = None
    role: str = "calibration"       # calibration | pure_water | test
    gamma: str = "linear"           # linear | srgb
    annotations: list[RegionAnnotation] = field(default_factory=list)
    patches: list[PatchAnnotation] = field(default_factory=list)
    distance: float | None = None

    def to_dict(self) -> dict:
        d: dict = {"id": self.frame_id, "image": self.image, "role": self.role,
                   "gamma": self.gamma}
        if self.depth is not None:
            d["depth"] = self.depth
        if self.pose is not None:
            d["pose"] = self.pose.to_dict()
        if self.annotations:
            d["annotations"] = [a.to_dict() for a in self.annotations]
        if self.patches:
            d["patches"] = [p.to_dict() for p in self.patches]
        if self.distance is not None:
            d["distance"] = float(self.distance)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FrameEntry":
        return cls(
            frame_id=str(d["id"]),
            image=d["image"],
            depth=d.get("depth"),
            pose=Pose.from_dict(d["pose"]) if "pose" in d else None,
            role=d.get("role", "calibration"),
            gamma=d.get("gamma", "linear"),
            annotations=[RegionAnnotation.from_dict(a) for a in d.get("annotations", [])],
            patches=[PatchAnnotation.from_dict(p) for p in d.get("patches", [])],
            distance=d.get("distance"),
        )


@dataclass
class FrameManifest:
    """Binds images, depth maps, poses, and annotations for a whole acquisition."""

    intrinsics: CameraIntrinsics
    frames: list[FrameEntry]
    base_dir: Path = Path(".")
    metadata: dict = field(default_factory=dict)

    def resolve(self, rel: str) -> Path:
        return self.base_dir / rel

    def by_role(self, role: str) -> list[FrameEntry]:
        return [f for f in self.frames if f.role == role]

    def validate(self, check_files: bool = True) -> None:
        for f in self.frames:
            if f.role == "calibration" and f.depth is None:
                raise FrameLoadError(f"calibration frame {f.frame_id} has no depth map")
            if check_files:
                for rel in filter(None, [f.image, f.depth] + [a.mask for a in f.annotations]):
                    if not self.resolve(rel).exists():
                        raise FrameLoadError(f"frame {f.frame_id}: missing file {rel}")

    def save(self, path) -> None:
        doc = {
            "intrinsics": self.intrinsics.to_dict(),
            "metadata": self.metadata,
            "frames": [f.to_dict() for f in self.frames],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def load(cls, path, check_files: bool = True) -> "FrameManifest":
        path = Path(path)
        with open(path) as fh:
            doc = json.load(fh)
        manifest = cls(
            intrinsics=CameraIntrinsics.from_dict(doc["intrinsics"]),
            frames=[FrameEntry.from_dict(f) for f in doc["frames"]],
            base_dir=path.parent,
            metadata=doc.get("metadata", {}),
        )
        manifest.validate(check_files=check_files)
        return manifest


@dataclass
class Observation:
    """One shading-compensated colour sample placed in the camera frustum."""

    color: np.ndarray                 # RGB, linear, compensated
    p: np.ndarray                     # camera-frame position (3,)
    frame_id: str
    known_albedo: np.ndarray | None = None
    weight: np.ndarray | None = None  # per-channel, filled by the weights ops


@dataclass
class CorrespondencePair:
    """Two observations of the same surface point from different frames."""

    a: Observation
    b: Observation

    def __post_init__(self):
        if self.a.frame_id == self.b.frame_id:
            raise ValueError("correspondence endpoints must come from different frames")


@dataclass
class SuperpixelMap:
    labels: np.ndarray      # (H, W) int, contiguous 0..K-1
    centroids: np.ndarray   # (K, 2) pixel coordinates (u, v)
    mean_color: np.ndarray  # (K, 3)
    color_std: np.ndarray   # (K, 3)
    counts: np.ndarray      # (K,)

    @property
    def n_labels(self) -> int:
        return len(self.counts)


@dataclass
class LoadedFrame:
    entry: FrameEntry
    image: np.ndarray
    depth: np.ndarray | None
    pose: Pose | None
    _normals: np.ndarray | None = None

    def normals(self, intr: CameraIntrinsics) -> np.ndarray:
        if self._normals is None:
            if self.depth is None:
                raise FrameLoadError(f"frame {self.entry.frame_id} has no depth for normals")
            self._normals = normals_from_depth(self.depth, intr)
        return self._normals


def load_frame(manifest: FrameManifest, entry: FrameEntry) -> LoadedFrame:
    """Load one frame's image (linearized) and depth map."""
    try:
        image = image_io.read_image(manifest.resolve(entry.image), gamma=entry.gamma)
    except Exception as exc:
        raise FrameLoadError(f"frame {entry.frame_id}: cannot load image ({exc})") from exc
    depth = None
    if entry.depth is not None:
        try:
            depth = image_io.read_depth(manifest.resolve(entry.depth))
        except Exception as exc:
            raise FrameLoadError(f"frame {entry.frame_id}: cannot load depth ({exc})") from exc
        if depth.shape != image.shape[:2]:
            raise FrameLoadError(
                f"frame {entry.frame_id}: depth {depth.shape} does not match image {image.shape[:2]}")
    return LoadedFrame(entry, image, depth, entry.pose)


def extract_known_color_samples(frame: LoadedFrame, annotation: RegionAnnotation,
                                intr: CameraIntrinsics, mask: np.ndarray | None = None,
                                stride: int | tuple[int, int] = 4,
                                cos_min: float = DEFAULT_COS_MIN) -> list[Observation]:
    """Sample the annotated region on a stride lattice and shading-compensate.

    Samples with invalid depth, invalid normals, or grazing incidence are
    dropped silently; an empty result emits a warning.
    """
    if frame.depth is None:
        raise FrameLoadError(f"frame {frame.entry.frame_id} has no depth map")
    sx, sy = (stride, stride) if isinstance(stride, int) else stride
    h, w = frame.depth.shape
    us = np.arange(sx // 2, w, sx)
    vs = np.arange(sy // 2, h, sy)
    uu, vv = np.meshgrid(us, vs)
    uu, vv = uu.ravel(), vv.ravel()

    inside = np.ones(uu.shape, dtype=bool)
    if mask is not None:
        inside &= mask[vv, uu]
    depth = frame.depth[vv, uu]
    inside &= np.isfinite(depth)
    normals = frame.normals(intr)[vv, uu]
    inside &= np.isfinite(normals[:, 0])

    uu, vv, depth, normals = uu[inside], vv[inside], depth[inside], normals[inside]
    if uu.size == 0:
        warnings.warn(f"frame {frame.entry.frame_id}: no usable samples in region")
        return []
    p = backproject((uu, vv), depth, intr)
    view = -p / np.linalg.norm(p, axis=-1, keepdims=True)
    cos = np.clip(np.sum(normals * view, axis=-1), 0.0, None)
    usable = cos >= cos_min
    if not np.any(usable):
        warnings.warn(f"frame {frame.entry.frame_id}: all samples rejected at grazing angles")
        return []
    colors = frame.image[vv[usable], uu[usable]] / cos[usable, None]
    albedo = np.asarray(annotation.albedo, dtype=float)
    fid = frame.entry.frame_id
    return [Observation(color=c, p=pt, frame_id=fid, known_albedo=albedo)
            for c, pt in zip(colors, p[usable])]


def slic_superpixels(image: np.ndarray, k: int, compactness: float = 10.0) -> SuperpixelMap:
    """Segment into ~k superpixels (SLIC in CIELAB x image space) and gather stats."""
    if k < 1:
        raise ValueError("k must be >= 1")
    labels = skimage_slic(np.asarray(image, dtype=float), n_segments=k,
                          compactness=compactness, max_num_iter=10, start_label=0,
                          channel_axis=-1)
    n = int(labels.max()) + 1
    h, w = labels.shape
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n).astype(float)
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    cu = np.bincount(flat, weights=uu.ravel(), minlength=n) / counts
    cv = np.bincount(flat, weights=vv.ravel(), minlength=n) / counts
    mean = np.stack([np.bincount(flat, weights=image[..., c].ravel(), minlength=n) / counts
                     for c in range(3)], axis=1)
    sq = np.stack([np.bincount(flat, weights=(image[..., c].ravel() ** 2), minlength=n) / counts
                   for c in range(3)], axis=1)
    std = np.sqrt(np.maximum(sq - mean ** 2, 0.0))
    return SuperpixelMap(labels=labels, centroids=np.stack([cu, cv], axis=1),
                         mean_color=mean, color_std=std, counts=counts)


def _window_stats(image: np.ndarray, u: int, v: int, radius: int = 2):
    h, w = image.shape[:2]
    patch = image[max(v - radius, 0):v + radius + 1, max(u - radius, 0):u + radius + 1]
    patch = patch.reshape(-1, 3)
    return patch.mean(axis=0), patch.std(axis=0)


def extract_correspondences(frame_a: LoadedFrame, frame_b: LoadedFrame,
                            spmap_a: SuperpixelMap, intr: CameraIntrinsics,
                            sigma_max: float = SIGMA_MAX, depth_tol: float = DEPTH_TOL,
                            cos_min: float = DEFAULT_COS_MIN) -> list[CorrespondencePair]:
    """Reproject homogeneous superpixel centers of frame a into frame b.

    Acceptance requires in-bounds projection, relative depth agreement below
    depth_tol (occlusion test), and a homogeneous local patch in b. Both
    endpoint colours are shading-compensated.
    """
    if frame_a.pose is None or frame_b.pose is None:
        raise FrameLoadError("correspondence extraction needs posed frames")
    rel = frame_a.pose.relative_to(frame_b.pose)  # a-camera -> b-camera
    normals_a = frame_a.normals(intr)
    normals_b = frame_b.normals(intr)
    h, w = frame_a.depth.shape
    pairs: list[CorrespondencePair] = []
    for lbl in range(spmap_a.n_labels):
        if np.any(spmap_a.color_std[lbl] >= sigma_max):
            continue
        u_a = int(round(spmap_a.centroids[lbl, 0]))
        v_a = int(round(spmap_a.centroids[lbl, 1]))
        if not (0 <= u_a < w and 0 <= v_a < h):
            continue
        z_a = frame_a.depth[v_a, u_a]
        n_a = normals_a[v_a, u_a]
        if not np.isfinite(z_a) or not np.isfinite(n_a[0]):
            continue
        p_a = backproject((u_a, v_a), z_a, intr)
        cos_a = max(0.0, float(-(p_a / np.linalg.norm(p_a)) @ n_a))
        if cos_a < cos_min:
            continue
        p_b_pred = rel.rotation @ p_a + rel.translation
        if p_b_pred[2] <= 0:
            continue
        u_b, v_b = project(p_b_pred, intr)
        u_b, v_b = int(round(float(u_b))), int(round(float(v_b)))
        if not (2 <= u_b < w - 2 and 2 <= v_b < h - 2):
            continue
        z_b = frame_b.depth[v_b, u_b]
        n_b = normals_b[v_b, u_b]
        if not np.isfinite(z_b) or not np.isfinite(n_b[0]):
            continue
        if abs(p_b_pred[2] - z_b) / z_b >= depth_tol:
            continue
        mean_b, std_b = _window_stats(frame_b.image, u_b, v_b)
        if np.any(std_b >= sigma_max):
            continue
        p_b = backproject((u_b, v_b), z_b, intr)
        cos_b = max(0.0, float(-(p_b / np.linalg.norm(p_b)) @ n_b))
        if cos_b < cos_min:
            continue
        obs_a = Observation(color=spmap_a.mean_color[lbl] / cos_a, p=p_a,
                            frame_id=frame_a.entry.frame_id)
        obs_b = Observation(color=mean_b / cos_b, p=p_b,
                            frame_id=frame_b.entry.frame_id)
        pairs.append(CorrespondencePair(obs_a, obs_b))
    return pairs


def in_frustum(obs: Observation, spec: FrustumSpec) -> bool:
    try:
        grid_coords(obs.p, spec)
        return True
    except OutOfFrustumError:
        return False


def cap_observations_per_voxel(observations: list[Observation], spec: FrustumSpec,
                               cap: int = VOXEL_CAP) -> list[Observation]:
    """Keep at most `cap` observations per voxel, nearest to the voxel center."""
    if not observations:
        return []
    pts = np.stack([o.p for o in observations])
    gx, gy, gz = grid_coords(pts, spec)
    vox = np.stack([np.round(gx), np.round(gy), np.round(gz)], axis=1).astype(int)
    centers = spec.voxel_centers()
    keys = np.ravel_multi_index((vox[:, 0], vox[:, 1], vox[:, 2]), spec.shape)
    dist = np.linalg.norm(pts - centers[vox[:, 0], vox[:, 1], vox[:, 2]], axis=1)
    order = np.lexsort((dist, keys))
    kept: list[Observation] = []
    prev_key, n_in_voxel = -1, 0
    for idx in order:
        if keys[idx] != prev_key:
            prev_key, n_in_voxel = keys[idx], 0
        if n_in_voxel < cap:
            kept.append(observations[idx])
            n_in_voxel += 1
    # deterministic output order: original extraction order
    kept_ids = {id(o) for o in kept}
    return [o for o in observations if id(o) in kept_ids]


@dataclass
class CalibrationData:
    """Everything the hierarchical solver consumes, extracted once from a manifest."""

    observations: list[Observation]
    pairs: list[CorrespondencePair]
    pure_water_images: list[np.ndarray]
    intr: CameraIntrinsics


def extract_calibration_data(manifest: FrameManifest, spec: FrustumSpec,
                             stride: int | tuple[int, int] = 2,
                             use_correspondences: bool = False,
                             superpixels: int = 300,
                             pair_span: int = 3,
                             cap: int = VOXEL_CAP,
                             cos_min: float = DEFAULT_COS_MIN) -> CalibrationData:
    """Run the full extraction pipeline over a manifest."""
    intr = manifest.intrinsics
    observations: list[Observation] = []
    loaded: list[LoadedFrame] = []
    for entry in manifest.by_role("calibration"):
        frame = load_frame(manifest, entry)
        loaded.append(frame)
        for ann in entry.annotations:
            mask = image_io.read_mask(manifest.resolve(ann.mask)) if ann.mask else None
            obs = extract_known_color_samples(frame, ann, intr, mask=mask,
                                              stride=stride, cos_min=cos_min)
            observations.extend(o for o in obs if in_frustum(o, spec))
    observations = cap_observations_per_voxel(observations, spec, cap=cap)

    pairs: list[CorrespondencePair] = []
    if use_correspondences and len(loaded) >= 2:
        spmaps = [slic_superpixels(f.image, superpixels) for f in loaded]
        for i, frame_a in enumerate(loaded):
            for j in range(i + 1, min(i + 1 + pair_span, len(loaded))):
                found = extract_correspondences(frame_a, loaded[j], spmaps[i], intr)
                pairs.extend(p for p in found
                             if in_frustum(p.a, spec) and in_frustum(p.b, spec))

    pure_water = [load_frame(manifest, e).image for e in manifest.by_role("pure_water")]
    return CalibrationData(observations, pairs, pure_water, intr)
