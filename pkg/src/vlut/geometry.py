"""Pinhole camera math: projection, backprojection, depth-map normals, shading."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this incidence cosine the 1/cos correction amplifies noise beyond a
# usable SNR; samples are rejected rather than compensated.
DEFAULT_COS_MIN = 0.2


class InvalidDepthError(ValueError):
    """Depth value is non-positive or non-finite."""


class BehindCameraError(ValueError):
    """Point has z <= 0 and cannot be projected."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics for an undistorted, radiometrically linear camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                   cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]))


@dataclass(frozen=True)
class Pose:
    """Rigid camera-from-world transform: p_cam = rotation @ p_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8) or not np.isclose(np.linalg.det(R), 1.0, atol=1e-8):
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def world_to_camera(self, p_world: np.ndarray) -> np.ndarray:
        return p_world @ self.rotation.T + self.translation

    def camera_to_world(self, p_cam: np.ndarray) -> np.ndarray:
        return (p_cam - self.translation) @ self.rotation

    def relative_to(self, other: "Pose") -> "Pose":
        """Transform taking this camera's frame into ``other``'s frame."""
        R = other.rotation @ self.rotation.T
        t = other.translation - R @ self.translation
        return Pose(R, t)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["rotation"], dtype=float), np.asarray(d["translation"], dtype=float))


def backproject(pixel, depth, intr: CameraIntrinsics) -> np.ndarray:
    """Lift pixel coordinates (u, v) at a given z-depth to camera-frame 3D points.

    Accepts scalars or broadcastable arrays; the last output axis is (x, y, z).
    """
    u, v = np.asarray(pixel[0], dtype=float), np.asarray(pixel[1], dtype=float)
    z = np.asarray(depth, dtype=float)
    if np.any(~np.isfinite(z)) or np.any(z <= 0):
        raise InvalidDepthError("depth must be finite and positive")
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def project(p: np.ndarray, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points (..., 3) to pixel coordinates (u, v)."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(~np.isfinite(z)) or np.any(z <= 0):
        raise BehindCameraError("cannot project points with z <= 0")
    u = intr.fx * p[..., 0] / z + intr.cx
    v = intr.fy * p[..., 1] / z + intr.cy
    return u, v


def _backproject_grid(depth_map: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    h, w = depth_map.shape
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pts = np.empty((h, w, 3))
    pts[..., 0] = (u - intr.cx) * depth_map / intr.fx
    pts[..., 1] = (v - intr.cy) * depth_map / intr.fy
    pts[..., 2] = depth_map
    return pts


def normals_from_depth(depth_map: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Per-pixel unit normals from central differences on the backprojected grid.

    Invalid pixels (non-finite or non-positive depth, borders, degenerate
    tangents) are returned as NaN rows. Normals are oriented toward the
    camera (n . p < 0).
    """
    depth = np.asarray(depth_map, dtype=float)
    if depth.ndim != 2:
        raise ValueError("depth map must be 2D")
    valid = np.isfinite(depth) & (depth > 0)
    safe = np.where(valid, depth, 1.0)
    pts = _backproject_grid(safe, intr)

    tx = np.full_like(pts, np.nan)
    ty = np.full_like(pts, np.nan)
    tx[:, 1:-1] = pts[:, 2:] - pts[:, :-2]
    ty[1:-1, :] = pts[2:, :] - pts[:-2, :]

    n = np.cross(tx, ty)
    norm = np.linalg.norm(n, axis=-1)

    ok = valid.copy()
    ok[:, 0] = ok[:, -1] = ok[0, :] = ok[-1, :] = False
    # all four central-difference neighbours must be valid
    ok[1:-1, 1:-1] &= valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
    ok &= np.isfinite(norm) & (norm > 1e-15)

    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm[..., None]
    # orient toward the camera
    flip = np.sum(n * pts, axis=-1) > 0
    n[flip] *= -1.0
    n[~ok] = np.nan
    return n


def shading_compensate(intensity: np.ndarray, normal: np.ndarray, p: np.ndarray,
                       cos_min: float = DEFAULT_COS_MIN):
    """Divide observed intensity by the Lambertian cosine under light-at-camera.

    Returns the compensated RGB, or None when the incidence angle is too
    grazing (cos < cos_min) for the sample to be usable.
    """
    p = np.asarray(p, dtype=float)
    normal = np.asarray(normal, dtype=float)
    view = -p / np.linalg.norm(p)
    cos_theta = max(0.0, float(np.dot(normal, view)))
    if cos_theta < cos_min:
        return None
    return np.asarray(intensity, dtype=float) / cos_theta


def cosine_map(depth_map: np.ndarray, normals: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized incidence cosine n . (-p/|p|) per pixel; NaN where normals are invalid."""
    safe = np.where(np.isfinite(depth_map) & (depth_map > 0), depth_map, 1.0)
    pts = _backproject_grid(safe, intr)
    view = -pts / np.linalg.norm(pts, axis=-1, keepdims=True)
    cos = np.sum(normals * view, axis=-1)
    return np.clip(cos, 0.0, None)
