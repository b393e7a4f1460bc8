"""Frustum-aligned 3D lookup table: indexing, trilinear sampling, pyramid, file format.

The lateral voxel axes follow the image grid (normalized pixel coordinates
scaled to nx x ny); the depth axis slices [z_near, z_far] into nz slabs with
linear spacing. Cell corners are clamped (replicated) at grid borders.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, project

MAGIC = b"VLUT"
VERSION = 1

_HEADER = struct.Struct("<4sIIIIddddddII")  # magic, ver, nx, ny, nz, z_near, z_far, fx, fy, cx, cy, W, H


class OutOfFrustumError(Exception):
    """Point lies outside the calibrated frustum (caller decides skip vs clamp)."""


class LutFormatError(Exception):
    """Base class for LUT file parse failures."""


class BadMagicError(LutFormatError):
    pass


class VersionMismatchError(LutFormatError):
    pass


class TruncatedFileError(LutFormatError):
    pass


class NonFiniteValueError(LutFormatError):
    pass


@dataclass(frozen=True)
class FrustumSpec:
    """Voxelization of the camera's viewing frustum between z_near and z_far."""

    z_near: float
    z_far: float
    nx: int
    ny: int
    nz: int
    intr: CameraIntrinsics

    def __post_init__(self):
        if not (0 < self.z_near < self.z_far):
            raise ValueError(f"need 0 < z_near < z_far, got [{self.z_near}, {self.z_far}]")
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("voxel counts must be >= 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    def with_resolution(self, nx: int, ny: int, nz: int) -> "FrustumSpec":
        return FrustumSpec(self.z_near, self.z_far, nx, ny, nz, self.intr)

    def slab_depth(self, gz) -> np.ndarray:
        """Metric z of fractional slab coordinate gz."""
        if self.nz == 1:
            return np.full_like(np.asarray(gz, dtype=float), 0.5 * (self.z_near + self.z_far))
        return self.z_near + np.asarray(gz, dtype=float) * (self.z_far - self.z_near) / (self.nz - 1)

    def voxel_center_pixels(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (u[nx], v[ny]) of the voxel column centers."""
        u = (np.arange(self.nx) * self.intr.width / (self.nx - 1) if self.nx > 1
             else np.array([self.intr.width / 2.0]))
        v = (np.arange(self.ny) * self.intr.height / (self.ny - 1) if self.ny > 1
             else np.array([self.intr.height / 2.0]))
        return u, v

    def voxel_centers(self) -> np.ndarray:
        """Camera-frame 3D centers of all voxels, shape (nx, ny, nz, 3)."""
        u, v = self.voxel_center_pixels()
        z = self.slab_depth(np.arange(self.nz))
        uu, vv, zz = np.meshgrid(u, v, z, indexing="ij")
        out = np.empty((self.nx, self.ny, self.nz, 3))
        out[..., 0] = (uu - self.intr.cx) * zz / self.intr.fx
        out[..., 1] = (vv - self.intr.cy) * zz / self.intr.fy
        out[..., 2] = zz
        return out


@dataclass
class GridLocation:
    """Fractional grid coordinates with the 8 trilinear corner indices/weights."""

    gx: float
    gy: float
    gz: float
    corners: np.ndarray   # (8, 3) int voxel indices
    weights: np.ndarray   # (8,) non-negative, summing to 1

    def flat_corners(self, shape: tuple[int, int, int]) -> np.ndarray:
        return np.ravel_multi_index((self.corners[:, 0], self.corners[:, 1], self.corners[:, 2]), shape)


def grid_coords(p: np.ndarray, spec: FrustumSpec, clamp: bool = False):
    """Fractional (gx, gy, gz) of camera-frame points; raises OutOfFrustumError unless clamped."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    intr = spec.intr
    if clamp:
        z = np.clip(z, spec.z_near, spec.z_far)
        zs = np.where(z > 0, z, spec.z_near)
        u = intr.fx * p[..., 0] / np.where(p[..., 2] > 0, p[..., 2], 1.0) + intr.cx
        v = intr.fy * p[..., 1] / np.where(p[..., 2] > 0, p[..., 2], 1.0) + intr.cy
        z = zs
    else:
        tol = 1e-9
        if np.any(z < spec.z_near - tol) or np.any(z > spec.z_far + tol):
            raise OutOfFrustumError("point depth outside [z_near, z_far]")
        u, v = project(p, intr)
        if np.any(u < -tol) or np.any(u > intr.width + tol) or np.any(v < -tol) or np.any(v > intr.height + tol):
            raise OutOfFrustumError("point projects outside the image")
    gx = u / intr.width * (spec.nx - 1)
    gy = v / intr.height * (spec.ny - 1)
    if spec.nz == 1:
        gz = np.zeros_like(np.asarray(z, dtype=float))
    else:
        gz = (z - spec.z_near) / (spec.z_far - spec.z_near) * (spec.nz - 1)
    gx = np.clip(gx, 0.0, spec.nx - 1.0)
    gy = np.clip(gy, 0.0, spec.ny - 1.0)
    gz = np.clip(gz, 0.0, spec.nz - 1.0)
    return gx, gy, gz


def _corner_arrays(gx, gy, gz, spec: FrustumSpec):
    """Vectorized 8-corner indices and weights. Returns (ix, iy, iz, w) with
    shapes (..., 8); corner order is (x0y0z0, x1y0z0, x0y1z0, x1y1z0, x0y0z1, ...)."""
    gx, gy, gz = np.asarray(gx, dtype=float), np.asarray(gy, dtype=float), np.asarray(gz, dtype=float)
    ix0 = np.clip(np.floor(gx).astype(np.int64), 0, max(spec.nx - 2, 0))
    iy0 = np.clip(np.floor(gy).astype(np.int64), 0, max(spec.ny - 2, 0))
    iz0 = np.clip(np.floor(gz).astype(np.int64), 0, max(spec.nz - 2, 0))
    fx = gx - ix0
    fy = gy - iy0
    fz = gz - iz0
    ox = np.array([0, 1, 0, 1, 0, 1, 0, 1])
    oy = np.array([0, 0, 1, 1, 0, 0, 1, 1])
    oz = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    ix = np.minimum(ix0[..., None] + ox, spec.nx - 1)
    iy = np.minimum(iy0[..., None] + oy, spec.ny - 1)
    iz = np.minimum(iz0[..., None] + oz, spec.nz - 1)
    wx = np.where(ox, fx[..., None], 1.0 - fx[..., None])
    wy = np.where(oy, fy[..., None], 1.0 - fy[..., None])
    wz = np.where(oz, fz[..., None], 1.0 - fz[..., None])
    return ix, iy, iz, wx * wy * wz


def locate(p: np.ndarray, spec: FrustumSpec, clamp: bool = False) -> GridLocation:
    """Locate a single camera-frame point in the voxel grid."""
    gx, gy, gz = grid_coords(p, spec, clamp=clamp)
    ix, iy, iz, w = _corner_arrays(gx, gy, gz, spec)
    corners = np.stack([ix, iy, iz], axis=-1).reshape(8, 3)
    return GridLocation(float(gx), float(gy), float(gz), corners, w.reshape(8))


@dataclass
class LookupTable:
    """Per-voxel multiplicative (alpha) and additive (beta) factors per channel."""

    spec: FrustumSpec
    alpha: np.ndarray      # (nx, ny, nz, 3), > 0
    beta: np.ndarray       # (nx, ny, nz, 3), >= 0
    obs_count: np.ndarray  # (nx, ny, nz), >= 0

    def validate(self):
        shape = self.spec.shape
        if self.alpha.shape != shape + (3,) or self.beta.shape != shape + (3,):
            raise ValueError("alpha/beta arrays must have shape (nx, ny, nz, 3)")
        if self.obs_count.shape != shape:
            raise ValueError("obs_count must have shape (nx, ny, nz)")
        for name, arr in (("alpha", self.alpha), ("beta", self.beta), ("obs_count", self.obs_count)):
            if not np.all(np.isfinite(arr)):
                idx = np.unravel_index(int(np.argmin(np.isfinite(arr))), arr.shape)
                raise ValueError(f"non-finite {name} at index {idx}")
        if np.any(self.alpha <= 0):
            raise ValueError("all alpha values must be > 0")
        if np.any(self.beta < 0) or np.any(self.obs_count < 0):
            raise ValueError("beta and obs_count must be >= 0")

    @classmethod
    def constant(cls, spec: FrustumSpec, alpha=1.0, beta=0.0) -> "LookupTable":
        a = np.full(spec.shape + (3,), 0.0) + np.asarray(alpha, dtype=float)
        b = np.full(spec.shape + (3,), 0.0) + np.asarray(beta, dtype=float)
        return cls(spec, a, b, np.zeros(spec.shape))

    def copy(self) -> "LookupTable":
        return LookupTable(self.spec, self.alpha.copy(), self.beta.copy(), self.obs_count.copy())


def _gather(field: np.ndarray, ix, iy, iz, w) -> np.ndarray:
    vals = field[ix, iy, iz]
    if vals.ndim == w.ndim:          # scalar field, e.g. obs_count
        return np.sum(vals * w, axis=-1)
    return np.sum(vals * w[..., None], axis=-2)


def sample(lut: LookupTable, p: np.ndarray, clamp: bool = False):
    """Trilinearly sample (alpha, beta) at camera-frame points (..., 3)."""
    gx, gy, gz = grid_coords(p, lut.spec, clamp=clamp)
    ix, iy, iz, w = _corner_arrays(gx, gy, gz, lut.spec)
    return _gather(lut.alpha, ix, iy, iz, w), _gather(lut.beta, ix, iy, iz, w)


def sample_obs_count(lut: LookupTable, p: np.ndarray, clamp: bool = False) -> np.ndarray:
    gx, gy, gz = grid_coords(p, lut.spec, clamp=clamp)
    ix, iy, iz, w = _corner_arrays(gx, gy, gz, lut.spec)
    return _gather(lut.obs_count, ix, iy, iz, w)


def _coarse_coords(n_new: int, n_old: int) -> np.ndarray:
    if n_new == 1:
        return np.zeros(1)
    return np.arange(n_new) * (n_old - 1) / (n_new - 1)


def upsample(lut: LookupTable, new_nx: int, new_ny: int, new_nz: int) -> LookupTable:
    """Resample to a finer grid; each new voxel center is trilinearly read from
    the coarse table. Observation support is reset (it belongs to a level)."""
    spec = lut.spec
    if new_nx < spec.nx or new_ny < spec.ny or new_nz < spec.nz:
        raise ValueError("upsample cannot shrink any axis")
    gx = _coarse_coords(new_nx, spec.nx)
    gy = _coarse_coords(new_ny, spec.ny)
    gz = _coarse_coords(new_nz, spec.nz)
    gxx, gyy, gzz = np.meshgrid(gx, gy, gz, indexing="ij")
    ix, iy, iz, w = _corner_arrays(gxx, gyy, gzz, spec)
    new_spec = spec.with_resolution(new_nx, new_ny, new_nz)
    alpha = _gather(lut.alpha, ix, iy, iz, w)
    beta = _gather(lut.beta, ix, iy, iz, w)
    return LookupTable(new_spec, alpha, beta, np.zeros(new_spec.shape))


def serialize(lut: LookupTable) -> bytes:
    """Encode to the little-endian VLUT byte format (float32 payload)."""
    lut.validate()
    spec, intr = lut.spec, lut.spec.intr
    header = _HEADER.pack(MAGIC, VERSION, spec.nx, spec.ny, spec.nz,
                          spec.z_near, spec.z_far, intr.fx, intr.fy, intr.cx, intr.cy,
                          intr.width, intr.height)
    # payload order: [channel][z][y][x]
    a = np.transpose(lut.alpha, (3, 2, 1, 0)).astype("<f4").tobytes()
    b = np.transpose(lut.beta, (3, 2, 1, 0)).astype("<f4").tobytes()
    c = np.transpose(lut.obs_count, (2, 1, 0)).astype("<f4").tobytes()
    return header + a + b + c


def deserialize(data: bytes) -> LookupTable:
    """Decode a VLUT byte stream; raises distinct LutFormatError subclasses."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a VLUT file")
    if len(data) < _HEADER.size:
        raise TruncatedFileError("truncated header")
    (_, version, nx, ny, nz, z_near, z_far, fx, fy, cx, cy, width, height) = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    n = nx * ny * nz
    expected = _HEADER.size + 4 * (3 * n + 3 * n + n)
    if len(data) < expected:
        raise TruncatedFileError(f"payload truncated: expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise LutFormatError(f"trailing bytes after payload: expected {expected}, got {len(data)}")
    raw = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    alpha = np.transpose(raw[:3 * n].reshape(3, nz, ny, nx), (3, 2, 1, 0)).astype(float)
    beta = np.transpose(raw[3 * n:6 * n].reshape(3, nz, ny, nx), (3, 2, 1, 0)).astype(float)
    obs = np.transpose(raw[6 * n:].reshape(nz, ny, nx), (2, 1, 0)).astype(float)
    for name, arr in (("alpha", alpha), ("beta", beta), ("obs_count", obs)):
        finite = np.isfinite(arr)
        if not finite.all():
            idx = np.unravel_index(int(np.argmin(finite)), arr.shape)
            raise NonFiniteValueError(f"non-finite {name} value at index {idx}")
    spec = FrustumSpec(z_near, z_far, nx, ny, nz,
                       CameraIntrinsics(fx, fy, cx, cy, width, height))
    lut = LookupTable(spec, alpha, beta, obs)
    lut.validate()
    return lut


def save(lut: LookupTable, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(lut))


def load(path) -> LookupTable:
    with open(path, "rb") as f:
        return deserialize(f.read())
