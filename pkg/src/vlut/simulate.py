"""Forward renderer and ground-truth oracle.

Single-scattering image formation with point lights co-moving with the camera:
per pixel the direct term is the summed light irradiance with two-path
attenuation times albedo and the incidence cosine, the additive term is the
scatter integral along the viewing ray (isotropic phase, trapezoid rule).
The same optics define the ground-truth lookup table, which makes rendered
images and table entries consistent by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import image_io
from .geometry import CameraIntrinsics, Pose
from .lut import FrustumSpec, LookupTable

FOUR_PI = 4.0 * np.pi
DEFAULT_SAMPLES = 128
# pure-water integrals stop where the water path extinction drops below 1e-4
PURE_WATER_EXTINCTION = 1e-4


@dataclass(frozen=True)
class WaterParams:
    """Per-channel attenuation and scattering coefficients (1/m), isotropic phase."""

    eta: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float).reshape(3)
        b = np.asarray(self.b, dtype=float).reshape(3)
        if np.any(eta < 0) or np.any(b < 0):
            raise ValueError("water coefficients must be non-negative")
        if np.any(b > eta + 1e-12):
            raise ValueError("scattering coefficient cannot exceed attenuation")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "b", b)

    @classmethod
    def in_air(cls) -> "WaterParams":
        return cls(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class LightSource:
    """Isotropic point light rigidly attached to the camera (camera-frame position)."""

    position: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        inten = np.asarray(self.intensity, dtype=float).reshape(3)
        if np.any(inten < 0):
            raise ValueError("light intensity must be non-negative")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "intensity", inten)


WATER_PRESETS = {
    "clear": WaterParams(eta=(0.25, 0.06, 0.07), b=(0.075, 0.018, 0.021)),
    "turbid": WaterParams(eta=(0.90, 0.70, 0.80), b=(0.45, 0.35, 0.40)),
    "tank": WaterParams(eta=(0.55, 0.40, 0.45), b=(0.275, 0.20, 0.225)),
}

REFERENCE_LIGHT = LightSource(position=(0.30, 0.0, 0.0), intensity=(2.0, 2.0, 2.0))


@dataclass(frozen=True)
class PlaneTarget:
    """Textured planar target; albedo texture is nearest-sampled over the extent."""

    point: np.ndarray        # world-frame point at the plane center
    normal: np.ndarray       # world-frame unit normal
    e1: np.ndarray           # in-plane texture axes (world frame, unit)
    e2: np.ndarray
    half_extent: tuple[float, float]   # meters along e1, e2
    albedo: np.ndarray       # (th, tw, 3) texture in [0, 1]

    def __post_init__(self):
        for name in ("point", "normal", "e1", "e2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        tex = np.asarray(self.albedo, dtype=float)
        if tex.ndim != 3 or tex.shape[2] != 3:
            raise ValueError("albedo texture must have shape (th, tw, 3)")
        object.__setattr__(self, "albedo", tex)

    @classmethod
    def uniform(cls, point, normal, e1, e2, half_extent, color) -> "PlaneTarget":
        tex = np.asarray(color, dtype=float).reshape(1, 1, 3)
        return cls(point, normal, e1, e2, half_extent, tex)


@dataclass
class SceneSpec:
    """Everything needed to render a frame sequence."""

    intr: CameraIntrinsics
    lights: list[LightSource]
    water: WaterParams
    poses: list[Pose]
    target: PlaneTarget | None = None
    mode: str = "deep_water"   # deep_water | uniform_shallow | in_air
    ambient: float = 1.0       # uniform_shallow irradiance
    b_inf: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.mode not in ("deep_water", "uniform_shallow", "in_air"):
            raise ValueError(f"unknown mode {self.mode!r}")


def _ray_dirs(intr: CameraIntrinsics) -> np.ndarray:
    """Unnormalized ray directions (H, W, 3) with dz = 1 through pixel centers."""
    u, v = np.meshgrid(np.arange(intr.width, dtype=float), np.arange(intr.height, dtype=float))
    d = np.empty((intr.height, intr.width, 3))
    d[..., 0] = (u - intr.cx) / intr.fx
    d[..., 1] = (v - intr.cy) / intr.fy
    d[..., 2] = 1.0
    return d


def _intersect_plane(dirs: np.ndarray, target: PlaneTarget, pose: Pose):
    """Intersect camera rays with the target plane.

    Returns (depth z, hit mask, albedo RGB, normal in camera frame).
    """
    R = pose.rotation
    p0 = R @ target.point + pose.translation
    n = R @ target.normal
    e1 = R @ target.e1
    e2 = R @ target.e2
    denom = dirs @ n
    num = float(n @ p0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    hit = np.isfinite(t) & (t > 1e-6)
    p = t[..., None] * dirs
    s1 = (p - p0) @ e1
    s2 = (p - p0) @ e2
    hx, hy = target.half_extent
    hit &= (np.abs(s1) <= hx) & (np.abs(s2) <= hy)
    th, tw = target.albedo.shape[:2]
    ix = np.clip(((s1 + hx) / (2 * hx) * tw).astype(int), 0, tw - 1)
    iy = np.clip(((s2 + hy) / (2 * hy) * th).astype(int), 0, th - 1)
    albedo = target.albedo[iy, ix]
    n_cam = n if n[2] < 0 else -n  # oriented toward the camera
    return t, hit, albedo, n_cam


def backscatter(dirs_unit: np.ndarray, end_dist: np.ndarray, lights, water: WaterParams,
                n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Trapezoid line integral of the scatter term along each ray, (npx, 3)."""
    dirs_unit = np.asarray(dirs_unit, dtype=float).reshape(-1, 3)
    end_dist = np.asarray(end_dist, dtype=float).reshape(-1)
    npx = dirs_unit.shape[0]
    frac = np.linspace(0.0, 1.0, n_samples)
    out = np.zeros((npx, 3))
    if np.all(water.b == 0):
        return out
    for start in range(0, npx, 8192):
        sel = slice(start, min(start + 8192, npx))
        s = end_dist[None, sel] * frac[:, None]
        for light in lights:
            pos = s[..., None] * dirs_unit[None, sel, :] - light.position
            r = np.maximum(np.sqrt(np.sum(pos * pos, axis=-1)), 1e-9)
            for c in range(3):
                if water.b[c] == 0:
                    continue
                f = (light.intensity[c] * water.b[c] / FOUR_PI
                     * np.exp(-water.eta[c] * (r + s)) / (r * r))
                out[sel, c] += np.trapezoid(f, x=s, axis=0)
    return out


def _pure_water_cap(water: WaterParams, channel: int) -> float:
    eta = water.eta[channel]
    if eta <= 0:
        return 0.0
    return float(np.log(1.0 / PURE_WATER_EXTINCTION) / eta)


def _pure_water_grid(cap: float, n_samples: int) -> np.ndarray:
    """Dense uniform sampling near the lights, log-spaced tail to the cap."""
    near_end = min(cap, 5.0)
    n_near = max(n_samples, int(np.ceil(near_end / 0.02)))
    grid = np.linspace(0.0, near_end, n_near)
    if cap > near_end:
        tail = np.geomspace(near_end, cap, 256)[1:]
        grid = np.concatenate([grid, tail])
    return grid


def pure_water_radiance(dirs_unit: np.ndarray, lights, water: WaterParams,
                        n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Backscatter integrated to effective infinity (per-channel extinction cap)."""
    dirs_unit = np.asarray(dirs_unit, dtype=float).reshape(-1, 3)
    npx = dirs_unit.shape[0]
    out = np.zeros((npx, 3))
    for c in range(3):
        if water.b[c] == 0:
            continue
        grid = _pure_water_grid(_pure_water_cap(water, c), n_samples)
        for start in range(0, npx, 4096):
            sel = slice(start, min(start + 4096, npx))
            acc = np.zeros(min(4096, npx - start))
            for light in lights:
                pos = grid[:, None, None] * dirs_unit[None, sel, :] - light.position
                r = np.maximum(np.sqrt(np.sum(pos * pos, axis=-1)), 1e-9)
                f = (light.intensity[c] * water.b[c] / FOUR_PI
                     * np.exp(-water.eta[c] * (r + grid[:, None])) / (r * r))
                acc += np.trapezoid(f, x=grid, axis=0)
            out[sel, c] = acc
    return out


def render_frame(scene: SceneSpec, frame_index: int,
                 n_samples: int = DEFAULT_SAMPLES,
                 background: np.ndarray | None = None):
    """Render one frame. Returns (image HxWx3 linear, depth HxW with NaN misses, pose).

    In deep-water mode pixels without geometry show pure water; a precomputed
    full-frame pure-water image may be passed as `background` to avoid
    re-integrating it for every frame (lights are camera-rigid, so it is
    identical across frames of a scene).
    """
    pose = scene.poses[frame_index]
    intr = scene.intr
    dirs = _ray_dirs(intr)
    h, w = intr.height, intr.width
    image = np.zeros((h, w, 3))
    depth = np.full((h, w), np.nan)

    if scene.target is not None:
        t, hit, albedo, n_cam = _intersect_plane(dirs, scene.target, pose)
        depth[hit] = t[hit]
    else:
        hit = np.zeros((h, w), dtype=bool)
        albedo = None
        n_cam = None

    dir_norm = np.linalg.norm(dirs, axis=-1)
    dirs_unit = dirs / dir_norm[..., None]

    if scene.mode == "uniform_shallow":
        if np.any(hit):
            d_o = (t * dir_norm)[hit]
            trans = np.exp(-scene.water.eta[None, :] * d_o[:, None])
            image[hit] = scene.ambient * albedo[hit] * trans + scene.b_inf[None, :] * (1.0 - trans)
        return image, depth, pose

    if np.any(hit):
        p = t[hit, None] * dirs[hit]
        d_o = np.linalg.norm(p, axis=-1)
        cos_cam = np.clip(-(p / d_o[:, None]) @ n_cam, 0.0, 1.0)
        direct = np.zeros((p.shape[0], 3))
        for light in scene.lights:
            r = np.linalg.norm(p - light.position, axis=-1)
            r = np.maximum(r, 1e-9)
            att = np.exp(-scene.water.eta[None, :] * (r[:, None] + d_o[:, None]))
            direct += light.intensity[None, :] * att / (np.pi * r * r)[:, None]
        image[hit] = direct * albedo[hit] * cos_cam[:, None]
        if scene.mode == "deep_water":
            image[hit] += backscatter(dirs_unit[hit], d_o, scene.lights, scene.water, n_samples)

    if scene.mode == "deep_water" and np.any(~hit):
        if background is not None:
            image[~hit] = background[~hit]
        else:
            image[~hit] = pure_water_radiance(dirs_unit[~hit], scene.lights,
                                              scene.water, n_samples)
    return image, depth, pose


def pure_water_image(intr: CameraIntrinsics, lights, water: WaterParams,
                     n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Frame containing only illuminated water (no geometry)."""
    dirs = _ray_dirs(intr)
    dirs_unit = (dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)).reshape(-1, 3)
    img = pure_water_radiance(dirs_unit, lights, water, n_samples)
    return img.reshape(intr.height, intr.width, 3)


def ground_truth_lut(spec: FrustumSpec, lights, water: WaterParams,
                     n_samples: int = DEFAULT_SAMPLES) -> LookupTable:
    """Analytic LUT for the given lighting/water: alpha is irradiance with
    two-path attenuation over pi (incidence cosine excluded; shading is
    compensated upstream), beta is the scatter integral truncated at the voxel."""
    centers = spec.voxel_centers().reshape(-1, 3)
    dist = np.linalg.norm(centers, axis=-1)
    dirs_unit = centers / dist[:, None]
    alpha = np.zeros((centers.shape[0], 3))
    for light in lights:
        r = np.linalg.norm(centers - light.position, axis=-1)
        r = np.maximum(r, 1e-9)
        att = np.exp(-water.eta[None, :] * (r[:, None] + dist[:, None]))
        alpha += light.intensity[None, :] * att / (np.pi * r * r)[:, None]
    beta = backscatter(dirs_unit, dist, lights, water, n_samples)
    shape = spec.shape
    return LookupTable(spec, alpha.reshape(shape + (3,)), beta.reshape(shape + (3,)),
                       np.ones(shape))


def reference_lut(spec: FrustumSpec, medium: str = "water",
                  n_samples: int = DEFAULT_SAMPLES) -> LookupTable:
    """Pre-rendered single-light reference table used to derive constraint weights."""
    water = WATER_PRESETS["clear"] if medium == "water" else WaterParams.in_air()
    return ground_truth_lut(spec, [REFERENCE_LIGHT], water, n_samples)


def degrade(image: np.ndarray, rng: np.random.Generator | None = None,
            noise_sigma: float = 0.0, quantize_8bit: bool = False) -> np.ndarray:
    """Optionally add Gaussian pixel noise and 8-bit quantization."""
    img = np.asarray(image, dtype=float)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    if quantize_8bit:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img


# ---------------------------------------------------------------------------
# Dataset recipes
# ---------------------------------------------------------------------------

DEFAULT_INTRINSICS = CameraIntrinsics(fx=220.0, fy=220.0, cx=80.0, cy=60.0,
                                      width=160, height=120)

BOARD_A = np.array([181, 110, 30]) / 255.0
BOARD_B = np.array([80, 160, 90]) / 255.0
WHITE_BOARD = np.array([0.92, 0.92, 0.92])
CHESS_WHITE = np.array([0.85, 0.85, 0.85])
CHESS_BLACK = np.array([0.08, 0.08, 0.08])

# 4 x 6 colour checker albedos (linear RGB, loosely modeled on the classic chart)
CHECKER_ALBEDOS = np.array([
    [0.176, 0.102, 0.074], [0.560, 0.334, 0.264], [0.112, 0.195, 0.329],
    [0.116, 0.148, 0.061], [0.259, 0.238, 0.443], [0.126, 0.576, 0.493],
    [0.805, 0.243, 0.046], [0.071, 0.114, 0.407], [0.620, 0.105, 0.124],
    [0.089, 0.060, 0.131], [0.347, 0.553, 0.060], [0.862, 0.387, 0.021],
    [0.038, 0.063, 0.290], [0.059, 0.320, 0.066], [0.536, 0.046, 0.034],
    [0.934, 0.621, 0.012], [0.577, 0.120, 0.366], [0.011, 0.247, 0.399],
    [0.900, 0.900, 0.900], [0.580, 0.580, 0.580], [0.360, 0.360, 0.360],
    [0.200, 0.200, 0.200], [0.090, 0.090, 0.090], [0.031, 0.031, 0.031],
]).reshape(4, 6, 3)

RECIPES = ("clear_two_boards", "turbid_two_boards", "inair_whiteboard",
           "inair_colorpatch_slab", "chessboard_tank")


def _rot_y(angle_deg: float) -> np.ndarray:
    a = np.radians(angle_deg)
    return np.array([[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0],
                     [-np.sin(a), 0.0, np.cos(a)]])


def _board_target(albedo_texture: np.ndarray, half_extent, tilt_y_deg: float = 0.0) -> PlaneTarget:
    """Plane at world z = 0 facing the camera (which sits at negative z)."""
    R = _rot_y(tilt_y_deg)
    return PlaneTarget(point=(0.0, 0.0, 0.0), normal=R @ np.array([0.0, 0.0, -1.0]),
                       e1=R @ np.array([1.0, 0.0, 0.0]), e2=(0.0, 1.0, 0.0),
                       half_extent=half_extent, albedo=np.asarray(albedo_texture, dtype=float))


def _camera_pose(distance: float, jitter=(0.0, 0.0)) -> Pose:
    # camera at world (jx, jy, -distance) looking along +z
    return Pose(np.eye(3), np.array([-jitter[0], -jitter[1], distance]))


def plane_pixel_map(target: PlaneTarget, pose: Pose, intr: CameraIntrinsics):
    """Per-pixel plane coordinates (s1, s2) and hit mask for mask generation."""
    dirs = _ray_dirs(intr)
    t, hit, _, _ = _intersect_plane(dirs, target, pose)
    p = t[..., None] * dirs
    R = pose.rotation
    p0 = R @ target.point + pose.translation
    s1 = (p - p0) @ (R @ target.e1)
    s2 = (p - p0) @ (R @ target.e2)
    return s1, s2, hit


def _cell_interior_mask(target: PlaneTarget, pose: Pose, intr: CameraIntrinsics,
                        cell_value: np.ndarray | None = None, margin: float = 0.25):
    """Mask of pixels inside texture cells (optionally cells matching a colour),
    at least `margin` cell widths away from any cell boundary."""
    s1, s2, hit = plane_pixel_map(target, pose, intr)
    th, tw = target.albedo.shape[:2]
    hx, hy = target.half_extent
    fx = (s1 + hx) / (2 * hx) * tw
    fy = (s2 + hy) / (2 * hy) * th
    ix = np.clip(fx.astype(int), 0, tw - 1)
    iy = np.clip(fy.astype(int), 0, th - 1)
    interior = ((fx - ix > margin) & (fx - ix < 1 - margin)
                & (fy - iy > margin) & (fy - iy < 1 - margin))
    mask = hit & interior
    if cell_value is not None:
        mask &= np.all(np.isclose(target.albedo[iy, ix], cell_value), axis=-1)
    return mask


def _patch_rects(target: PlaneTarget, pose: Pose, intr: CameraIntrinsics,
                 margin: float = 0.25, min_px: int = 4) -> list:
    """Project texture cells to shrunken pixel rects fully inside the image."""
    from .dataset import PatchAnnotation
    th, tw = target.albedo.shape[:2]
    hx, hy = target.half_extent
    cw, ch = 2 * hx / tw, 2 * hy / th
    R = pose.rotation
    p0 = R @ target.point + pose.translation
    e1, e2 = R @ target.e1, R @ target.e2
    rects = []
    for i in range(th):
        for j in range(tw):
            c1 = -hx + (j + 0.5) * cw
            c2 = -hy + (i + 0.5) * ch
            half1 = 0.5 * cw * (1.0 - 2.0 * margin)
            half2 = 0.5 * ch * (1.0 - 2.0 * margin)
            corners = [p0 + (c1 + s * half1) * e1 + (c2 + t * half2) * e2
                       for s in (-1, 1) for t in (-1, 1)]
            corners = np.stack(corners)
            if np.any(corners[:, 2] <= 0):
                continue
            u = intr.fx * corners[:, 0] / corners[:, 2] + intr.cx
            v = intr.fy * corners[:, 1] / corners[:, 2] + intr.cy
            x0, x1 = int(np.ceil(u.min())), int(np.floor(u.max()))
            y0, y1 = int(np.ceil(v.min())), int(np.floor(v.max()))
            if x0 < 0 or y0 < 0 or x1 > intr.width or y1 > intr.height:
                continue
            if x1 - x0 < min_px or y1 - y0 < min_px:
                continue
            rects.append(PatchAnnotation(rect=(x0, y0, x1, y1),
                                         albedo=target.albedo[i, j].copy()))
    return rects


def _recipe_config(recipe: str) -> dict:
    if recipe == "clear_two_boards":
        return dict(mode="deep_water", water="clear",
                    lights=[LightSource((0.4, 0.0, 0.0), (1.05, 1.05, 1.05)),
                            LightSource((-0.4, 0.0, 0.0), (1.05, 1.05, 1.05))],
                    z_near=0.5, z_far=2.5, noise_sigma=0.005, quantize=True)
    if recipe == "turbid_two_boards":
        return dict(mode="deep_water", water="turbid",
                    lights=[LightSource((0.4, 0.0, 0.0), (1.85, 1.85, 1.85)),
                            LightSource((-0.4, 0.0, 0.0), (1.85, 1.85, 1.85))],
                    z_near=0.5, z_far=1.5, noise_sigma=0.005, quantize=True)
    if recipe == "inair_whiteboard":
        return dict(mode="in_air", water=None,
                    lights=[LightSource((0.0, 0.0, 0.0), (0.75, 0.75, 0.75))],
                    z_near=0.5, z_far=2.5, noise_sigma=0.0, quantize=False)
    if recipe == "inair_colorpatch_slab":
        return dict(mode="in_air", water=None,
                    lights=[LightSource((0.15, 0.10, 0.0), (2.9, 2.9, 2.9))],
                    z_near=0.9, z_far=1.1, noise_sigma=0.0, quantize=False)
    if recipe == "chessboard_tank":
        return dict(mode="deep_water", water="tank",
                    lights=[LightSource((0.15, 0.0, 0.0), (0.58, 0.58, 0.58)),
                            LightSource((-0.15, 0.0, 0.0), (0.58, 0.58, 0.58))],
                    z_near=0.5, z_far=1.5, noise_sigma=0.005, quantize=True)
    raise ValueError(f"unknown recipe {recipe!r}; choose one of {RECIPES}")


def _frame_plan(recipe: str, cfg: dict, rng: np.random.Generator) -> list[dict]:
    """Per-frame render plan: target, pose, role, annotations to derive."""
    plan = []
    board = lambda albedo, tilt=0.0: _board_target(
        np.asarray(albedo, dtype=float).reshape(1, 1, 3), (1.1, 0.85), tilt)
    checker = _board_target(CHECKER_ALBEDOS, (0.24, 0.16))

    def jitter():
        return (rng.uniform(-0.03, 0.03), rng.uniform(-0.02, 0.02))

    if recipe in ("clear_two_boards", "turbid_two_boards"):
        if recipe == "clear_two_boards":
            calib_d = np.linspace(0.5, 2.5, 31)
            checker_d = [0.8, 1.1, 1.4]
            std_d = [0.6, 1.0, 1.4, 1.8, 2.2]
        else:
            # ten frames per colour board over the short visibility range
            calib_d = np.repeat(np.linspace(0.5, 1.5, 10), 2)
            checker_d = [0.7, 0.9, 1.1]
            std_d = [0.6, 1.0, 1.4]
        for i, d in enumerate(calib_d):
            albedo = BOARD_A if i % 2 == 0 else BOARD_B
            plan.append(dict(fid=f"calib_{i:03d}", role="calibration", distance=float(d),
                             target=board(albedo), pose=_camera_pose(d, jitter()),
                             board_albedo=albedo))
        for i, d in enumerate(checker_d):
            plan.append(dict(fid=f"checker_{i:02d}", role="test", distance=float(d),
                             target=checker, pose=_camera_pose(d, jitter()), patches=True))
        for i, d in enumerate(std_d):
            plan.append(dict(fid=f"board_test_{i:02d}", role="test", distance=float(d),
                             target=board(BOARD_A), pose=_camera_pose(d),
                             board_albedo=BOARD_A, central_mask=True))
        for i in range(2):
            plan.append(dict(fid=f"pure_water_{i}", role="pure_water",
                             target=None, pose=Pose.identity()))
    elif recipe == "inair_whiteboard":
        for i, d in enumerate(np.linspace(0.5, 2.5, 30)):
            plan.append(dict(fid=f"calib_{i:03d}", role="calibration", distance=float(d),
                             target=board(WHITE_BOARD), pose=_camera_pose(d, jitter()),
                             board_albedo=WHITE_BOARD))
        for i, d in enumerate([0.9, 1.3]):
            plan.append(dict(fid=f"tilted_{i:02d}", role="test", distance=float(d),
                             target=board(WHITE_BOARD, tilt=15.0), pose=_camera_pose(d),
                             board_albedo=WHITE_BOARD))
    elif recipe == "inair_colorpatch_slab":
        texture = rng.uniform(0.15, 0.95, size=(8, 10, 3))
        plane = _board_target(texture, (0.7, 0.525))
        xs = np.linspace(-0.25, 0.25, 6)
        ys = np.linspace(-0.12, 0.12, 3)
        k = 0
        for y in ys:
            for x in xs:
                plan.append(dict(fid=f"view_{k:03d}", role="calibration", distance=1.0,
                                 target=plane, pose=_camera_pose(1.0, (x, y)),
                                 patches=True))
                k += 1
    elif recipe == "chessboard_tank":
        tex = np.where(((np.arange(6)[:, None] + np.arange(8)[None, :]) % 2 == 0)[..., None],
                       CHESS_WHITE, CHESS_BLACK)
        for i, d in enumerate(np.linspace(0.5, 1.5, 41)):
            tilt = (-4.0, 0.0, 4.0)[i % 3]
            plan.append(dict(fid=f"calib_{i:03d}", role="calibration", distance=float(d),
                             target=_board_target(tex, (0.4, 0.3), tilt),
                             pose=_camera_pose(d, jitter()), chess=True))
        for i, d in enumerate([0.7, 0.9, 1.1]):
            plan.append(dict(fid=f"checker_{i:02d}", role="test", distance=float(d),
                             target=checker, pose=_camera_pose(d, jitter()), patches=True))
        for i in range(2):
            plan.append(dict(fid=f"pure_water_{i}", role="pure_water",
                             target=None, pose=Pose.identity()))
    return plan


def make_dataset(recipe: str, out_dir, seed: int, intr: CameraIntrinsics | None = None,
                 noise_sigma: float | None = None, quantize: bool | None = None,
                 n_samples: int = DEFAULT_SAMPLES):
    """Render a named dataset recipe and write images, depths, masks, manifest.

    The seed is required; identical seeds produce byte-identical outputs.
    Returns the written FrameManifest.
    """
    from .dataset import FrameEntry, FrameManifest, RegionAnnotation

    cfg = _recipe_config(recipe)
    intr = intr or DEFAULT_INTRINSICS
    if noise_sigma is None:
        noise_sigma = cfg["noise_sigma"]
    if quantize is None:
        quantize = cfg["quantize"]
    water = WATER_PRESETS[cfg["water"]] if cfg["water"] else WaterParams.in_air()
    rng = np.random.default_rng(seed)

    out_dir = Path(out_dir)
    for sub in ("images", "depth", "masks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    plan = _frame_plan(recipe, cfg, rng)
    background = (pure_water_image(intr, cfg["lights"], water, n_samples)
                  if cfg["mode"] == "deep_water" else None)
    entries = []
    for item in plan:
        scene = SceneSpec(intr=intr, lights=cfg["lights"], water=water,
                          poses=[item["pose"]], target=item["target"], mode=cfg["mode"])
        image, depth, pose = render_frame(scene, 0, n_samples=n_samples,
                                          background=background)
        image = degrade(image, rng=rng, noise_sigma=noise_sigma, quantize_8bit=quantize)
        fid = item["fid"]
        if quantize:
            image_path = f"images/{fid}.png"
            image_io.write_png(out_dir / image_path, image, bits=8)
        else:
            image_path = f"images/{fid}.pfm"
            image_io.write_pfm(out_dir / image_path, image)
        entry = FrameEntry(frame_id=fid, image=image_path, role=item["role"],
                           gamma="linear", pose=pose, distance=item.get("distance"))
        if item["role"] != "pure_water":
            depth_path = f"depth/{fid}.pfm"
            image_io.write_depth(out_dir / depth_path, depth)
            entry.depth = depth_path
        if "board_albedo" in item:
            if item.get("central_mask"):
                mask = _central_rect_mask(intr)
            else:
                mask = np.isfinite(depth)
            mask_path = f"masks/{fid}.png"
            image_io.write_mask(out_dir / mask_path, mask)
            entry.annotations = [RegionAnnotation(albedo=np.asarray(item["board_albedo"]),
                                                  mask=mask_path)]
        if item.get("chess"):
            anns = []
            for tag, color in (("white", CHESS_WHITE), ("black", CHESS_BLACK)):
                mask = _cell_interior_mask(item["target"], item["pose"], intr, color)
                mask_path = f"masks/{fid}_{tag}.png"
                image_io.write_mask(out_dir / mask_path, mask)
                anns.append(RegionAnnotation(albedo=color.copy(), mask=mask_path))
            entry.annotations = anns
        if item.get("patches"):
            entry.patches = _patch_rects(item["target"], item["pose"], intr)
        entries.append(entry)

    manifest = FrameManifest(
        intrinsics=intr, frames=entries, base_dir=out_dir,
        metadata={
            "recipe": recipe, "seed": int(seed), "mode": cfg["mode"],
            "water_preset": cfg["water"], "z_near": cfg["z_near"], "z_far": cfg["z_far"],
            "noise_sigma": noise_sigma, "quantize_8bit": bool(quantize),
            "lights": [{"position": l.position.tolist(), "intensity": l.intensity.tolist()}
                       for l in cfg["lights"]],
        })
    manifest.save(out_dir / "manifest.json")
    return manifest


def _central_rect_mask(intr: CameraIntrinsics) -> np.ndarray:
    mask = np.zeros((intr.height, intr.width), dtype=bool)
    mh, mw = intr.height // 4, intr.width // 4
    mask[mh:-mh, mw:-mw] = True
    return mask
