"""Image file plumbing: PFM (float32), PNG (8/16-bit via OpenCV), sRGB transfer."""

from __future__ import annotations

import re
from pathlib import Path

import cv2
import numpy as np


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return np.where(x <= 0.0031308, x * 12.92, 1.055 * x ** (1 / 2.4) - 0.055)


def read_pfm(path) -> np.ndarray:
    """Read a PFM file (bottom-up scanline order) into float32 HxW or HxWx3."""
    data = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a PFM file")
    color = m.group(1) == b"PF"
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    offset = m.end()
    count = w * h * (3 if color else 1)
    dtype = "<f4" if scale < 0 else ">f4"
    pixels = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    if pixels.size != count:
        raise ValueError(f"{path}: truncated PFM payload")
    img = pixels.reshape((h, w, 3) if color else (h, w)).astype(np.float32)
    return img[::-1].copy()  # stored bottom-to-top


def write_pfm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 3:
        header = b"PF\n"
    elif img.ndim == 2:
        header = b"Pf\n"
    else:
        raise ValueError("PFM supports HxW or HxWx3 images")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n-1.0\n".encode())
        f.write(img[::-1].astype("<f4").tobytes())


def read_png(path) -> np.ndarray:
    """Read an 8/16-bit PNG into float [0, 1]; RGB for color, HxW for gray."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"cannot read image {path}")
    if raw.ndim == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGB if raw.shape[2] == 4 else cv2.COLOR_BGR2RGB)
    peak = 65535.0 if raw.dtype == np.uint16 else 255.0
    return raw.astype(np.float32) / peak


def write_png(path, image: np.ndarray, bits: int = 8) -> None:
    """Write float [0, 1] data as an 8- or 16-bit PNG (values are clipped)."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    peak = 255 if bits == 8 else 65535
    dtype = np.uint8 if bits == 8 else np.uint16
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    quant = np.round(img * peak).astype(dtype)
    if quant.ndim == 3:
        quant = cv2.cvtColor(quant, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), quant):
        raise IOError(f"failed to write {path}")


def read_image(path, gamma: str = "linear") -> np.ndarray:
    """Read PNG or PFM to linear float RGB; sRGB-flagged PNGs are linearized."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        img = read_pfm(path)
    else:
        img = read_png(path)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if gamma == "srgb":
        img = srgb_to_linear(img).astype(np.float32)
    elif gamma != "linear":
        raise ValueError(f"unknown gamma flag {gamma!r}")
    return img


def read_depth(path) -> np.ndarray:
    """Read a PFM depth map in meters; non-positive/non-finite entries become NaN."""
    depth = read_pfm(path)
    if depth.ndim == 3:
        depth = depth[..., 0]
    depth = depth.astype(float)
    bad = ~np.isfinite(depth) | (depth <= 0)
    depth[bad] = np.nan
    return depth


def write_depth(path, depth: np.ndarray) -> None:
    """Write a depth map as PFM; invalid (NaN/inf) pixels are stored as -1."""
    d = np.asarray(depth, dtype=np.float32).copy()
    d[~np.isfinite(d)] = -1.0
    write_pfm(path, d)


def read_mask(path) -> np.ndarray:
    """Read a region mask PNG: nonzero = inside."""
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise ValueError(f"cannot read mask {path}")
    return raw > 0


def write_mask(path, mask: np.ndarray) -> None:
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    if not cv2.imwrite(str(path), img):
        raise IOError(f"failed to write {path}")
