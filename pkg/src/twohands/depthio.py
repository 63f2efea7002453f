"""Depth frames: synthetic rendering, sensor noise, foreground, normals, backprojection."""

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .handmodel import pose_hands
from .raster import project, rasterize

log = logging.getLogger(__name__)

DEPTH_MAGIC = b"DPTH"
_DEPTH_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 290.0
    fy: float = 290.0
    cx: float = 159.5
    cy: float = 119.5
    width: int = 320
    height: int = 240
    near: float = 0.1
    far: float = 2.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @property
    def diagonal(self):
        return float(np.hypot(self.width, self.height))

    def project(self, points):
        return project(np.atleast_2d(points), self)

    def backproject_pixels(self, u, v, z):
        u, v, z = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(z, float))
        return np.stack([(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z], axis=-1)


@dataclass
class DepthFrame:
    depth: np.ndarray  # (H, W) metres, 0 = invalid
    foreground_mask: np.ndarray  # (H, W) bool

    @classmethod
    def from_depth(cls, depth):
        depth = np.asarray(depth, dtype=float)
        return cls(depth, depth > 0)

    @property
    def n_foreground(self):
        return int(self.foreground_mask.sum())

    @property
    def shape(self):
        return self.depth.shape


@dataclass(frozen=True)
class NoiseConfig:
    """Structured-light style artefacts; all probabilities/sigmas may be 0."""

    discontinuity_threshold: float = 0.02
    invalid_probability: float = 0.5
    depth_sigma: float = 0.001


def render_depth(template, params, camera):
    posed = pose_hands(template, params)
    buf = rasterize(posed.vertex_positions, template.both_faces, camera)
    return DepthFrame.from_depth(buf.depth)


def add_sensor_noise(frame, seed, params=NoiseConfig()):
    """Invalidate pixels at depth discontinuities and jitter the remaining depths.

    A valid pixel is a discontinuity pixel when its 3x3 neighbourhood (background
    counted as depth 0) spans more than ``discontinuity_threshold``.
    """
    rng = np.random.default_rng(seed)
    depth = frame.depth
    valid = depth > 0
    hi = ndimage.maximum_filter(depth, size=3, mode="nearest")
    lo = ndimage.minimum_filter(depth, size=3, mode="nearest")
    edge = valid & (hi - lo > params.discontinuity_threshold)
    drop = edge & (rng.random(depth.shape) < params.invalid_probability)
    jitter = rng.standard_normal(depth.shape) * params.depth_sigma
    out = np.where(valid, depth + jitter, 0.0)
    out[drop] = 0.0
    out[out < 0] = 0.0
    return DepthFrame(out, frame.foreground_mask & (out > 0))


def extract_foreground(frame, near_thresh, far_thresh):
    d = frame.depth
    mask = (d > 0) & (d >= near_thresh) & (d <= far_thresh)
    return DepthFrame(d, mask)


def backproject(frame, camera):
    """Foreground points in row-major pixel order, shape (N_I, 3)."""
    v, u = np.nonzero(frame.foreground_mask)
    return camera.backproject_pixels(u, v, frame.depth[v, u])


def foreground_pixels(frame):
    """Flat pixel indices of the foreground, in backprojection order."""
    return np.flatnonzero(frame.foreground_mask)


def sobel_normals(frame, camera, discontinuity_threshold=0.02):
    """Unit normals for the foreground points, oriented towards the camera.

    Returns ``(normals, stats)``; ``stats`` counts pixels that borrowed the
    nearest valid normal (``fallback``) and camera-facing defaults
    (``degenerate``).
    """
    z = frame.depth
    mask = frame.foreground_mask
    H, W = z.shape
    vv, uu = np.mgrid[0:H, 0:W].astype(float)
    zu = ndimage.sobel(z, axis=1, mode="nearest") / 8.0
    zv = ndimage.sobel(z, axis=0, mode="nearest") / 8.0
    du = np.stack([(z + (uu - camera.cx) * zu) / camera.fx, (vv - camera.cy) * zu / camera.fy, zu], -1)
    dv = np.stack([(uu - camera.cx) * zv / camera.fx, (z + (vv - camera.cy) * zv) / camera.fy, zv], -1)
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)

    full = ndimage.minimum_filter(mask.astype(np.uint8), size=3, mode="constant", cval=0) == 1
    zhi = ndimage.maximum_filter(np.where(mask, z, -np.inf), size=3, mode="nearest")
    zlo = ndimage.minimum_filter(np.where(mask, z, np.inf), size=3, mode="nearest")
    good = full & (zhi - zlo < discontinuity_threshold) & (norm > 1e-12)

    P = camera.backproject_pixels(uu, vv, z)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm[..., None]
    flip = np.sum(n * P, axis=-1) > 0
    n[flip] *= -1

    stats = {"fallback": 0, "degenerate": 0}
    out = np.zeros((H, W, 3))
    if good.any():
        out[good] = n[good]
        need = mask & ~good
        if need.any():
            _, (iv, iu) = ndimage.distance_transform_edt(~good, return_indices=True)
            out[need] = n[iv[need], iu[need]]
            stats["fallback"] = int(need.sum())
    else:
        stats["degenerate"] = int(mask.sum())
        out[mask] = [0.0, 0.0, -1.0]
    if stats["fallback"] or stats["degenerate"]:
        log.debug("sobel_normals: %(fallback)d fallback, %(degenerate)d degenerate", stats)
    return out[mask], stats


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def write_depth(path, frame):
    """Binary depth: header (magic ``DPTH``, uint32 width, uint32 height), then float32 LE row-major metres."""
    h, w = frame.depth.shape
    with open(path, "wb") as fh:
        fh.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, w, h))
        fh.write(np.ascontiguousarray(frame.depth, dtype="<f4").tobytes())


def read_depth(path):
    data = Path(path).read_bytes()
    magic, w, h = _DEPTH_HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth file")
    depth = np.frombuffer(data, dtype="<f4", count=w * h, offset=_DEPTH_HEADER.size)
    return DepthFrame.from_depth(depth.reshape(h, w).astype(np.float64))


def write_depth_pgm(path, frame):
    """16-bit PGM in millimetres."""
    mm = np.clip(np.round(frame.depth * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path, format="PPM")


def with_mask(frame, mask):
    return replace(frame, foreground_mask=mask & (frame.depth > 0))
