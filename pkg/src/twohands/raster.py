"""Vectorised z-buffer rasterizer with pixel-centre sampling.

Pixel ``(u, v)`` is sampled at image coordinates ``(u, v)``; a camera-frame point
``(x, y, z)`` projects to ``(fx x / z + cx, fy y / z + cy)``. No anti-aliasing and
no back-face culling.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class RasterBuffer:
    depth: np.ndarray  # (H, W) metres, 0 where empty
    face: np.ndarray  # (H, W) face index, -1 where empty
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics

    @property
    def covered(self):
        return self.face >= 0


def project(points, camera):
    z = points[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * points[:, 0] / z + camera.cx
        v = camera.fy * points[:, 1] / z + camera.cy
    return np.stack([u, v], axis=1)


def rasterize(points, faces, camera):
    H, W = camera.height, camera.width
    depth = np.zeros((H, W))
    face_buf = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    out = RasterBuffer(depth, face_buf, bary)

    tri_z = points[faces, 2]
    keep = np.all(tri_z >= camera.near, axis=1)
    if not keep.any():
        return out
    fid = np.nonzero(keep)[0]
    uv = project(points, camera)[faces[fid]]  # (F, 3, 2)
    tz = tri_z[fid]

    lo = np.ceil(uv.min(axis=1)).astype(np.int64)
    hi = np.floor(uv.max(axis=1)).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], W - 1)
    hi[:, 1] = np.minimum(hi[:, 1], H - 1)
    bw = hi[:, 0] - lo[:, 0] + 1
    bh = hi[:, 1] - lo[:, 1] + 1
    ok = (bw > 0) & (bh > 0)
    fid, uv, tz, lo, bw, bh = fid[ok], uv[ok], tz[ok], lo[ok], bw[ok], bh[ok]
    counts = bw * bh
    if counts.sum() == 0:
        return out

    # expand every (triangle, bbox pixel) candidate
    tri = np.repeat(np.arange(len(fid)), counts)
    start = np.cumsum(counts) - counts
    local = np.arange(counts.sum()) - np.repeat(start, counts)
    pu = lo[tri, 0] + local % bw[tri]
    pv = lo[tri, 1] + local // bw[tri]

    a, b, c = uv[tri, 0], uv[tri, 1], uv[tri, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    valid = np.abs(area) > 1e-12
    safe = np.where(valid, area, 1.0)
    l0 = ((b[:, 0] - pu) * (c[:, 1] - pv) - (b[:, 1] - pv) * (c[:, 0] - pu)) / safe
    l1 = ((c[:, 0] - pu) * (a[:, 1] - pv) - (c[:, 1] - pv) * (a[:, 0] - pu)) / safe
    l2 = 1.0 - l0 - l1
    inside = valid & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)

    tri, pu, pv = tri[inside], pu[inside], pv[inside]
    lam = np.stack([l0[inside], l1[inside], l2[inside]], axis=1)
    w = lam / tz[tri]
    inv_z = w.sum(axis=1)
    z = 1.0 / inv_z
    in_range = (z >= camera.near) & (z <= camera.far)
    tri, pu, pv, z, w = tri[in_range], pu[in_range], pv[in_range], z[in_range], w[in_range]
    if len(z) == 0:
        return out

    pix = pv * W + pu
    order = np.lexsort((tri, z, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    p = pix[win]
    depth.flat[p] = z[win]
    face_buf.flat[p] = fid[tri[win]]
    bary.reshape(-1, 3)[p] = w[win] * z[win, None]
    return out
