"""Glue from observations (depth + correspondence image) to solver input."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .correspond import (CorrespondenceMap, DEFAULT_ETA, OracleNoise, match_correspondences,
                         render_correspondence_oracle, vertex_colors)
from .depthio import backproject, extract_foreground, foreground_pixels, sobel_normals
from .energy import FrameData
from .handmodel import pose_hands, vertex_normals


@dataclass(frozen=True)
class ObservationConfig:
    eta: float = DEFAULT_ETA
    fg_near: float = 0.2
    fg_far: float = 1.2
    normal_discontinuity: float = 0.02


def observe(depth_frame, corr_image, colors, camera, cfg=ObservationConfig(), correspondence=None):
    """Foreground points, Sobel normals and vertex-to-pixel matches for one frame."""
    fg = extract_foreground(depth_frame, cfg.fg_near, cfg.fg_far)
    points = backproject(fg, camera)
    normals, _ = sobel_normals(fg, camera, cfg.normal_discontinuity)
    if correspondence is None:
        correspondence = match_correspondences(corr_image, colors, cfg.eta)
    return FrameData(points, normals, correspondence, foreground_pixels(fg))


def synthetic_frame(template, params, camera, noise=OracleNoise(), cfg=ObservationConfig()):
    """Render the oracle for ``params`` and turn it into ``FrameData``."""
    depth, image = render_correspondence_oracle(template, params, camera, noise)
    return observe(depth, image, vertex_colors(template), camera, cfg), depth, image


def closest_point_correspondence(template, params, points, pixel_index, labels=None, max_distance=0.03):
    """Nearest-point matches for camera-facing model vertices (ICP-style baseline).

    ``labels`` (per point: 0 left, 1 right, 2 other) restricts each hand's
    search to its own segment; ``None`` searches the whole cloud.
    """
    posed = pose_hands(template, params)
    V = posed.vertex_positions
    nv = template.n_vertices
    facing = np.sum(vertex_normals(V, template.both_faces) * V, axis=1) < 0
    out = CorrespondenceMap.empty(len(V))
    groups = [(np.arange(len(V)), np.arange(len(points)))]
    if labels is not None:
        groups = [(np.arange(h * nv, (h + 1) * nv), np.flatnonzero(labels == h)) for h in (0, 1)]
    for vids, pids in groups:
        vids = vids[facing[vids]]
        if len(pids) == 0 or len(vids) == 0:
            continue
        dist, j = cKDTree(points[pids]).query(V[vids])
        ok = dist < max_distance
        out.assignment[vids[ok]] = pixel_index[pids[j[ok]]]
        out.distance[vids[ok]] = dist[ok]
    return out
