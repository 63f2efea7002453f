"""Dense correspondence encoding and vertex-to-pixel matching.

Every model vertex gets a 4-channel colour: three surface channels from an HSV
cylinder wrapped around a geodesic MDS embedding of the hand, plus a
segmentation channel (0 left, 0.5 right). The synthetic oracle renders these
colours into a per-pixel image (non-hand pixels carry segmentation 1), and the
matcher assigns each vertex its nearest pixel colour if it is closer than ``eta``.
"""

import functools
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

from .depthio import DepthFrame, NoiseConfig, add_sensor_noise
from .handmodel import N_FINGERS, _edges, pose_hands
from .raster import project, rasterize

log = logging.getLogger(__name__)

SEG_LEFT, SEG_RIGHT, SEG_BACKGROUND = 0.0, 0.5, 1.0
DEFAULT_ETA = 0.04
VISIBILITY_TOLERANCE = 1e-3  # metres between a vertex and the z-buffer

CORR_MAGIC = b"CORR"
CHANNEL_ORDER = b"RGBS"
_CORR_HEADER = struct.Struct("<4sII4s")


@dataclass
class VertexColorMap:
    colors: np.ndarray  # (2 N_V, 4), left block first

    def check(self):
        c = self.colors
        n = len(c) // 2
        assert np.all((c >= 0) & (c <= 1))
        assert np.all(c[:n, 3] == SEG_LEFT) and np.all(c[n:, 3] == SEG_RIGHT)
        assert np.array_equal(c[:n, :3], c[n:, :3])


@dataclass
class CorrespondenceImage:
    channels: np.ndarray  # (H, W, 4)

    @property
    def height(self):
        return self.channels.shape[0]

    @property
    def width(self):
        return self.channels.shape[1]

    @property
    def hand_mask(self):
        return self.channels[..., 3] != SEG_BACKGROUND

    def segmentation(self):
        """Per-pixel label: 0 left, 1 right, 2 background (nearest encoded value)."""
        s = self.channels[..., 3]
        return np.argmin(np.abs(s[..., None] - np.array([SEG_LEFT, SEG_RIGHT, SEG_BACKGROUND])), axis=-1)


@dataclass
class CorrespondenceMap:
    assignment: np.ndarray  # (n_vertices,) flat pixel index, -1 = none
    distance: np.ndarray = None  # colour distance to the nearest pixel

    @property
    def visibility(self):
        return self.assignment >= 0

    @property
    def n_visible(self):
        return int(self.visibility.sum())

    @classmethod
    def empty(cls, n):
        return cls(np.full(n, -1, dtype=np.int64), np.full(n, np.inf))


@dataclass(frozen=True)
class OracleNoise:
    color_sigma: float = 0.01
    depth: NoiseConfig = None  # None disables depth artefacts
    seed: int = 0
    snap_vertices: bool = True


# --------------------------------------------------------------------------
# encoding
# --------------------------------------------------------------------------

def mesh_graph(vertices, faces):
    e = np.unique(_edges(faces), axis=0)
    w = np.linalg.norm(vertices[e[:, 0]] - vertices[e[:, 1]], axis=1)
    n = len(vertices)
    return coo_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()


def geodesic_distances(template=None, vertices=None, faces=None):
    """All-pairs shortest paths over the edge graph (Euclidean edge weights)."""
    if template is not None:
        vertices, faces = template.vertices, template.faces
    G = mesh_graph(vertices, faces)
    ncomp, labels = connected_components(G, directed=False)
    if ncomp > 1:
        parts = [f"component {c}: {np.sum(labels == c)} vertices (first {np.argmax(labels == c)})"
                 for c in range(ncomp)]
        raise ValueError("mesh is disconnected; " + "; ".join(parts))
    D = dijkstra(G, directed=False)
    return np.minimum(D, D.T)


def mds_embed(distances, dim=3):
    """Classical MDS; coordinates are returned centred at the origin."""
    D = np.asarray(distances, dtype=float)
    n = len(D)
    Jc = np.eye(n) - 1.0 / n
    B = -0.5 * Jc @ (D ** 2) @ Jc
    evals, evecs = np.linalg.eigh(B)
    order = np.argsort(evals)[::-1][:dim]
    evals, evecs = evals[order], evecs[:, order]
    pos = evals > 0
    if pos.sum() < dim:
        log.warning("mds_embed: only %d positive eigenvalues for dim=%d; padding with zeros", pos.sum(), dim)
    X = np.zeros((n, dim))
    X[:, pos] = evecs[:, pos] * np.sqrt(evals[pos])
    return X - X.mean(axis=0)


def mds_stress(distances, embedding):
    E = np.linalg.norm(embedding[:, None] - embedding[None], axis=-1)
    return float(np.sum((distances - E) ** 2) / np.sum(distances ** 2))


def hsv_colorize(embedding, template):
    """Wrap an HSV cylinder around the embedding.

    The cylinder axis is the embedding's least-variance principal direction, so
    the fingers fan out around it. Hue follows the azimuth, piecewise-linearly
    warped so the fingertips land on hues 0 (thumb), 0.2, 0.4, 0.6, 0.8
    (little finger); saturation is the normalised radius and value the
    normalised axial coordinate (remapped to [0.25, 1]).
    """
    E = np.asarray(embedding, dtype=float)
    if len(E) != template.n_vertices:
        raise ValueError("embedding length differs from the template vertex count")
    E = E - E.mean(axis=0)
    cov = E.T @ E / len(E)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 1e-18 or evals[-2] <= 1e-18:
        raise ValueError("degenerate embedding (zero variance)")
    a1, a2, axis = evecs[:, 2], evecs[:, 1], evecs[:, 0]
    phi = np.arctan2(E @ a2, E @ a1)
    radial = np.hypot(E @ a1, E @ a2)
    axial = E @ axis

    tips = template.tip_vertices
    rel = np.mod(phi[tips] - phi[tips[0]], 2 * np.pi)
    if not np.all(np.diff(rel) > 0):
        rel = np.mod(-(phi[tips] - phi[tips[0]]), 2 * np.pi)
        phi = -phi
    if not np.all(np.diff(rel) > 0):
        raise ValueError("fingertips are not in cyclic azimuth order around the embedding axis")
    alpha = np.mod(phi - phi[tips[0]], 2 * np.pi)
    knots = np.concatenate([rel, [2 * np.pi]])
    hue = np.mod(np.interp(alpha, knots, np.arange(N_FINGERS + 1) / N_FINGERS), 1.0)

    sat = radial / radial.max()
    span = axial.max() - axial.min()
    val = 0.25 + 0.75 * (axial - axial.min()) / span
    rgb = np.clip(hsv_to_rgb(np.stack([hue, sat, val], axis=1)), 0.0, 1.0)
    n = template.n_vertices
    colors = np.zeros((2 * n, 4))
    colors[:n, :3] = rgb
    colors[n:, :3] = rgb
    colors[:n, 3] = SEG_LEFT
    colors[n:, 3] = SEG_RIGHT
    return VertexColorMap(colors)


@functools.lru_cache(maxsize=8)
def vertex_colors(template):
    """Cached geodesic-MDS-HSV colours for ``template``."""
    return hsv_colorize(mds_embed(geodesic_distances(template)), template)


def naive_colorize(template):
    """RGB cube mapped onto rest positions (comparison baseline)."""
    V = template.vertices
    rgb = (V - V.min(0)) / np.ptp(V, axis=0)
    n = template.n_vertices
    colors = np.zeros((2 * n, 4))
    colors[:n, :3] = colors[n:, :3] = rgb
    colors[n:, 3] = SEG_RIGHT
    return VertexColorMap(colors)


# --------------------------------------------------------------------------
# oracle rendering
# --------------------------------------------------------------------------

def visible_vertices(buf, points, camera, tolerance=VISIBILITY_TOLERANCE):
    """Vertices whose depth lies within ``tolerance`` of the z-buffer at their nearest pixel.

    Returns ``(vertex_ids, pixel_ids)`` for the visible vertices.
    """
    uv = project(points, camera)
    H, W = camera.height, camera.width
    with np.errstate(invalid="ignore"):
        pu = np.round(uv[:, 0])
        pv = np.round(uv[:, 1])
        inside = (points[:, 2] >= camera.near) & (pu >= 0) & (pu < W) & (pv >= 0) & (pv < H)
    vid = np.nonzero(inside)[0]
    pix = (pv[vid] * W + pu[vid]).astype(np.int64)
    z = buf.depth.ravel()[pix]
    ok = (z > 0) & (np.abs(points[vid, 2] - z) < tolerance)
    return vid[ok], pix[ok]


def splat_vertices(buf, points, camera, tolerance=VISIBILITY_TOLERANCE):
    """Visible vertices and the pixel each one is painted on.

    Each pixel appears once: when visible vertices share a nearest pixel, the
    one projecting closest to its centre wins.
    """
    vid, pix = visible_vertices(buf, points, camera, tolerance)
    uv = project(points[vid], camera)
    off = np.hypot(uv[:, 0] - np.round(uv[:, 0]), uv[:, 1] - np.round(uv[:, 1]))
    order = np.lexsort((vid, off, pix))
    keep = np.ones(len(order), dtype=bool)
    keep[1:] = pix[order][1:] != pix[order][:-1]
    sel = order[keep]
    return vid[sel], pix[sel]


def render_correspondence_oracle(template, params, camera, noise=OracleNoise(), colors=None):
    """Synthetic stand-in for the correspondence regressor: (depth frame, colour image)."""
    colors = vertex_colors(template) if colors is None else colors
    posed = pose_hands(template, params)
    faces = template.both_faces
    buf = rasterize(posed.vertex_positions, faces, camera)
    H, W = camera.height, camera.width
    img = np.zeros((H, W, 4))
    img[..., 3] = SEG_BACKGROUND
    cov = buf.covered
    fv = faces[buf.face[cov]]
    img[cov] = np.einsum("pk,pkc->pc", buf.bary[cov], colors.colors[fv])
    img[cov, 3] = np.where(fv[:, 0] < template.n_vertices, SEG_LEFT, SEG_RIGHT)
    if noise.snap_vertices:
        vid, pix = splat_vertices(buf, posed.vertex_positions, camera)
        img.reshape(-1, 4)[pix] = colors.colors[vid]

    rng = np.random.default_rng(noise.seed)
    if noise.color_sigma > 0:
        jitter = rng.standard_normal((H, W, 3)) * noise.color_sigma
        img[..., :3] = np.where(cov[..., None], np.clip(img[..., :3] + jitter, 0.0, 1.0), img[..., :3])
    frame = DepthFrame.from_depth(buf.depth)
    if noise.depth is not None:
        frame = add_sensor_noise(frame, int(rng.integers(2 ** 31)), noise.depth)
    return frame, CorrespondenceImage(img)


# --------------------------------------------------------------------------
# matching
# --------------------------------------------------------------------------

def match_correspondences(image, colors, eta=DEFAULT_ETA, chunk=96):
    """Thresholded nearest-colour assignment of every vertex to a hand pixel.

    Pixels whose segmentation channel is 1 are excluded from the search; ties
    resolve to the lowest pixel index.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    M = colors.colors
    n = len(M)
    out = CorrespondenceMap.empty(n)
    flat = image.channels.reshape(-1, 4)
    pix = np.flatnonzero(flat[:, 3] != SEG_BACKGROUND)
    if len(pix) == 0:
        return out
    N = flat[pix]
    best = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    for s in range(0, n, chunk):
        diff = M[s:s + chunk, None, :] - N[None, :, :]
        d2 = np.einsum("vpc,vpc->vp", diff, diff)
        j = np.argmin(d2, axis=1)
        best[s:s + chunk] = j
        dist[s:s + chunk] = np.sqrt(d2[np.arange(len(j)), j])
    ok = dist < eta
    out.assignment[ok] = pix[best[ok]]
    out.distance = dist
    return out


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def write_correspondence(path, image):
    """Header (magic ``CORR``, uint32 width, uint32 height, channel order ``RGBS``), then float32 LE (H, W, 4)."""
    with open(path, "wb") as fh:
        fh.write(_CORR_HEADER.pack(CORR_MAGIC, image.width, image.height, CHANNEL_ORDER))
        fh.write(np.ascontiguousarray(image.channels, dtype="<f4").tobytes())


def read_correspondence(path):
    data = Path(path).read_bytes()
    magic, w, h, order = _CORR_HEADER.unpack_from(data)
    if magic != CORR_MAGIC or order != CHANNEL_ORDER:
        raise ValueError(f"{path}: not a correspondence image")
    a = np.frombuffer(data, dtype="<f4", count=w * h * 4, offset=_CORR_HEADER.size)
    return CorrespondenceImage(a.reshape(h, w, 4).astype(np.float64))


def export_correspondence_png(stem, image):
    """``<stem>_rgb.png`` (surface channels) and ``<stem>_seg.png`` (segmentation)."""
    stem = Path(stem)
    rgb = np.round(image.channels[..., :3] * 255).astype(np.uint8)
    seg = np.round(image.channels[..., 3] * 255).astype(np.uint8)
    Image.fromarray(rgb).save(stem.with_name(stem.name + "_rgb.png"))
    Image.fromarray(seg).save(stem.with_name(stem.name + "_seg.png"))
