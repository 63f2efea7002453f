"""Fitting energy as stacked least-squares residual blocks with analytic Jacobians.

Blocks, in assembly order: ``point``, ``plane``, ``shape``, ``pose``, ``temp``,
``coll``. A block whose weight is zero contributes no rows. ``||f||^2`` equals the
weighted sum of the term energies.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from .handmodel import GLOBAL_DOF, HandParams, pose_hands, pose_with_jacobian, proxy_exemption_mask

BLOCKS = ("point", "plane", "shape", "pose", "temp", "coll")
_TWO_PI_15 = (2.0 * np.pi) ** 1.5


@dataclass(frozen=True)
class EnergyWeights:
    w_point: float = 1.0
    w_plane: float = 3.0
    w_shape: float = 5e-2
    w_pose: float = 2e-4
    w_temp: float = 1e-2
    w_coll: float = 5e2
    collision_epsilon: float = 0.0
    collision_exempt_hops: int = 1  # -1 keeps every pair
    regularize_global: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.startswith("w_") and not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")
        if self.collision_epsilon < 0:
            raise ValueError("collision_epsilon must be >= 0")

    def weight(self, block):
        return getattr(self, "w_" + block)

    def only(self, block):
        """Copy with every weight zeroed except ``block``."""
        kw = {f"w_{b}": (self.weight(b) if b == block else 0.0) for b in BLOCKS}
        return EnergyWeights(**{**self.__dict__, **kw})


@dataclass
class FrameData:
    points: np.ndarray  # (N_I, 3)
    normals: np.ndarray  # (N_I, 3)
    correspondence: object  # CorrespondenceMap over the stacked vertices (pixel indices)
    pixel_index: np.ndarray  # (N_I,) flat pixel of each point, ascending
    prev_params: HandParams = None
    rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        self.pixel_index = np.asarray(self.pixel_index, dtype=np.int64)
        if not (len(self.points) == len(self.normals) == len(self.pixel_index)):
            raise ValueError("points, normals and pixel_index must have equal length")
        if len(self.normals) and np.max(np.abs(np.linalg.norm(self.normals, axis=1) - 1)) > 1e-6:
            raise ValueError("normals must be unit length")
        if np.any(np.diff(self.pixel_index) <= 0):
            raise ValueError("pixel_index must be strictly increasing")
        a = self.correspondence.assignment
        rows = np.full(len(a), -1, dtype=np.int64)
        if len(self.pixel_index):
            pos = np.searchsorted(self.pixel_index, a)
            pos = np.minimum(pos, len(self.pixel_index) - 1)
            hit = (a >= 0) & (self.pixel_index[pos] == a)
            rows[hit] = pos[hit]
        self.rows = rows

    @property
    def visible(self):
        """Stacked vertex ids with a usable correspondence."""
        return np.flatnonzero(self.rows >= 0)

    def with_prev(self, prev):
        return FrameData(self.points, self.normals, self.correspondence, self.pixel_index, prev)

    def restricted(self, keep):
        """Copy in which vertices outside the boolean mask ``keep`` lose their correspondence."""
        c = self.correspondence
        corr = type(c)(np.where(keep, c.assignment, -1), c.distance.copy())
        return FrameData(self.points, self.normals, corr, self.pixel_index, self.prev_params)


@dataclass
class ResidualSystem:
    residuals: np.ndarray
    jacobian: np.ndarray  # None when assembled without derivatives
    block_index: dict  # name -> slice

    @property
    def energy(self):
        return float(self.residuals @ self.residuals)

    def block_energy(self, name):
        s = self.block_index.get(name)
        if s is None:
            return 0.0
        r = self.residuals[s]
        return float(r @ r)

    def term_energies(self):
        return {b: self.block_energy(b) for b in BLOCKS}

    def block(self, name):
        s = self.block_index[name]
        return self.residuals[s], (None if self.jacobian is None else self.jacobian[s])


# --------------------------------------------------------------------------
# collision
# --------------------------------------------------------------------------

def collision_pair_integral(mu_p, sigma_p, mu_q, sigma_q):
    """Integral over R^3 of the product of two unnormalised isotropic Gaussians (m^3)."""
    sp2, sq2 = np.square(sigma_p), np.square(sigma_q)
    if np.any(np.asarray(sigma_p) <= 0) or np.any(np.asarray(sigma_q) <= 0):
        raise ValueError("sigmas must be positive")
    s = sp2 + sq2
    d2 = np.sum(np.square(np.asarray(mu_p, float) - np.asarray(mu_q, float)), axis=-1)
    return _TWO_PI_15 * (sp2 * sq2) ** 1.5 / s ** 1.5 * np.exp(-d2 / (2.0 * s))


def collision_pairs(template, hops=1):
    """Proxy index pairs (p < q) that enter the collision energy."""
    n = 2 * template.n_proxies
    p, q = np.triu_indices(n, k=1)
    if hops < 0:
        return p, q
    mask = proxy_exemption_mask(template, hops)
    keep = ~mask[p, q]
    return p[keep], q[keep]


def inter_hand_overlap(posed):
    """Total pairwise overlap between left-hand and right-hand proxies."""
    h = posed.hand_of_proxy
    L, R = np.flatnonzero(h == 0), np.flatnonzero(h == 1)
    mu, sg = posed.proxy_means, posed.proxy_sigmas
    I = collision_pair_integral(mu[L][:, None], sg[L][:, None], mu[R][None], sg[R][None])
    return float(I.sum())


def _collision_block(posed, jac, pairs, w, eps):
    p, q = pairs
    mu, sg = posed.proxy_means, posed.proxy_sigmas
    s = sg[p] ** 2 + sg[q] ** 2
    amp = _TWO_PI_15 * (sg[p] ** 2 * sg[q] ** 2) ** 1.5 / s ** 1.5
    diff = mu[p] - mu[q]
    d2 = np.sum(diff ** 2, axis=1)
    if eps == 0.0:
        # sqrt(w I) is itself a Gaussian: smooth and finite everywhere
        r = np.sqrt(w * amp) * np.exp(-d2 / (4.0 * s))
        dr_ddiff = -(r / (2.0 * s))[:, None] * diff
    else:
        I = amp * np.exp(-d2 / (2.0 * s))
        root = np.sqrt(w * (I + eps))
        r = root - np.sqrt(w * eps)
        dI_ddiff = -(I / s)[:, None] * diff
        dr_ddiff = (w / (2.0 * root))[:, None] * dI_ddiff
    if jac is None:
        return r, None
    # rows this deep in the tail have derivatives below ~1e-12; leave them zero
    live = np.flatnonzero(r > 1e-15)
    J = np.zeros((len(r), jac.means.shape[-1]))
    J[live] = np.einsum("ra,ran->rn", dr_ddiff[live], jac.means[p[live]] - jac.means[q[live]])
    return r, J


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------

def point_residuals(posed, data, w, jac=None):
    vis = data.visible
    d = data.points[data.rows[vis]]
    r = np.sqrt(w) * (posed.vertex_positions[vis] - d)
    J = None if jac is None else np.sqrt(w) * _vertex_rows(jac, vis).reshape(-1, jac.vertices.shape[-1])
    return r.ravel(), J


def plane_residuals(posed, data, w, jac=None):
    vis = data.visible
    d = data.points[data.rows[vis]]
    n = data.normals[data.rows[vis]]
    r = np.sqrt(w) * np.sum((posed.vertex_positions[vis] - d) * n, axis=1)
    J = None if jac is None else np.sqrt(w) * np.einsum("va,van->vn", n, _vertex_rows(jac, vis))
    return r, J


def _vertex_rows(jac, vis):
    pos = np.searchsorted(jac.vertex_ids, vis)
    return jac.vertices[pos]


def _pose_columns(params, regularize_global):
    s, p = params.n_shape, params.n_pose
    start = 0 if regularize_global else GLOBAL_DOF
    local = np.arange(start, p)
    return np.concatenate([2 * s + local, 2 * s + p + local])


def prior_residuals(params, w_shape, w_pose, regularize_global=False):
    """Returns ``(shape_block, pose_block)`` as (residual, jacobian) pairs."""
    x = params.to_vector()
    n, s = len(x), params.n_shape
    cs = np.arange(2 * s)
    cp = _pose_columns(params, regularize_global)
    Js = np.zeros((len(cs), n))
    Js[np.arange(len(cs)), cs] = np.sqrt(w_shape)
    Jp = np.zeros((len(cp), n))
    Jp[np.arange(len(cp)), cp] = np.sqrt(w_pose)
    return (np.sqrt(w_shape) * x[cs], Js), (np.sqrt(w_pose) * x[cp], Jp)


def temporal_residuals(params, prev, w):
    x = params.to_vector()
    if prev is None:
        return np.zeros(0), np.zeros((0, len(x)))
    return np.sqrt(w) * (x - prev.to_vector()), np.sqrt(w) * np.eye(len(x))


def collision_residuals(template, posed, w, epsilon=0.0, jac=None, hops=1, pairs=None):
    """One row per proxy pair; derivatives w.r.t. shape are withheld (set to zero)."""
    if pairs is None:
        pairs = collision_pairs(template, hops)
    r, J = _collision_block(posed, jac, pairs, w, epsilon)
    if J is not None:
        J[:, :2 * template.n_shape] = 0.0
    return r, J


def assemble(template, params, data, weights, jacobian=True):
    """Stack all active residual blocks for ``params``."""
    vis = data.visible if data is not None else np.zeros(0, dtype=np.int64)
    need_data = data is not None and (weights.w_point > 0 or weights.w_plane > 0)
    ids = vis if need_data else np.zeros(0, dtype=np.int64)
    if jacobian:
        posed, jac = pose_with_jacobian(template, params, vertex_ids=ids)
    else:
        posed, jac = pose_hands(template, params), None

    blocks = []
    if need_data and weights.w_point > 0:
        blocks.append(("point",) + point_residuals(posed, data, weights.w_point, jac))
    if need_data and weights.w_plane > 0:
        blocks.append(("plane",) + plane_residuals(posed, data, weights.w_plane, jac))
    sh, po = prior_residuals(params, weights.w_shape, weights.w_pose, weights.regularize_global)
    if weights.w_shape > 0:
        blocks.append(("shape",) + sh)
    if weights.w_pose > 0:
        blocks.append(("pose",) + po)
    prev = data.prev_params if data is not None else None
    if weights.w_temp > 0 and prev is not None:
        blocks.append(("temp",) + temporal_residuals(params, prev, weights.w_temp))
    if weights.w_coll > 0:
        blocks.append(("coll",) + collision_residuals(
            template, posed, weights.w_coll, weights.collision_epsilon, jac, weights.collision_exempt_hops,
            pairs=_cached_pairs(template, weights.collision_exempt_hops)))

    n = params.to_vector().size
    index, start = {}, 0
    for name, r, _ in blocks:
        index[name] = slice(start, start + len(r))
        start += len(r)
    f = np.concatenate([b[1] for b in blocks]) if blocks else np.zeros(0)
    J = None
    if jacobian:
        J = np.concatenate([b[2] for b in blocks]) if blocks else np.zeros((0, n))
    return ResidualSystem(f, J, index)


_PAIR_CACHE = {}


def _cached_pairs(template, hops):
    key = (id(template), hops)
    hit = _PAIR_CACHE.get(key)
    if hit is None or hit[0] is not template:
        hit = (template, collision_pairs(template, hops))
        _PAIR_CACHE[key] = hit
    return hit[1]


def total_energy(template, params, data, weights):
    return assemble(template, params, data, weights, jacobian=False).energy


def direct_term_energies(template, params, data, weights):
    """Loop-based weighted term energies (independent of the block assembly)."""
    posed = pose_hands(template, params)
    out = dict.fromkeys(BLOCKS, 0.0)
    if data is not None:
        for i in range(len(data.rows)):
            j = data.rows[i]
            if j < 0:
                continue
            e = posed.vertex_positions[i] - data.points[j]
            out["point"] += weights.w_point * float(e @ e)
            out["plane"] += weights.w_plane * float(e @ data.normals[j]) ** 2
    s = params.n_shape
    x = params.to_vector()
    out["shape"] = weights.w_shape * float(x[:2 * s] @ x[:2 * s])
    cp = _pose_columns(params, weights.regularize_global)
    out["pose"] = weights.w_pose * float(x[cp] @ x[cp])
    if data is not None and data.prev_params is not None:
        d = x - data.prev_params.to_vector()
        out["temp"] = weights.w_temp * float(d @ d)
    p, q = collision_pairs(template, weights.collision_exempt_hops)
    mu, sg = posed.proxy_means, posed.proxy_sigmas
    for a, b in zip(p, q):
        out["coll"] += weights.w_coll * float(collision_pair_integral(mu[a], sg[a], mu[b], sg[b]))
    return out
