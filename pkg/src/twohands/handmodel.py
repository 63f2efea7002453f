"""Procedural two-hand surface model.

A capsule-composite hand is meshed with marching cubes, skinned to a 16-joint
skeleton (wrist + 3 joints per finger) and equipped with a linear shape
subspace, a linear articulation subspace and isotropic Gaussian collision
proxies. The right hand is the mirror image of the left hand, so vertex ``i``
of the left hand and vertex ``i`` of the right hand are symmetric partners.

Parameter layout per hand: ``beta`` (n_shape) and
``theta = [translation(3), global axis-angle(3), articulation(n_articulation)]``.
The stacked optimisation vector is ``[beta_left, beta_right, theta_left, theta_right]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage.measure import marching_cubes

N_JOINTS = 16
N_FINGERS = 5
FINGER_NAMES = ("thumb", "index", "middle", "ring", "little")
HANDS = ("left", "right")
GLOBAL_DOF = 6

# joint 0 is the wrist; finger f owns joints 1+3f (base), 2+3f, 3+3f
PARENTS = np.array([-1] + [p for f in range(N_FINGERS) for p in (0, 1 + 3 * f, 2 + 3 * f)])

_MIRROR = np.diag([-1.0, 1.0, 1.0])
_SIGMA_FLOOR = 1e-5


def finger_joints(f):
    return [1 + 3 * f, 2 + 3 * f, 3 + 3 * f]


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and subspace sizes for :func:`build_template` (meters)."""

    n_shape: int = 10
    n_articulation: int = 45
    grid_spacing: float = 0.0095
    palm_half_extent: tuple = (0.045, 0.052, 0.013)
    palm_rounding: float = 0.011
    # thumb, index, middle, ring, little
    finger_bases: tuple = (
        (0.025, -0.015, -0.005),
        (0.034, -0.085, 0.0),
        (0.011, -0.085, 0.0),
        (-0.012, -0.085, 0.0),
        (-0.034, -0.085, 0.0),
    )
    finger_directions: tuple = (
        (0.6, -0.8, -0.25),
        (0.0, -1.0, 0.0),
        (0.0, -1.0, 0.0),
        (0.0, -1.0, 0.0),
        (0.0, -1.0, 0.0),
    )
    finger_lengths: tuple = (
        (0.040, 0.032, 0.028),
        (0.042, 0.026, 0.022),
        (0.046, 0.029, 0.024),
        (0.043, 0.027, 0.023),
        (0.034, 0.020, 0.020),
    )
    finger_radii: tuple = (0.0100, 0.0085, 0.0088, 0.0082, 0.0072)
    blend_radius: float = 0.004
    skin_falloff: float = 0.007
    proxies_per_finger: int = 4
    proxies_per_hand: int = 35
    sigma_scale: float = 0.35
    relax_iterations: int = 20

    def validate(self):
        if self.n_shape < 1 or self.n_articulation < 1:
            raise ValueError("n_shape and n_articulation must be >= 1")
        if self.n_articulation > 3 * (N_JOINTS - 1):
            raise ValueError(f"n_articulation must be <= {3 * (N_JOINTS - 1)}")
        if self.n_shape > len(_SHAPE_FIELDS) + 5:
            raise ValueError(f"n_shape must be <= {len(_SHAPE_FIELDS) + 5}")
        if self.grid_spacing <= 0:
            raise ValueError("grid_spacing must be positive")
        if min(self.palm_half_extent) <= 0:
            raise ValueError("palm extent must be positive")
        for name, seg, r, d in zip(FINGER_NAMES, self.finger_lengths, self.finger_radii, self.finger_directions):
            if len(seg) != 3 or min(seg) <= 0:
                raise ValueError(f"{name}: bone lengths must be three positive numbers, got {seg}")
            if r <= 0:
                raise ValueError(f"{name}: radius must be positive, got {r}")
            if np.linalg.norm(d) == 0:
                raise ValueError(f"{name}: zero direction vector")
        if min(self.finger_radii) < self.grid_spacing * 0.5:
            raise ValueError(f"finger radius {min(self.finger_radii)} too small for grid spacing {self.grid_spacing}")
        if self.proxies_per_finger not in (3, 4):
            raise ValueError("proxies_per_finger must be 3 or 4")
        if self.proxies_per_hand < N_FINGERS * self.proxies_per_finger:
            raise ValueError("proxies_per_hand smaller than the finger proxies")
        if self.sigma_scale <= 0:
            raise ValueError("sigma_scale must be positive")
        if self.relax_iterations < 0:
            raise ValueError("relax_iterations must be >= 0")


@dataclass(frozen=True)
class ProxyAttachment:
    joint_index: int
    local_offset: np.ndarray
    sigma_vertex_pair: tuple
    sigma_scale: float = 0.35


@dataclass(frozen=True, eq=False)
class HandTemplate:
    """Rest geometry and rig of the left hand; the right hand is derived by mirroring."""

    vertices: np.ndarray  # (N_V, 3)
    faces: np.ndarray  # (N_F, 3)
    joints: np.ndarray  # (16, 3)
    parents: np.ndarray  # (16,)
    skin_weights: np.ndarray  # (N_V, 16)
    shape_basis: np.ndarray  # (3 N_V, N_S)
    joint_shape_basis: np.ndarray  # (3 * 16, N_S)
    pose_basis: np.ndarray  # (45, N_A)
    proxy_rig: tuple
    tip_vertices: np.ndarray  # (5,)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_shape(self):
        return self.shape_basis.shape[1]

    @property
    def n_articulation(self):
        return self.pose_basis.shape[1]

    @property
    def n_pose(self):
        return GLOBAL_DOF + self.n_articulation

    @property
    def n_proxies(self):
        return len(self.proxy_rig)

    @property
    def n_params(self):
        return 2 * (self.n_shape + self.n_pose)

    @cached_property
    def rigs(self):
        left = _Rig.from_template(self)
        return {"left": left, "right": left.mirrored()}

    def hand_faces(self, hand):
        return self.faces if hand == "left" else self.faces[:, ::-1].copy()

    @cached_property
    def both_faces(self):
        """Faces indexing the stacked (left, right) vertex array."""
        return np.concatenate([self.faces, self.faces[:, ::-1] + self.n_vertices])

    def check_invariants(self):
        W = self.skin_weights
        assert np.all(W >= 0) and np.allclose(W.sum(1), 1.0, atol=1e-9, rtol=0)
        G = self.shape_basis.T @ self.shape_basis
        assert np.allclose(G, np.eye(self.n_shape), atol=1e-9, rtol=0)
        assert np.all((self.faces >= 0) & (self.faces < self.n_vertices))
        _, counts = np.unique(_edges(self.faces), axis=0, return_counts=True)
        assert np.all(counts == 2)
        assert signed_volume(self.vertices, self.faces) > 0, "faces must wind outward"
        assert (self.parents == -1).sum() == 1 and self.parents[0] == -1
        assert all(self.parents[k] < k for k in range(1, N_JOINTS))


@dataclass
class HandParams:
    beta_left: np.ndarray
    beta_right: np.ndarray
    theta_left: np.ndarray
    theta_right: np.ndarray

    def __post_init__(self):
        for name in ("beta_left", "beta_right", "theta_left", "theta_right"):
            setattr(self, name, np.array(getattr(self, name), dtype=float).ravel())
        if len(self.beta_left) != len(self.beta_right) or len(self.theta_left) != len(self.theta_right):
            raise ValueError("left and right parameter blocks differ in length")
        if len(self.theta_left) < GLOBAL_DOF + 1:
            raise ValueError("theta must hold translation, rotation and >= 1 articulation coefficient")

    @classmethod
    def zeros(cls, n_shape, n_pose):
        return cls(np.zeros(n_shape), np.zeros(n_shape), np.zeros(n_pose), np.zeros(n_pose))

    @classmethod
    def for_template(cls, template):
        return cls.zeros(template.n_shape, template.n_pose)

    @classmethod
    def from_vector(cls, x, n_shape):
        x = np.asarray(x, dtype=float)
        n_pose = (len(x) - 2 * n_shape) // 2
        if len(x) != 2 * (n_shape + n_pose):
            raise ValueError("vector length inconsistent with n_shape")
        s, p = n_shape, n_pose
        return cls(x[:s], x[s:2 * s], x[2 * s:2 * s + p], x[2 * s + p:])

    @property
    def n_shape(self):
        return len(self.beta_left)

    @property
    def n_pose(self):
        return len(self.theta_left)

    def to_vector(self):
        return np.concatenate([self.beta_left, self.beta_right, self.theta_left, self.theta_right])

    def beta(self, hand):
        return self.beta_left if hand == "left" else self.beta_right

    def theta(self, hand):
        return self.theta_left if hand == "left" else self.theta_right

    def columns(self, hand):
        """Indices of ``[beta_hand, theta_hand]`` in the stacked vector."""
        s, p = self.n_shape, self.n_pose
        h = 0 if hand == "left" else 1
        return np.concatenate([np.arange(h * s, (h + 1) * s), 2 * s + h * p + np.arange(p)])

    def copy(self):
        return HandParams.from_vector(self.to_vector(), self.n_shape)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("beta_left", "beta_right", "theta_left", "theta_right")}

    @classmethod
    def from_dict(cls, d):
        return cls(d["beta_left"], d["beta_right"], d["theta_left"], d["theta_right"])


@dataclass
class PosedHands:
    vertex_positions: np.ndarray  # (2 N_V, 3), left block first
    joint_positions: np.ndarray  # (2, 16, 3)
    proxy_means: np.ndarray  # (N_C, 3)
    proxy_sigmas: np.ndarray  # (N_C,)
    hand_of_proxy: np.ndarray = field(repr=False, default=None)


@dataclass
class HandJacobian:
    """Derivatives w.r.t. the stacked parameter vector.

    ``vertices`` may cover only a subset of vertices (``vertex_ids``).
    """

    vertices: np.ndarray  # (n, 3, n_params)
    means: np.ndarray  # (N_C, 3, n_params)
    sigmas: np.ndarray  # (N_C, n_params)
    vertex_ids: np.ndarray

    def dense(self):
        n = self.vertices.shape[-1]
        return np.concatenate([self.vertices.reshape(-1, n), self.means.reshape(-1, n), self.sigmas])


# --------------------------------------------------------------------------
# rotations
# --------------------------------------------------------------------------

def skew(v):
    v = np.asarray(v, dtype=float)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -v[..., 2], v[..., 1]
    K[..., 1, 0], K[..., 1, 2] = v[..., 2], -v[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -v[..., 1], v[..., 0]
    return K


_E_SKEW = skew(np.eye(3))


def _rodrigues_coeffs(t):
    # a = sin t / t, b = (1 - cos t) / t^2, c = a'/t, d = b'/t; Taylor below 1e-2
    t = np.asarray(t, dtype=float)
    small = t < 1e-2
    ts = np.where(small, 1.0, t)
    s, co = np.sin(ts), np.cos(ts)
    omc = 2 * np.sin(ts / 2) ** 2
    t2 = t * t
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, s / ts)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, omc / ts ** 2)
    c = np.where(small, -1 / 3 + t2 / 30 - t2 * t2 / 840, (ts * co - s) / ts ** 3)
    d = np.where(small, -1 / 12 + t2 / 180 - t2 * t2 / 6720, (ts * s - 2 * omc) / ts ** 4)
    return a, b, c, d


def rodrigues(r, jacobian=False):
    """Rotation matrix of axis-angle ``r``; optionally dR/dr_i stacked as (3, 3, 3).

    ``r`` may carry leading batch dimensions, e.g. (K, 3) gives (K, 3, 3).
    """
    r = np.asarray(r, dtype=float)
    t = np.linalg.norm(r, axis=-1)
    a, b, c, d = (x[..., None, None] for x in _rodrigues_coeffs(t))
    K = skew(r)
    K2 = K @ K
    R = np.eye(3) + a * K + b * K2
    if not jacobian:
        return R
    E = _E_SKEW
    Kx, K2x = K[..., None, :, :], K2[..., None, :, :]
    a, b, c, d = (x[..., None] for x in (a, b, c, d))
    dR = (a * E + b * (E @ Kx + Kx @ E) + c * r[..., :, None, None] * Kx
          + d * r[..., :, None, None] * K2x)
    return R, dR


# --------------------------------------------------------------------------
# rig evaluation
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Rig:
    X: np.ndarray  # (N, 3)
    S: np.ndarray  # (N, 3, NS)
    J0: np.ndarray  # (16, 3)
    SJ: np.ndarray  # (16, 3, NS)
    W: np.ndarray  # (N, 16)
    B: np.ndarray  # (15, 3, NA)
    proxy_joint: np.ndarray
    proxy_offset: np.ndarray  # (C, 3)
    proxy_pair: np.ndarray  # (C, 2)
    proxy_scale: np.ndarray

    @classmethod
    def from_template(cls, t):
        n, ns = t.n_vertices, t.n_shape
        px = t.proxy_rig
        return cls(
            X=t.vertices,
            S=t.shape_basis.reshape(n, 3, ns),
            J0=t.joints,
            SJ=t.joint_shape_basis.reshape(N_JOINTS, 3, ns),
            W=t.skin_weights,
            B=t.pose_basis.reshape(N_JOINTS - 1, 3, -1),
            proxy_joint=np.array([p.joint_index for p in px]),
            proxy_offset=np.array([p.local_offset for p in px], dtype=float),
            proxy_pair=np.array([p.sigma_vertex_pair for p in px]),
            proxy_scale=np.array([p.sigma_scale for p in px], dtype=float),
        )

    def mirrored(self):
        M = _MIRROR
        return _Rig(
            X=self.X @ M, S=np.einsum("ab,nbs->nas", M, self.S), J0=self.J0 @ M,
            SJ=np.einsum("ab,nbs->nas", M, self.SJ), W=self.W,
            B=np.einsum("ab,kbs->kas", -M, self.B),
            proxy_joint=self.proxy_joint, proxy_offset=self.proxy_offset @ M,
            proxy_pair=self.proxy_pair, proxy_scale=self.proxy_scale,
        )

    @property
    def n_shape(self):
        return self.S.shape[2]

    def evaluate(self, beta, theta, jacobian=False, vertex_ids=None):
        """Posed geometry of one hand; derivatives are w.r.t. local ``[beta, theta]``."""
        ns, na = self.n_shape, self.B.shape[2]
        P = ns + GLOBAL_DOF + na
        ia = ns + GLOBAL_DOF  # first articulation column

        Jb = self.J0 + self.SJ @ beta
        art = np.einsum("kas,s->ka", self.B, theta[GLOBAL_DOF:])
        Rw = np.empty((N_JOINTS, 3, 3))
        tw = np.empty((N_JOINTS, 3))
        if jacobian:
            dRw = np.zeros((N_JOINTS, P, 3, 3))
            dtw = np.zeros((N_JOINTS, P, 3))
            dJb = np.zeros((N_JOINTS, 3, P))
            dJb[:, :, :ns] = self.SJ
            Rw[0], dRg = rodrigues(theta[3:6], jacobian=True)
            tw[0] = theta[:3]
            dRw[0, ns + 3:ns + 6] = dRg
            dtw[0, ns:ns + 3] = np.eye(3)
        else:
            Rw[0] = rodrigues(theta[3:6])
            tw[0] = theta[:3]
        if jacobian:
            Rloc, dRloc = rodrigues(art, jacobian=True)
        else:
            Rloc = rodrigues(art)
        for k in range(1, N_JOINTS):
            p = PARENTS[k]
            Rk = Rloc[k - 1]
            Rw[k] = Rw[p] @ Rk
            lever = Jb[k] - Rk @ Jb[k]
            tw[k] = Rw[p] @ lever + tw[p]
            if jacobian:
                dRk = np.zeros((P, 3, 3))
                dRk[ia:] = np.einsum("iab,is->sab", dRloc[k - 1], self.B[k - 1])
                dRw[k] = dRw[p] @ Rk + Rw[p] @ dRk
                dlever = dJb[k].T - dRk @ Jb[k] - (Rk @ dJb[k]).T
                dtw[k] = dRw[p] @ lever + dlever @ Rw[p].T + dtw[p]

        Y = self.X + self.S @ beta
        M = np.einsum("nk,kab->nab", self.W, Rw)
        V = np.einsum("nab,nb->na", M, Y) + self.W @ tw

        C = self.proxy_joint
        mloc = Jb[C] + self.proxy_offset
        means = np.einsum("cab,cb->ca", Rw[C], mloc) + tw[C]
        ia_, ib_ = self.proxy_pair[:, 0], self.proxy_pair[:, 1]
        diff = (self.X[ia_] - self.X[ib_]) + (self.S[ia_] - self.S[ib_]) @ beta
        dist = np.sqrt(np.sum(diff ** 2, axis=1) + _SIGMA_FLOOR ** 2)
        sigmas = self.proxy_scale * dist
        out = dict(vertices=V, joints=_joint_positions(Rw, tw, Jb), means=means, sigmas=sigmas)
        if not jacobian:
            return out

        W, S = self.W, self.S
        if vertex_ids is not None:
            W, S, Y, M = W[vertex_ids], S[vertex_ids], Y[vertex_ids], M[vertex_ids]
        dM = (W @ dRw.reshape(N_JOINTS, -1)).reshape(len(W), P, 3, 3)
        dV = np.einsum("npab,nb->nap", dM, Y)
        dV += (W @ dtw.reshape(N_JOINTS, -1)).reshape(len(W), P, 3).transpose(0, 2, 1)
        dV[:, :, :ns] += np.einsum("nab,nbs->nas", M, S)

        dmeans = np.einsum("cpab,cb->cap", dRw[C], mloc) + dtw[C].transpose(0, 2, 1)
        dmeans += np.einsum("cab,cbp->cap", Rw[C], dJb[C])
        dsig = np.zeros((len(C), P))
        dsig[:, :ns] = (self.proxy_scale / dist)[:, None] * np.einsum(
            "ca,cas->cs", diff, self.S[ia_] - self.S[ib_])
        out.update(d_vertices=dV, d_means=dmeans, d_sigmas=dsig)
        return out


def _joint_positions(Rw, tw, Jb):
    return np.einsum("kab,kb->ka", Rw, Jb) + tw


def _check_params(template, params):
    if params.n_shape != template.n_shape or params.n_pose != template.n_pose:
        raise ValueError(
            f"parameter dimensions (n_shape={params.n_shape}, n_pose={params.n_pose}) do not match "
            f"template (n_shape={template.n_shape}, n_pose={template.n_pose})")
    if not np.all(np.isfinite(params.to_vector())):
        raise ValueError("non-finite hand parameters")


def _evaluate(template, params, jacobian=False, vertex_ids=None):
    """Pose both hands; ``vertex_ids`` index the stacked (left, right) vertex array."""
    _check_params(template, params)
    nv = template.n_vertices
    res = {}
    for h, hand in enumerate(HANDS):
        ids = None
        if vertex_ids is not None:
            sel = vertex_ids[(vertex_ids >= h * nv) & (vertex_ids < (h + 1) * nv)]
            ids = sel - h * nv
        res[hand] = template.rigs[hand].evaluate(params.beta(hand), params.theta(hand), jacobian, ids)
    L, R = res["left"], res["right"]
    posed = PosedHands(
        vertex_positions=np.concatenate([L["vertices"], R["vertices"]]),
        joint_positions=np.stack([L["joints"], R["joints"]]),
        proxy_means=np.concatenate([L["means"], R["means"]]),
        proxy_sigmas=np.concatenate([L["sigmas"], R["sigmas"]]),
        hand_of_proxy=np.repeat([0, 1], template.n_proxies),
    )
    if not jacobian:
        return posed, None
    n = params.to_vector().size
    blocks = {}
    for key in ("d_vertices", "d_means"):
        parts = []
        for hand in HANDS:
            d = res[hand][key]
            full = np.zeros(d.shape[:2] + (n,))
            full[:, :, params.columns(hand)] = d
            parts.append(full)
        blocks[key] = np.concatenate(parts)
    sig = []
    for hand in HANDS:
        d = res[hand]["d_sigmas"]
        full = np.zeros((d.shape[0], n))
        full[:, params.columns(hand)] = d
        sig.append(full)
    ids = np.arange(2 * nv) if vertex_ids is None else np.concatenate(
        [vertex_ids[vertex_ids < nv], vertex_ids[vertex_ids >= nv]])
    return posed, HandJacobian(blocks["d_vertices"], blocks["d_means"], np.concatenate(sig), ids)


def pose_hands(template, params):
    """Posed vertices, joints and collision proxies of both hands."""
    return _evaluate(template, params)[0]


def pose_jacobian(template, params, vertex_ids=None):
    """Analytic derivatives of posed vertices, proxy means and proxy sigmas.

    ``vertex_ids`` (sorted, stacked indexing) restricts the vertex block.
    """
    if vertex_ids is not None:
        vertex_ids = np.sort(np.asarray(vertex_ids, dtype=int))
    return _evaluate(template, params, jacobian=True, vertex_ids=vertex_ids)[1]


def pose_with_jacobian(template, params, vertex_ids=None):
    if vertex_ids is not None:
        vertex_ids = np.sort(np.asarray(vertex_ids, dtype=int))
    return _evaluate(template, params, jacobian=True, vertex_ids=vertex_ids)


def bone_lengths(template, beta):
    """Lengths of the 15 parent->child segments at zero articulation."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (template.n_shape,):
        raise ValueError(f"beta must have length {template.n_shape}")
    J = template.joints + template.joint_shape_basis.reshape(N_JOINTS, 3, -1) @ beta
    return np.linalg.norm(J[1:] - J[PARENTS[1:]], axis=1)


def keypoints(template, posed):
    """Wrist joint plus the five fingertip vertices per hand, shape (2, 6, 3)."""
    nv = template.n_vertices
    out = np.empty((2, 1 + N_FINGERS, 3))
    for h in range(2):
        out[h, 0] = posed.joint_positions[h, 0]
        out[h, 1:] = posed.vertex_positions[h * nv + template.tip_vertices]
    return out


def proxy_exemption_mask(template, hops=1):
    """Boolean (N_C, N_C) mask of same-hand proxy pairs whose joints are within ``hops`` tree edges."""
    c = template.n_proxies
    joints = np.array([p.joint_index for p in template.proxy_rig])
    D = _tree_hops()
    same = D[joints[:, None], joints[None, :]] <= hops
    mask = np.zeros((2 * c, 2 * c), dtype=bool)
    mask[:c, :c] = same
    mask[c:, c:] = same
    return mask


def _tree_hops():
    D = np.full((N_JOINTS, N_JOINTS), 99, dtype=int)
    for a in range(N_JOINTS):
        chain_a = _ancestors(a)
        for b in range(N_JOINTS):
            chain_b = _ancestors(b)
            common = next(x for x in chain_a if x in chain_b)
            D[a, b] = chain_a.index(common) + chain_b.index(common)
    return D


def _ancestors(k):
    out = [k]
    while PARENTS[out[-1]] >= 0:
        out.append(int(PARENTS[out[-1]]))
    return out


# --------------------------------------------------------------------------
# template construction
# --------------------------------------------------------------------------

def _edges(faces):
    return np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def _smooth_min(a, b, k):
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


def _box_distance(p, center, half, rounding):
    q = np.abs(p - center) - np.asarray(half) + rounding
    return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(-1), 0.0) - rounding


def _skeleton(cfg):
    """Rest joints (16, 3) and fingertip end points (5, 3)."""
    joints = np.zeros((N_JOINTS, 3))
    tips = np.zeros((N_FINGERS, 3))
    for f in range(N_FINGERS):
        d = np.asarray(cfg.finger_directions[f], dtype=float)
        d = d / np.linalg.norm(d)
        p = np.asarray(cfg.finger_bases[f], dtype=float)
        for j, seg in zip(finger_joints(f), cfg.finger_lengths[f]):
            joints[j] = p
            p = p + d * seg
        tips[f] = p
    return joints, tips


def _bone_segments(joints, tips):
    """Segment (start, end) driven by each joint; the wrist owns the palm axis."""
    ends = np.zeros_like(joints)
    for f in range(N_FINGERS):
        a, b, c = finger_joints(f)
        ends[a], ends[b], ends[c] = joints[b], joints[c], tips[f]
    ends[0] = joints[finger_joints(2)[0]]
    return joints, ends


def _finger_frames(cfg, joints, tips):
    """Per joint (15, 3, 3): columns = flexion axis, abduction axis, twist axis."""
    frames = np.zeros((N_JOINTS - 1, 3, 3))
    palm_normal = np.array([0.0, 0.0, -1.0])
    for f in range(N_FINGERS):
        js = finger_joints(f)
        for k, j in enumerate(js):
            end = joints[js[k + 1]] if k < 2 else tips[f]
            d = end - joints[j]
            d /= np.linalg.norm(d)
            flex = np.cross(d, palm_normal)
            flex /= np.linalg.norm(flex)
            abd = np.cross(flex, d)
            frames[j - 1] = np.stack([flex, abd, d], axis=1)
    return frames


def _mesh(cfg, joints, tips):
    h = cfg.grid_spacing
    segs = []
    for f in range(N_FINGERS):
        js = finger_joints(f)
        pts = [joints[j] for j in js] + [tips[f]]
        for a, b in zip(pts[:-1], pts[1:]):
            segs.append((a, b, cfg.finger_radii[f]))
    half = np.asarray(cfg.palm_half_extent)
    palm_c = np.array([0.0, -half[1] + 0.007, 0.0])
    allpts = np.concatenate([joints, tips])
    rmax = max(cfg.finger_radii)
    lo = np.minimum(allpts.min(0) - rmax, palm_c - half) - 3 * h
    hi = np.maximum(allpts.max(0) + rmax, palm_c + half) + 3 * h
    n = np.ceil((hi - lo) / h).astype(int) + 1
    axes = [lo[i] + h * np.arange(n[i]) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)

    def field(pts):
        val = _box_distance(pts, palm_c, half, cfg.palm_rounding)
        for a, b, r in segs:
            val = _smooth_min(val, _segment_distance(pts, a, b) - r, cfg.blend_radius)
        return val

    val = field(grid)
    vol = val.reshape(n)
    verts, faces, _, _ = marching_cubes(vol, 0.0, spacing=(h, h, h))
    verts = verts + lo
    faces = faces.astype(np.int64)
    e = _edges(faces)
    ue = np.unique(e, axis=0)
    adj = coo_matrix((np.ones(len(ue)), (ue[:, 0], ue[:, 1])), shape=(len(verts),) * 2)
    ncomp, labels = connected_components(adj, directed=False)
    if ncomp > 1:
        keep = labels == np.bincount(labels).argmax()
        remap = np.cumsum(keep) - 1
        faces = remap[faces[keep[faces[:, 0]]]]
        verts = verts[keep]
    verts = _relax(verts, faces, field, cfg.relax_iterations)
    return verts, faces, palm_c, half


def _relax(verts, faces, field, iterations, step=0.5, h=1e-6):
    """Even out vertex spacing: tangential Laplacian steps, each followed by projection onto the level set."""
    ue = np.unique(_edges(faces), axis=0)
    n = len(verts)
    A = coo_matrix((np.ones(2 * len(ue)), (np.r_[ue[:, 0], ue[:, 1]], np.r_[ue[:, 1], ue[:, 0]])), shape=(n, n)).tocsr()
    deg = np.asarray(A.sum(1)).ravel()[:, None]
    V = verts.copy()
    offsets = np.eye(3) * h
    for _ in range(iterations):
        nrm = vertex_normals(V, faces)
        d = A @ V / deg - V
        d -= np.sum(d * nrm, axis=1, keepdims=True) * nrm
        V = V + step * d
        for _ in range(2):
            f = field(V)
            g = np.stack([(field(V + o) - field(V - o)) / (2 * h) for o in offsets], axis=1)
            V = V - (f / np.maximum(np.sum(g * g, axis=1), 1e-12))[:, None] * g
    return V


def vertex_normals(vertices, faces):
    """Area-weighted unit vertex normals."""
    fn = np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]], vertices[faces[:, 2]] - vertices[faces[:, 0]])
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    return vn / np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-30)


def signed_volume(vertices, faces):
    """Enclosed volume (m^3); positive when faces wind counter-clockwise seen from outside."""
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return float(np.einsum("ij,ij->", a, np.cross(b, c)) / 6.0)


def _skin_weights(cfg, verts, joints, tips, palm_c, half):
    starts, ends = _bone_segments(joints, tips)
    d = np.stack([_segment_distance(verts, starts[k], ends[k]) for k in range(N_JOINTS)], axis=1)
    d[:, 0] = np.maximum(_box_distance(verts, palm_c, half * np.array([1, 1, 0.2]), 0.0), 0.0)
    d = d - d.min(axis=1, keepdims=True)
    w = np.exp(-0.5 * (d / cfg.skin_falloff) ** 2)
    w[w < 1e-3] = 0.0
    return w / w.sum(axis=1, keepdims=True)


def _shape_fields(points, weights, joints, tips, is_joint):
    """Unnormalised shape displacement fields evaluated at ``points``."""
    starts, ends = _bone_segments(joints, tips)
    fields_ = []
    for fn in _SHAPE_FIELDS:
        fields_.append(fn(points, weights, joints, starts, ends, is_joint))
    return fields_


def _f_scale(p, w, J, s, e, isj):
    return p.copy()


def _f_width(p, w, J, s, e, isj):
    return p * [1.0, 0.0, 0.0]


def _f_thickness(p, w, J, s, e, isj):
    return p * [0.0, 0.0, 1.0]


def _f_palm_length(p, w, J, s, e, isj):
    y_knuckle = J[finger_joints(2)[0], 1]
    out = np.zeros_like(p)
    out[:, 1] = np.clip(p[:, 1], y_knuckle, 0.0)
    return out


def _finger_length(f):
    def fn(p, w, J, s, e, isj):
        base = J[finger_joints(f)[0]]
        u = e[finger_joints(f)[0]] - base
        u /= np.linalg.norm(u)
        disp = ((p - base) @ u)[:, None] * u
        if isj:
            own = np.zeros(len(p))
            own[finger_joints(f)] = 1.0
        else:
            own = w[:, finger_joints(f)].sum(1)
        return disp * own[:, None]
    return fn


def _f_finger_radius(p, w, J, s, e, isj):
    if isj:
        return np.zeros_like(p)
    out = np.zeros_like(p)
    for k in range(1, N_JOINTS):
        u = e[k] - s[k]
        u /= np.linalg.norm(u)
        rel = p - s[k]
        radial = rel - (rel @ u)[:, None] * u
        out += w[:, k:k + 1] * radial
    return out


def _finger_radius_single(f):
    def fn(p, w, J, s, e, isj):
        if isj:
            return np.zeros_like(p)
        out = np.zeros_like(p)
        for k in finger_joints(f):
            u = e[k] - s[k]
            u /= np.linalg.norm(u)
            rel = p - s[k]
            out += w[:, k:k + 1] * (rel - (rel @ u)[:, None] * u)
        return out
    return fn


_SHAPE_FIELDS = [_f_scale, _f_width, _f_thickness, _f_palm_length] + [
    _finger_length(f) for f in range(N_FINGERS)] + [_f_finger_radius]
_EXTRA_FIELDS = [_finger_radius_single(f) for f in range(N_FINGERS)]


def _shape_basis(n_shape, verts, weights, joints, tips):
    fns = (_SHAPE_FIELDS + _EXTRA_FIELDS)[:n_shape]
    starts, ends = _bone_segments(joints, tips)
    D = np.stack([fn(verts, weights, joints, starts, ends, False).ravel() for fn in fns], axis=1)
    DJ = np.stack([fn(joints, None, joints, starts, ends, True).ravel() for fn in fns], axis=1)
    Q, R = np.linalg.qr(D)
    sign = np.sign(np.diag(R))
    Q, R = Q * sign, R * sign[:, None]
    # re-orthonormalise once to push the Gram error to machine precision
    Q2, R2 = np.linalg.qr(Q)
    s2 = np.sign(np.diag(R2))
    Q2, R2 = Q2 * s2, R2 * s2[:, None]
    Rtot = R2 @ R
    DJn = np.linalg.solve(Rtot.T, DJ.T).T
    return Q2, DJn


def _proxies(cfg, verts, joints, tips, palm_c, half):
    rig = []
    fracs = {3: ((0.5,), (0.5,), (0.5,)), 4: ((0.3, 0.75), (0.5,), (0.5,))}[cfg.proxies_per_finger]
    lateral = np.array([0.0, 0.0, 1.0])
    for f in range(N_FINGERS):
        js = finger_joints(f)
        for k, j in enumerate(js):
            end = joints[js[k + 1]] if k < 2 else tips[f]
            for t in fracs[k]:
                c = joints[j] + t * (end - joints[j])
                rig.append(_proxy_for(verts, j, c, c - joints[j], lateral, cfg.sigma_scale))
    n_palm = cfg.proxies_per_hand - len(rig)
    if n_palm > 0:
        cols = int(np.ceil(np.sqrt(n_palm * 5 / 3)))
        rows = int(np.ceil(n_palm / cols))
        xs = np.linspace(-half[0] + 0.014, half[0] - 0.014, cols)
        ys = np.linspace(palm_c[1] + half[1] - 0.02, palm_c[1] - half[1] + 0.025, rows)
        centers = [np.array([x, y, 0.0]) for y in ys for x in xs][:n_palm]
        for c in centers:
            rig.append(_proxy_for(verts, 0, c, c - joints[0], lateral, cfg.sigma_scale))
    return tuple(rig)


def _proxy_for(verts, joint, center, offset, axis, scale):
    # vertex pair straddling the centre along ``axis`` (through the thickness)
    rel = verts - center
    along = rel @ axis
    perp = np.linalg.norm(rel - along[:, None] * axis, axis=1)
    score_a = perp - 0.3 * along
    score_b = perp + 0.3 * along
    a = int(np.argmin(np.where(along > 0, score_a, np.inf)))
    b = int(np.argmin(np.where(along < 0, score_b, np.inf)))
    return ProxyAttachment(joint, np.asarray(offset, dtype=float), (a, b), scale)


def build_template(config=None):
    """Generate a hand template from ``config`` (defaults: 10 shape, 45 articulation coefficients)."""
    cfg = config or ModelConfig()
    cfg.validate()
    joints, tips = _skeleton(cfg)
    verts, faces, palm_c, half = _mesh(cfg, joints, tips)
    W = _skin_weights(cfg, verts, joints, tips, palm_c, half)
    shape_basis, joint_shape = _shape_basis(cfg.n_shape, verts, W, joints, tips)
    frames = _finger_frames(cfg, joints, tips)
    # ordering: all flexions, then abductions, then twists
    full = np.zeros((3 * (N_JOINTS - 1), 3 * (N_JOINTS - 1)))
    col = 0
    for axis in range(3):
        for k in range(N_JOINTS - 1):
            full[3 * k:3 * k + 3, col] = frames[k][:, axis]
            col += 1
    pose_basis = full[:, :cfg.n_articulation]
    tip_vertices = np.array([int(np.argmin(np.linalg.norm(verts - t, axis=1))) for t in tips])
    proxies = _proxies(cfg, verts, joints, tips, palm_c, half)
    return HandTemplate(
        vertices=verts, faces=faces, joints=joints, parents=PARENTS.copy(), skin_weights=W,
        shape_basis=shape_basis, joint_shape_basis=joint_shape, pose_basis=pose_basis,
        proxy_rig=proxies, tip_vertices=tip_vertices,
    )


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

TEMPLATE_MAGIC = b"TWHT"
TEMPLATE_VERSION = 1
_HEADER = struct.Struct("<4s7I")


def save_template(template, path):
    """Write the binary template file.

    Layout (little-endian): header ``magic, version, N_V, N_F, N_J, N_S, N_A, N_C``
    (4 bytes + 7 uint32), then the arrays in order: vertices (N_V,3) f8, faces
    (N_F,3) i8, joints (N_J,3) f8, parents (N_J,) i8, skin_weights (N_V,N_J) f8,
    shape_basis (3N_V,N_S) f8, joint_shape_basis (3N_J,N_S) f8, pose_basis
    (3(N_J-1),N_A) f8, tip_vertices (5,) i8, proxy joints (N_C,) i8, proxy
    offsets (N_C,3) f8, proxy vertex pairs (N_C,2) i8, proxy sigma scales (N_C,) f8.
    """
    t = template
    px = t.proxy_rig
    header = _HEADER.pack(TEMPLATE_MAGIC, TEMPLATE_VERSION, t.n_vertices, len(t.faces), N_JOINTS,
                          t.n_shape, t.n_articulation, len(px))
    arrays = [
        (t.vertices, "<f8"), (t.faces, "<i8"), (t.joints, "<f8"), (t.parents, "<i8"),
        (t.skin_weights, "<f8"), (t.shape_basis, "<f8"), (t.joint_shape_basis, "<f8"),
        (t.pose_basis, "<f8"), (t.tip_vertices, "<i8"),
        (np.array([p.joint_index for p in px]), "<i8"),
        (np.array([p.local_offset for p in px]), "<f8"),
        (np.array([p.sigma_vertex_pair for p in px]), "<i8"),
        (np.array([p.sigma_scale for p in px]), "<f8"),
    ]
    with open(path, "wb") as fh:
        fh.write(header)
        for a, dt in arrays:
            fh.write(np.ascontiguousarray(a, dtype=dt).tobytes())


def load_template(path):
    data = Path(path).read_bytes()
    magic, version, nv, nf, nj, ns, na, nc = _HEADER.unpack_from(data)
    if magic != TEMPLATE_MAGIC:
        raise ValueError(f"{path}: not a hand template file (magic {magic!r})")
    if version != TEMPLATE_VERSION or nj != N_JOINTS:
        raise ValueError(f"{path}: unsupported template version {version} / joint count {nj}")
    off = _HEADER.size

    def take(shape, dt):
        nonlocal off
        count = int(np.prod(shape))
        a = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape)
        off += count * 8
        return a.astype(np.float64 if dt == "<f8" else np.int64)

    verts = take((nv, 3), "<f8")
    faces = take((nf, 3), "<i8")
    joints = take((nj, 3), "<f8")
    parents = take((nj,), "<i8")
    W = take((nv, nj), "<f8")
    S = take((3 * nv, ns), "<f8")
    SJ = take((3 * nj, ns), "<f8")
    B = take((3 * (nj - 1), na), "<f8")
    tips = take((N_FINGERS,), "<i8")
    pj = take((nc,), "<i8")
    po = take((nc, 3), "<f8")
    pp = take((nc, 2), "<i8")
    ps = take((nc,), "<f8")
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    proxies = tuple(ProxyAttachment(int(j), o, (int(a), int(b)), float(s))
                    for j, o, (a, b), s in zip(pj, po, pp, ps))
    return HandTemplate(verts, faces, joints, parents, W, S, SJ, B, proxies, tips)


def export_obj(path, vertices, faces):
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
