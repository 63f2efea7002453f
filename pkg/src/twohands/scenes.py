"""Scripted two-hand motions for synthetic data.

Each motion is a list of keyframes; frames in between are interpolated
linearly in parameter space.
"""

import numpy as np

from .handmodel import GLOBAL_DOF, HandParams

MOTIONS = ("separated_wave", "crossing_hands", "interlocking_approach", "static")


def _pose(template, t_left, r_left, t_right, r_right, art_left=None, art_right=None, beta=None):
    p = HandParams.for_template(template)
    p.theta_left[:3], p.theta_left[3:6] = t_left, r_left
    p.theta_right[:3], p.theta_right[3:6] = t_right, r_right
    na = template.n_articulation
    if art_left is not None:
        p.theta_left[GLOBAL_DOF:] = art_left[:na]
    if art_right is not None:
        p.theta_right[GLOBAL_DOF:] = art_right[:na]
    if beta is not None:
        p.beta_left[:] = beta[0]
        p.beta_right[:] = beta[1]
    return p


def flexion(template, amounts):
    """Articulation vector with per-joint flexion ``amounts`` (15 values, radians)."""
    a = np.zeros(45)
    a[:15] = amounts
    return a[:template.n_articulation]


def subject_shape(template, seed=0, scale=0.03):
    """A fixed, mildly non-average hand shape (same for both hands)."""
    rng = np.random.default_rng(seed)
    b = rng.uniform(-scale, scale, template.n_shape)
    return b, b.copy()


def keyframes(template, motion, seed=0):
    beta = subject_shape(template, seed)
    relaxed = np.tile([0.15, 0.2, 0.1], 5)
    if motion == "static":
        p = _pose(template, (-0.1, 0.06, 0.6), (0, 0, 0.1), (0.1, 0.06, 0.6), (0, 0, -0.1),
                  flexion(template, relaxed), flexion(template, relaxed), beta)
        return [p, p.copy()]
    if motion == "separated_wave":
        keys = []
        for k, ph in enumerate(np.linspace(0, 2 * np.pi, 5)):
            wave = relaxed + 0.35 * (1 + np.sin(ph + np.repeat(np.arange(5), 3) * 0.9)) * np.tile([1, 1, 0.6], 5)
            keys.append(_pose(template, (-0.1 + 0.01 * np.sin(ph), 0.06, 0.6), (0.0, 0.15 * np.sin(ph), 0.1),
                              (0.1, 0.06 + 0.01 * np.cos(ph), 0.6), (0.1 * np.cos(ph), 0.0, -0.1),
                              flexion(template, wave), flexion(template, wave[::-1]), beta))
        return keys
    if motion == "crossing_hands":
        keys = []
        for s in np.linspace(0.0, 1.0, 4):
            x = 0.12 - 0.24 * s
            keys.append(_pose(template, (-0.09, 0.06, 0.62), (0, 0, 0.15), (x, 0.04, 0.54), (0.2, 0, -0.1),
                              flexion(template, relaxed), flexion(template, relaxed + 0.2 * s), beta))
        return keys
    if motion == "interlocking_approach":
        # fingers pointing at each other, right hand offset by half a finger spacing and set back in depth
        keys = []
        for gap in (0.07, 0.03, 0.0, -0.035):
            keys.append(_pose(template, (-0.115 - gap / 2, 0.0, 0.6), (0, 0, np.pi / 2),
                              (0.115 + gap / 2, 0.0115, 0.616), (0, 0, -np.pi / 2),
                              flexion(template, 0.5 * relaxed), flexion(template, 0.5 * relaxed), beta))
        return keys
    raise ValueError(f"unknown motion {motion!r}; choose from {MOTIONS}")


def motion_sequence(template, motion, n_frames, seed=0):
    keys = keyframes(template, motion, seed)
    X = np.stack([k.to_vector() for k in keys])
    s = np.linspace(0, len(keys) - 1, n_frames)
    out = []
    for v in s:
        i = min(int(np.floor(v)), len(keys) - 2)
        a = v - i
        out.append(HandParams.from_vector((1 - a) * X[i] + a * X[i + 1], template.n_shape))
    return out


def perturb(params, rng, translation=0.02, articulation=0.5, shape=0.0):
    """Uniform perturbation: translation per axis (m), per-coefficient articulation, per-coefficient shape."""
    p = params.copy()
    for th in (p.theta_left, p.theta_right):
        th[:3] += rng.uniform(-translation, translation, 3) / np.sqrt(3)
        th[GLOBAL_DOF:] += rng.uniform(-articulation, articulation, len(th) - GLOBAL_DOF)
    if shape:
        p.beta_left += rng.uniform(-shape, shape, p.n_shape)
        p.beta_right += rng.uniform(-shape, shape, p.n_shape)
    return p


def interpenetrating(params, depth=0.045):
    """Push the right hand into the left hand (used to seed collision tests)."""
    p = params.copy()
    d = p.theta_left[:3] - p.theta_right[:3]
    d[2] = 0.0
    n = np.linalg.norm(d)
    if n > 0:
        p.theta_right[:3] += d / n * depth
    p.theta_right[1] = p.theta_left[1]
    p.theta_right[2] = p.theta_left[2]
    return p
