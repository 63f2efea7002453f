"""Evaluation metrics: keypoint PCK, relative 2D keypoint error, bone-length consistency."""

from dataclasses import dataclass, field

import numpy as np

from .handmodel import FINGER_NAMES, HANDS, bone_lengths, keypoints, pose_hands

KEYPOINT_NAMES = ("wrist",) + tuple(f"{f}_tip" for f in FINGER_NAMES)
DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.0, 0.0505, 0.0025), 4))  # metres


@dataclass
class Metrics:
    pck_curve: list  # [(threshold_m, fraction)]
    pixel_error_2d: tuple  # (mean, std) of per-frame error / image diagonal
    bone_length_std: np.ndarray  # (2, 15) metres
    frame_energies: list = field(default_factory=list)

    def __post_init__(self):
        fr = [f for _, f in self.pck_curve]
        if any(not 0.0 <= f <= 1.0 for f in fr) or np.any(np.diff(fr) < 0):
            raise ValueError("PCK values must lie in [0, 1] and not decrease with the threshold")
        if min(self.pixel_error_2d[1], np.min(self.bone_length_std, initial=0.0)) < 0:
            raise ValueError("standard deviations must be >= 0")

    def pck(self, threshold):
        for t, f in self.pck_curve:
            if np.isclose(t, threshold):
                return f
        raise KeyError(threshold)


def keypoint_errors(pred, gt):
    """Euclidean distance per keypoint; inputs (..., 3) with matching shapes."""
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"keypoint arrays differ in shape: {pred.shape} vs {gt.shape}")
    return np.linalg.norm(pred - gt, axis=-1)


def pck(errors, thresholds):
    """Fraction of keypoints with error strictly below each threshold."""
    e = np.ravel(errors)
    if len(e) == 0:
        raise ValueError("no keypoints")
    t = np.asarray(thresholds, dtype=float)
    return np.mean(e[:, None] < t[None, :], axis=0)


def pck_curve(pred, gt, thresholds=DEFAULT_THRESHOLDS):
    t = np.sort(np.asarray(thresholds, dtype=float))
    return list(zip(t.tolist(), pck(keypoint_errors(pred, gt), t).tolist()))


def pixel_error_2d(pred, gt, camera):
    """Mean and std over frames of the mean keypoint reprojection error divided by the image diagonal.

    ``pred``/``gt`` have shape (frames, keypoints, 3) in camera coordinates.
    """
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValueError("expected matching (frames, keypoints, 3) arrays")
    d = np.linalg.norm(camera.project(pred.reshape(-1, 3)) - camera.project(gt.reshape(-1, 3)), axis=1)
    per_frame = d.reshape(pred.shape[:2]).mean(axis=1) / camera.diagonal
    return float(per_frame.mean()), float(per_frame.std())


def bone_length_std(template, params_seq):
    """Per-bone standard deviation of the length over a sequence, shape (2, 15) in metres."""
    L = np.array([[bone_lengths(template, p.beta(h)) for h in HANDS] for p in params_seq])
    # shifting by the first frame keeps a constant sequence at exactly zero
    return (L - L[0]).std(axis=0)


def sequence_keypoints(template, params_seq):
    """(frames, 12, 3): wrist and fingertips of the left then right hand."""
    return np.array([keypoints(template, pose_hands(template, p)).reshape(-1, 3) for p in params_seq])


def evaluate(template, fitted, truth, camera, thresholds=DEFAULT_THRESHOLDS, energies=()):
    if len(fitted) != len(truth):
        raise ValueError(f"frame count mismatch: {len(fitted)} fitted vs {len(truth)} ground truth")
    kp, kg = sequence_keypoints(template, fitted), sequence_keypoints(template, truth)
    return Metrics(
        pck_curve=pck_curve(kp, kg, thresholds),
        pixel_error_2d=pixel_error_2d(kp, kg, camera),
        bone_length_std=bone_length_std(template, fitted),
        frame_energies=list(energies),
    )


def mean_vertex_error(template, a, b):
    """Mean distance between corresponding posed vertices of two parameter sets (metres)."""
    va, vb = pose_hands(template, a).vertex_positions, pose_hands(template, b).vertex_positions
    return float(np.linalg.norm(va - vb, axis=1).mean())
