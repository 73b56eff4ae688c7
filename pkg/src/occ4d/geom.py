"""Rigid transforms, yaw rotations, and deterministic per-ray random streams.

Everything here is pure and immutable: poses validate themselves at
construction, and random streams are counter-based so that any parallel
iteration order reproduces the single-worker result bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9

_U64 = 0xFFFFFFFFFFFFFFFF


def yaw_matrix(theta: float) -> np.ndarray:
    """3x3 rotation about the z axis by ``theta`` radians."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_about_z(points: np.ndarray, theta: float) -> np.ndarray:
    """Rotate points (shape (3,) or (N,3)) about z by ``theta`` radians.

    Length-preserving in the x-y plane; z passes through unchanged.
    """
    pts = np.asarray(points, dtype=np.float64)
    c, s = math.cos(theta), math.sin(theta)
    out = np.empty_like(pts)
    out[..., 0] = c * pts[..., 0] - s * pts[..., 1]
    out[..., 1] = s * pts[..., 0] + c * pts[..., 1]
    out[..., 2] = pts[..., 2]
    return out


def _frozen_array(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``x_out = rotation @ x_in + translation``.

    rotation must be orthonormal with determinant +1 (checked to 1e-9).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen_array(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen_array(self.translation, (3,)))
        r = self.rotation
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("pose entries must be finite")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (max |R^T R - I| = {err:.3g})")
        det = np.linalg.det(r)
        if abs(det - 1.0) > ORTHO_TOL:
            raise ValueError(f"rotation determinant {det} != +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw(theta: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(yaw_matrix(theta), np.asarray(translation, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (3,) or (N,3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def rotate_only(self, vecs: np.ndarray) -> np.ndarray:
        """Rotate direction vectors (no translation)."""
        return np.asarray(vecs, dtype=np.float64) @ self.rotation.T

    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -(rt @ p.translation))


@dataclass(frozen=True)
class Ray:
    """A single timed lidar ray: origin, hit point or miss direction, time."""

    origin: np.ndarray
    endpoint: np.ndarray | None
    miss: bool
    direction: np.ndarray
    time: float

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen_array(self.origin, (3,)))
        object.__setattr__(self, "direction", _frozen_array(self.direction, (3,)))
        if abs(np.linalg.norm(self.direction) - 1.0) > ORTHO_TOL:
            raise ValueError("ray direction must have unit norm")
        if self.miss:
            if self.endpoint is not None:
                raise ValueError("miss rays carry no endpoint")
        else:
            object.__setattr__(self, "endpoint", _frozen_array(self.endpoint, (3,)))
            if np.linalg.norm(self.endpoint - self.origin) <= 0.0:
                raise ValueError("hit ray must have |p - s| > 0")


@dataclass(frozen=True)
class AugmentConfig:
    """Training-sample augmentation knobs.

    theta is drawn uniformly from [theta_min, theta_max] when rotation is
    enabled. jitter_tau reshapes the along-ray negative draw (d^tau); tau=1
    is plain uniform sampling. translation_max is a reserved hook and must
    stay 0 for now.
    """

    theta_min: float = -math.radians(20.0)
    theta_max: float = math.radians(20.0)
    jitter_tau: float = 1.0
    rotation_enabled: bool = True
    jitter_enabled: bool = False
    translation_max: float = 0.0

    def __post_init__(self):
        if self.theta_min > self.theta_max:
            raise ValueError("theta_min must be <= theta_max")
        if self.jitter_tau <= 0.0:
            raise ValueError("jitter_tau must be positive")
        if self.translation_max != 0.0:
            raise ValueError("translation augmentation is a config hook only")


def per_ray_rng(seed: int, ray_index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based random stream keyed by (seed, stream, ray_index).

    Each key gets its own 2^64-draw Philox segment, so draws depend only on
    the key and the draw index — never on worker count or iteration order.
    """
    key = np.array([seed & _U64, stream & _U64], dtype=np.uint64)
    counter = np.array([0, ray_index & _U64, 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
