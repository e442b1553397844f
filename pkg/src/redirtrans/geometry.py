"""Pitch/yaw conditions, rotation matrices and angular metrics.

Conditions are carried as arrays whose last axis is (pitch, yaw) in radians.
The Tensor versions are differentiable and batched over leading axes; the
``np_`` helpers are plain numpy used by data generation and evaluation.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import tensor as T


class Condition(NamedTuple):
    pitch: float
    yaw: float

    def as_array(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw], dtype=np.float32)


def np_rotation(pitch, yaw) -> np.ndarray:
    """R = R_yaw(yaw) @ R_pitch(pitch); broadcasts over array inputs."""
    pitch = np.asarray(pitch)
    yaw = np.asarray(yaw)
    sp, cp = np.sin(pitch), np.cos(pitch)
    sy, cy = np.sin(yaw), np.cos(yaw)
    zero = np.zeros_like(sp * sy)
    one = np.ones_like(zero)
    rows = [
        [cy * one, sy * sp, sy * cp],
        [zero, cp * one, -sp * one],
        [-sy * one, cy * sp, cy * cp],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rotation_from_condition(cond) -> T.Tensor:
    """Differentiable rotation for conditions of shape (..., 2) -> (..., 3, 3)."""
    cond = T.as_tensor(cond)
    pitch = cond[..., 0]
    yaw = cond[..., 1]
    sp, cp = T.sin(pitch), T.cos(pitch)
    sy, cy = T.sin(yaw), T.cos(yaw)
    zero = T.Tensor(np.zeros(pitch.shape, dtype=cond.data.dtype))
    entries = [
        cy, sy * sp, sy * cp,
        zero, cp, -sp,
        -sy, cy * sp, cy * cp,
    ]
    flat = T.stack(entries, axis=-1)
    return T.reshape(flat, pitch.shape + (3, 3))


def inverse_rotation(r: T.Tensor) -> T.Tensor:
    return T.swapaxes(r, -1, -2)


def np_condition_to_vector(cond) -> np.ndarray:
    cond = np.asarray(cond)
    pitch, yaw = cond[..., 0], cond[..., 1]
    return np.stack([np.cos(pitch) * np.sin(yaw), np.sin(pitch), np.cos(pitch) * np.cos(yaw)], axis=-1)


def condition_to_vector(cond) -> T.Tensor:
    """(pitch, yaw) -> unit vector (cos p sin y, sin p, cos p cos y)."""
    cond = T.as_tensor(cond)
    pitch = cond[..., 0]
    yaw = cond[..., 1]
    cp = T.cos(pitch)
    return T.stack([cp * T.sin(yaw), T.sin(pitch), cp * T.cos(yaw)], axis=-1)


def angular_distance(u, v) -> T.Tensor:
    return T.angular_distance(u, v, axis=-1)


def np_angular_distance(u, v) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(np.linalg.norm(u, axis=-1) <= 1e-8) or np.any(np.linalg.norm(v, axis=-1) <= 1e-8):
        raise ValueError("angular distance undefined for zero-norm vectors")
    # atan2 form stays accurate near 0 and pi, where arccos loses precision
    return np.arctan2(np.linalg.norm(np.cross(u, v), axis=-1), np.sum(u * v, axis=-1))


def condition_angular_error(a, b) -> T.Tensor:
    return angular_distance(condition_to_vector(a), condition_to_vector(b))


def np_condition_angular_error(a, b) -> np.ndarray:
    return np_angular_distance(np_condition_to_vector(a), np_condition_to_vector(b))
