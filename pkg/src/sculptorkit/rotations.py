"""Axis-angle rotations and their derivatives.

The jacobian follows the closed form of Gallego & Yezzi: for r != 0,
dR/dr_i = ( r_i [r]_x + [ r x (I - R) e_i ]_x ) / |r|^2 @ R,
with the generator limit [e_i]_x at r = 0.
"""
from __future__ import annotations

import numpy as np


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_matrix(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues formula, numerically stable near zero."""
    r = np.asarray(rotvec, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(r)
    if angle < 1e-12:
        return np.eye(3) + skew(r)
    axis = r / angle
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_jacobian(rotvec: np.ndarray) -> np.ndarray:
    """(3, 3, 3) array J with J[i] = dR/dr_i."""
    r = np.asarray(rotvec, dtype=np.float64).reshape(3)
    R = rotation_matrix(r)
    n2 = float(r @ r)
    out = np.empty((3, 3, 3))
    if n2 < 1e-16:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            out[i] = skew(e)
        return out
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        out[i] = (r[i] * skew(r) + skew(np.cross(r, (np.eye(3) - R) @ e))) @ R / n2
    return out
