"""Axis-angle helpers shared by the numpy and torch code paths."""
from __future__ import annotations

import numpy as np
import torch
from scipy.spatial.transform import Rotation


def aa_to_matrix(aa):
    aa = np.array(aa, dtype=float)  # scipy rejects read-only buffers
    flat = aa.reshape(-1, 3)
    return Rotation.from_rotvec(flat).as_matrix().reshape(aa.shape[:-1] + (3, 3))


def matrix_to_aa(mat):
    """Rotation matrices to axis-angle with magnitude in [0, pi]."""
    mat = np.array(mat, dtype=float)
    flat = mat.reshape(-1, 3, 3)
    return Rotation.from_matrix(flat).as_rotvec().reshape(mat.shape[:-2] + (3,))


def canonical_aa(aa):
    """Wrap axis-angle vectors into the ball of radius pi (same rotation)."""
    aa = np.asarray(aa, dtype=float)
    t = np.linalg.norm(aa, axis=-1, keepdims=True)
    wrap = t > np.pi
    if not wrap.any():
        return aa.copy()
    safe = np.where(t > 0, t, 1.0)
    t_new = np.mod(t + np.pi, 2 * np.pi) - np.pi
    return np.where(wrap, aa / safe * t_new, aa)


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def geodesic_angle(r1, r2):
    """Angle of r1 r2^T in radians, via atan2 so it stays accurate near 0 and pi."""
    rel = np.einsum("...ij,...kj->...ik", r1, r2)
    cos = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    skew = np.stack([rel[..., 2, 1] - rel[..., 1, 2],
                     rel[..., 0, 2] - rel[..., 2, 0],
                     rel[..., 1, 0] - rel[..., 0, 1]], axis=-1)
    sin = 0.5 * np.linalg.norm(skew, axis=-1)
    return np.arctan2(sin, cos)


def hat_t(v):
    z = torch.zeros_like(v[..., 0])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack([
        torch.stack([z, -w, y], -1),
        torch.stack([w, z, -x], -1),
        torch.stack([-y, x, z], -1),
    ], -2)


def aa_to_matrix_t(v):
    """Differentiable Rodrigues map with a series branch near zero."""
    t2 = (v * v).sum(-1)
    small = t2 < 1e-4
    t2s = torch.where(small, torch.ones_like(t2), t2)
    t = torch.sqrt(t2s)
    a = torch.where(small, 1 - t2 / 6 + t2 * t2 / 120, torch.sin(t) / t)
    b = torch.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - torch.cos(t)) / t2s)
    k = hat_t(v)
    eye = torch.eye(3, dtype=v.dtype).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)
