"""Small SE(3)/SO(3) toolbox shared across the mapping and optimization modules.

Poses are 4x4 homogeneous matrices (world <- body unless stated otherwise).
Rotation vectors follow the usual axis-angle convention so that
``so3_exp(so3_log(R)) == R``.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation


def so3_hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that so3_hat(w) @ v == cross(w, v)."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=float)).as_matrix()


def so3_log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def so3_jr_inv(w: np.ndarray) -> np.ndarray:
    """Inverse of the right Jacobian of SO(3) at rotation vector w."""
    theta = np.linalg.norm(w)
    W = so3_hat(w)
    if theta < 1e-9:
        return np.eye(3) + 0.5 * W + W @ W / 12.0
    half = 0.5 * theta
    coef = (1.0 / theta**2) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * W + coef * (W @ W)


def reorthonormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation 3x3 matrix back onto SO(3) (polar via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U = U.copy()
        U[:, -1] *= -1
        out = U @ Vt
    return out


def make_pose(R: np.ndarray | None = None, t: np.ndarray | None = None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def pose_inverse(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def transform_points(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(points)
    return pts @ T[:3, :3].T + T[:3, 3]


def relative_pose(T_a: np.ndarray, T_b: np.ndarray) -> np.ndarray:
    """Pose of b expressed in a: T_a_b with T_b = T_a @ T_a_b."""
    return pose_inverse(T_a) @ T_b


def pose_to_quat_trans(T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(w, x, y, z) unit quaternion plus translation."""
    q = Rotation.from_matrix(T[:3, :3]).as_quat()  # x, y, z, w
    return np.array([q[3], q[0], q[1], q[2]]), T[:3, 3].copy()


def quat_trans_to_pose(q_wxyz, t) -> np.ndarray:
    w, x, y, z = q_wxyz
    R = Rotation.from_quat([x, y, z, w]).as_matrix()
    return make_pose(R, np.asarray(t, dtype=float))


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Closed-form least-squares rigid transform mapping src points onto dst.

    Centroid subtraction plus SVD of the cross-covariance (orthogonal
    Procrustes), with the usual reflection fix. Returns T with
    dst ~= T[:3,:3] @ src + T[:3,3].
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.shape[0] < 3:
        raise ValueError("rigid_fit needs matching point sets of >= 3 points")
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    H = (src - c_src).T @ (dst - c_dst)
    U, _, Vt = np.linalg.svd(H)
    R = Vt.T @ U.T
    if np.linalg.det(R) < 0:
        Vt = Vt.copy()
        Vt[2, :] *= -1
        R = Vt.T @ U.T
    t = c_dst - R @ c_src
    return make_pose(R, t)


def random_rigid_transform(rng: np.random.Generator, max_translation: float = 5.0) -> np.ndarray:
    R = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
    t = rng.uniform(-max_translation, max_translation, size=3)
    return make_pose(R, t)
