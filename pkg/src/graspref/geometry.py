"""Rigid transforms, the 12-number grasp encoding and the grasp regression losses.

A :class:`Pose` maps coordinates expressed in ``from_frame`` into ``to_frame``;
equivalently it is the pose of ``from_frame`` measured in ``to_frame``.  The
camera-frame grasp ``T_C^G`` is therefore ``Pose(R, t, from_frame=GRIPPER,
to_frame=CAMERA)`` and ``compose(T_R^C, T_C^G)`` yields ``T_R^G``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DegenerateRotation, FrameMismatch

ORTHO_TOL = 1e-9
RANK_TOL = 1e-9


class Frame(str, Enum):
    ROBOT = "Robot"
    GRIPPER = "Gripper"
    CAMERA = "Camera"
    OBJECT = "Object"
    TABLE = "Table"


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray
    from_frame: Frame = Frame.GRIPPER
    to_frame: Frame = Frame.CAMERA
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if self.check:
            if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
                raise DegenerateRotation("rotation block is not a proper rotation")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "from_frame", Frame(self.from_frame))
        object.__setattr__(self, "to_frame", Frame(self.to_frame))

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Map ``(..., 3)`` points from ``from_frame`` into ``to_frame``."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def apply_dirs(self, dirs):
        return np.asarray(dirs, dtype=float) @ self.rotation.T

    def relabel(self, from_frame=None, to_frame=None):
        return Pose(self.rotation, self.translation,
                    from_frame or self.from_frame, to_frame or self.to_frame, check=False)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (self.from_frame == other.from_frame and self.to_frame == other.to_frame
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.from_frame, self.to_frame, self.rotation.tobytes(), self.translation.tobytes()))


def identity(from_frame=Frame.GRIPPER, to_frame=Frame.CAMERA):
    return Pose(np.eye(3), np.zeros(3), from_frame, to_frame)


def compose(a: Pose, b: Pose) -> Pose:
    """Return ``a * b``; requires ``a.from_frame == b.to_frame``."""
    if a.from_frame != b.to_frame:
        raise FrameMismatch(f"cannot compose {a.to_frame.value}<-{a.from_frame.value} with "
                            f"{b.to_frame.value}<-{b.from_frame.value}")
    R = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    return Pose(R, t, b.from_frame, a.to_frame, check=False)


def invert(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation, p.to_frame, p.from_frame, check=False)


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def rotation_angle(R):
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    return axis_angle(axis, rng.uniform(0.0, max_angle))


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera rotation (optical axis +z, image x right, image y down) looking from eye to target."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (0.0, 1.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def nearest_rotation(M):
    """Project a 3x3 matrix onto SO(3) (polar / SVD projection)."""
    M = np.asarray(M, dtype=float).reshape(3, 3)
    if not np.all(np.isfinite(M)):
        raise DegenerateRotation("rotation block is not finite")
    U, s, Vt = np.linalg.svd(M)
    if s[-1] < RANK_TOL:
        raise DegenerateRotation(f"rotation block has rank < 3 (smallest singular value {s[-1]:.3g})")
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def is_rotation(R, tol=1e-12):
    R = np.asarray(R, dtype=float)
    return bool(np.abs(R.T @ R - np.eye(3)).max() <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


# -- 12-number grasp encoding: position first, then the row-major rotation block ----

def trans(t):
    return np.asarray(t, dtype=float)[..., :3]


def rot(t):
    t = np.asarray(t, dtype=float)
    return t[..., 3:12].reshape(t.shape[:-1] + (3, 3))


def pose_to_vector(p: Pose):
    return np.concatenate([p.translation, p.rotation.reshape(9)])


def vector_to_pose(t, from_frame=Frame.GRIPPER, to_frame=Frame.CAMERA) -> Pose:
    t = np.asarray(t, dtype=float).reshape(12)
    R = rot(t)
    if not is_rotation(R):
        R = nearest_rotation(R)
    return Pose(R, trans(t), from_frame, to_frame, check=False)


# Pose file rows use the opposite order: row-major rotation first, then translation.

def pose_to_row(p: Pose):
    return np.concatenate([p.rotation.reshape(9), p.translation])


def pose_from_row(row, from_frame, to_frame, project=True):
    row = np.asarray(row, dtype=float).reshape(12)
    R = row[:9].reshape(3, 3)
    if project and not is_rotation(R):
        R = nearest_rotation(R)
    return Pose(R, row[9:], from_frame, to_frame, check=False)


def format_row(values):
    return " ".join(repr(float(v)) for v in values)


# -- losses ---------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    lambda_t: float = 1.0
    lambda_r: float = 0.01

    def __post_init__(self):
        lt, lr = float(self.lambda_t), float(self.lambda_r)
        if not (np.isfinite(lt) and np.isfinite(lr)) or lt < 0 or lr < 0:
            raise ValueError("loss weights must be finite and nonnegative")
        if lt == 0 and lr == 0:
            raise ValueError("loss weights must not both be zero")


def translation_loss(t_hat, t_star):
    d = trans(t_hat) - trans(t_star)
    return np.sum(d * d, axis=-1)


def _check_rotation_blocks(*vectors):
    for t in vectors:
        blocks = rot(t).reshape(-1, 3, 3)
        for R in blocks:
            if not is_rotation(R, tol=1e-6):
                raise DegenerateRotation("rotation block is not a valid rotation")


def rotation_loss(t_hat, t_star, check=True):
    """Squared Frobenius deviation of ``Rot(t_hat) Rot(t_star)^T`` from identity.

    ``check=False`` evaluates the loss on raw (unprojected) rotation blocks, which
    is what a regression head emits during training.
    """
    if check:
        _check_rotation_blocks(t_hat, t_star)
    M = rot(t_hat) @ np.swapaxes(rot(t_star), -1, -2) - np.eye(3)
    return np.sum(M * M, axis=(-2, -1))


def combined_loss(t_hat, t_star, w: LossWeights = LossWeights(), check=False):
    return w.lambda_t * translation_loss(t_hat, t_star) + w.lambda_r * rotation_loss(t_hat, t_star, check=check)


def combined_loss_grad(t_hat, t_star, w: LossWeights = LossWeights()):
    """Gradient of :func:`combined_loss` with respect to ``t_hat`` (same shape)."""
    t_hat = np.asarray(t_hat, dtype=float)
    g = np.zeros_like(t_hat)
    g[..., :3] = 2.0 * w.lambda_t * (trans(t_hat) - trans(t_star))
    Rs = rot(t_star)
    M = rot(t_hat) @ np.swapaxes(Rs, -1, -2) - np.eye(3)
    dR = 2.0 * w.lambda_r * (M @ Rs)
    g[..., 3:] = dR.reshape(dR.shape[:-2] + (9,))
    return g
