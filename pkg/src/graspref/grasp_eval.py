"""Quasi-static parallel-jaw grasp evaluation.

Gripper frame: +z is the approach axis (pointing from the palm toward the
object), +x the closing axis, +y spans the finger width.  The origin is the
grasp point.  Each finger is a rectangle at ``x = +-max_aperture/2`` reaching
from the palm plane ``z = -palm_offset`` to the fingertips ``z = finger_depth``.
The gripper starts ``approach_offset`` back along -z and moves straight in.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import Plane
from .geometry import Frame, Pose, compose, invert
from .shapes import ShapeSpec, dense_samples, raycast, shape_mesh

APPROACH_COLLISION = "ApproachCollision"
NO_CONTACT = "NoContact"
NON_ANTIPODAL = "NonAntipodal"
APERTURE_EXCEEDED = "ApertureExceeded"
SLIP_PREDICTED = "SlipPredicted"
# recorded by the benchmark when planning itself failed before evaluation
PLANNING_FAILED = "PlanningFailed"


@dataclass(frozen=True)
class GripperSpec:
    max_aperture: float = 0.085
    finger_width: float = 0.02
    finger_depth: float = 0.03
    palm_offset: float = 0.025
    approach_offset: float = 0.20
    mu: float = 0.5
    # shortest contact patch (along the approach axis) that is held without slipping
    min_engagement: float = 0.005
    # points within this distance of the leading surface count as the contact patch
    contact_band: float = 0.0015

    def __post_init__(self):
        for name in ("max_aperture", "finger_width", "finger_depth", "palm_offset",
                     "approach_offset", "mu", "min_engagement", "contact_band"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.approach_offset <= self.finger_depth:
            raise ValueError("approach_offset must exceed finger_depth")


@dataclass
class GraspVerdict:
    success: bool
    failure_mode: str | None
    contact_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    contact_normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    quality: float = 0.0

    @property
    def contact_separation(self):
        if len(self.contact_points) < 2:
            return 0.0
        return float(np.linalg.norm(self.contact_points[0] - self.contact_points[1]))


def _angle(a, b):
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))


def grasp_quality(contacts, normals, mu=0.5):
    """``1 - angle(-n1, n2) / (2 atan mu)`` clamped to [0, 1]."""
    contacts = np.asarray(contacts, dtype=float)
    normals = np.asarray(normals, dtype=float)
    if len(contacts) != 2 or len(normals) != 2:
        raise ValueError("grasp_quality needs exactly two contacts")
    ang = _angle(-normals[0], normals[1])
    return float(np.clip(1.0 - ang / (2.0 * np.arctan(mu)), 0.0, 1.0))


def _gripper_corners(g: GripperSpec, back=0.0):
    a, w = g.max_aperture / 2, g.finger_width / 2
    xs, ys = (-a, a), (-w, w)
    zs = (-g.palm_offset - back, g.finger_depth - back)
    return np.array([[x, y, z] for x in xs for y in ys for z in zs])


def evaluate_grasp(grasp: Pose, shape: ShapeSpec, object_pose: Pose, gripper: GripperSpec = GripperSpec(),
                   table: Plane = Plane()) -> GraspVerdict:
    """Judge a table-frame grasp on ``shape`` placed at ``object_pose`` (Table<-Object).

    Deterministic: the object is represented by a fixed dense surface sample and
    its mesh; no randomness is drawn here.
    """
    if grasp.to_frame != object_pose.to_frame:
        grasp = grasp.relabel(to_frame=object_pose.to_frame)
    g2o = compose(invert(grasp.relabel(from_frame=Frame.GRIPPER)), object_pose)  # Gripper<-Object
    samples = dense_samples(shape)
    P = g2o.apply(samples.points)
    N = g2o.apply_dirs(samples.normals)

    # 1. gripper geometry (final and start of approach) must stay above the table
    for back in (0.0, gripper.approach_offset):
        corners = grasp.apply(_gripper_corners(gripper, back))
        if np.any(table.signed_distance(corners) < 0.0):
            return GraspVerdict(False, APPROACH_COLLISION)

    half_a = gripper.max_aperture / 2
    half_w = gripper.finger_width / 2
    in_y = np.abs(P[:, 1]) <= half_w
    slab = in_y & (P[:, 2] >= -gripper.palm_offset) & (P[:, 2] <= gripper.finger_depth)
    close = slab & (np.abs(P[:, 0]) <= half_a)
    if not np.any(close):
        return GraspVerdict(False, NO_CONTACT)
    span = P[slab, 0]
    if span.max() - span.min() > gripper.max_aperture:
        return GraspVerdict(False, APERTURE_EXCEEDED)
    xs = P[close, 0]

    # 2. swept fingers and palm during the straight-line approach
    sweep = in_y & (P[:, 2] <= gripper.finger_depth) & (P[:, 2] >= -gripper.palm_offset - gripper.approach_offset)
    xsw = P[sweep, 0]
    for plane_x in (-half_a, half_a):
        if np.any(xsw < plane_x) and np.any(xsw > plane_x):
            return GraspVerdict(False, APPROACH_COLLISION)
    palm = (in_y & (np.abs(P[:, 0]) < half_a) & (P[:, 2] < -gripper.palm_offset)
            & (P[:, 2] >= -gripper.palm_offset - gripper.approach_offset))
    if np.any(palm):
        return GraspVerdict(False, APPROACH_COLLISION)

    # 3. close both fingers until first contact
    idx = np.flatnonzero(close)
    mesh = shape_mesh(shape)
    o2g = invert(g2o)
    contacts, normals, engaged = [], [], True
    for sign in (1.0, -1.0):
        lead = (sign * xs).max()
        band = idx[sign * P[idx, 0] >= lead - gripper.contact_band]
        zb = P[band, 2]
        engaged &= bool(zb.max() - zb.min() >= gripper.min_engagement)
        # contact at the patch centre, refined by casting the pad ray onto the mesh
        origin = np.array([sign * half_a, P[band, 1].mean(), zb.mean()])
        direction = np.array([-sign, 0.0, 0.0])
        t, _, hit_n = raycast(mesh, o2g.apply(origin)[None], o2g.apply_dirs(direction)[None])
        if np.isfinite(t[0]):
            contacts.append(origin + t[0] * direction)
            normals.append(g2o.apply_dirs(hit_n[0]))
        else:
            k = band[np.argmax(sign * P[band, 0])]
            contacts.append(P[k])
            normals.append(N[k])

    c1, c2 = contacts
    n1, n2 = normals
    pts_t = grasp.apply(np.array(contacts))
    nrm_t = grasp.apply_dirs(np.array(normals))
    if not engaged:
        return GraspVerdict(False, SLIP_PREDICTED, pts_t, nrm_t, 0.0)
    sep = np.linalg.norm(c2 - c1)
    if sep < 1e-9:
        return GraspVerdict(False, NO_CONTACT, pts_t, nrm_t, 0.0)
    if sep > gripper.max_aperture:
        return GraspVerdict(False, APERTURE_EXCEEDED, pts_t, nrm_t, 0.0)
    quality = grasp_quality([c1, c2], [n1, n2], gripper.mu)
    cone = np.arctan(gripper.mu)
    line = (c2 - c1) / sep
    if _angle(-n1, line) >= cone or _angle(-n2, -line) >= cone:
        return GraspVerdict(False, NON_ANTIPODAL, pts_t, nrm_t, quality)
    return GraspVerdict(True, None, pts_t, nrm_t, quality)


def make_grasp_pose(position, approach, closing, from_frame=Frame.GRIPPER, to_frame=Frame.OBJECT):
    """Gripper pose from a grasp point, approach direction and closing direction."""
    z = np.asarray(approach, dtype=float)
    z = z / np.linalg.norm(z)
    x = np.asarray(closing, dtype=float)
    x = x - np.dot(x, z) * z
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), position, from_frame, to_frame)
