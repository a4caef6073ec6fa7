"""Point-to-point ICP with gated correspondences and yaw multi-start."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .errors import EmptyCloud, NoCorrespondences
from .geometry import Pose, compose, rot_z


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 50
    convergence_delta: float = 1e-7
    # None: 5x the median nearest-neighbour spacing of the target cloud
    max_correspondence_dist: float | None = None
    init: Pose | None = None
    # yaw-rotated starts about the target frame's z axis through the target centroid
    starts: int = 4

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_delta <= 0:
            raise ValueError("convergence_delta must be > 0")
        if self.max_correspondence_dist is not None and not self.max_correspondence_dist > 0:
            raise ValueError("max_correspondence_dist must be > 0")
        if self.starts < 1:
            raise ValueError("starts must be >= 1")


@dataclass
class IcpResult:
    transform: Pose
    residual_mse: float
    iterations_used: int
    converged: bool
    trace: list = field(default_factory=list)
    start_index: int = 0


def fit_rigid(src, dst, weights=None):
    """Least-squares rigid (R, t) with ``R @ src + t ~ dst`` (Kabsch, reflection-safe)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if weights is None:
        mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
        H = (src - mu_s).T @ (dst - mu_d)
    else:
        w = np.asarray(weights, dtype=float) / np.sum(weights)
        mu_s, mu_d = w @ src, w @ dst
        H = (src - mu_s).T @ ((dst - mu_d) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, mu_d - R @ mu_s


def median_spacing(cloud: PointCloud):
    if len(cloud) < 2:
        return 0.0
    d, _ = cloud.index._tree.query(cloud.points, k=2)
    return float(np.median(d[:, 1]))


def _icp_single(src, target: PointCloud, R, t, gate, p: IcpParams):
    gate2 = gate * gate
    index = target.index
    trace = []
    converged = False
    it = 0
    for it in range(1, p.max_iterations + 1):
        moved = src @ R.T + t
        d2, nn = index.query(moved)
        inlier = d2 <= gate2
        if not np.any(inlier):
            raise NoCorrespondences("every correspondence exceeds the distance gate")
        # truncated mean: outliers contribute gate^2, which keeps the trace monotone
        mse = float(np.minimum(d2, gate2).mean())
        if trace and mse > trace[-1]:
            # rounding noise near a fixed point: keep the previous estimate
            R, t = prev
            converged = True
            break
        trace.append(mse)
        prev = R, t
        if mse == 0.0 or (len(trace) > 1 and trace[-2] - mse < p.convergence_delta):
            converged = True
            break
        dR, dt = fit_rigid(moved[inlier], target.points[nn[inlier]])
        R, t = dR @ R, dR @ t + dt
    return R, t, trace, it, converged


def icp_align(source: PointCloud, target: PointCloud, p: IcpParams = IcpParams()) -> IcpResult:
    """Estimate the rigid transform taking ``source`` onto ``target``.

    Runs one classic ICP loop per yaw start and keeps the lowest residual
    (ties: lowest start index).  The returned pose maps source-frame
    coordinates into the target frame.
    """
    if len(source) < 3 or len(target) < 3:
        raise EmptyCloud("ICP needs at least 3 points in each cloud")
    gate = p.max_correspondence_dist
    if gate is None:
        gate = 5.0 * median_spacing(target)
        if gate <= 0:
            gate = np.inf
    init = p.init
    R0 = np.eye(3) if init is None else init.rotation
    t0 = np.zeros(3) if init is None else init.translation
    pivot = target.points.mean(axis=0)
    best = None
    failures = 0
    for k in range(p.starts):
        Y = rot_z(2.0 * np.pi * k / p.starts)
        # rotate the initial guess about a vertical axis through the target centroid
        R = Y @ R0
        t = Y @ (t0 - pivot) + pivot
        try:
            R, t, trace, iters, conv = _icp_single(source.points, target, R, t, gate, p)
        except NoCorrespondences:
            failures += 1
            continue
        if best is None or trace[-1] < best[2][-1]:
            best = (R, t, trace, iters, conv, k)
    if best is None:
        raise NoCorrespondences(f"all {failures} ICP starts had no correspondences within {gate:.4g} m")
    R, t, trace, iters, conv, k = best
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    pose = Pose(R, t, source.frame, target.frame, check=False)
    return IcpResult(pose, trace[-1], iters, conv, trace, k)


def apply_result(cloud: PointCloud, result: IcpResult) -> PointCloud:
    return cloud.transformed(result.transform)


__all__ = ["IcpParams", "IcpResult", "icp_align", "fit_rigid", "median_spacing", "apply_result", "compose"]
