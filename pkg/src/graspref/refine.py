"""Nearest-point grasp refinement and the end-to-end planning pipeline."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .align import IcpParams
from .cloud import Plane, PointCloud, nearest_point
from .errors import EmptyCloud, GraspRefError, NoCorrespondences, PipelineError
from .geometry import Frame, Pose, compose, invert

log = logging.getLogger(__name__)

NONE = "None"
VISIBLE = "Visible"
SRNET = "SRNet"
LIBRARY = "Library"
GPNET = "GPNet"
NAIVE = "Naive"

PROPOSALS = (GPNET, NAIVE, LIBRARY)
REFINEMENTS = (NONE, VISIBLE, SRNET, LIBRARY)


@dataclass(frozen=True)
class RefinementSource:
    variant: str
    payload: PointCloud | None = None

    def __post_init__(self):
        if self.variant not in REFINEMENTS:
            raise ValueError(f"unknown refinement variant {self.variant!r}")
        if self.variant != NONE and (self.payload is None or len(self.payload) == 0):
            raise EmptyCloud(f"{self.variant} refinement needs a nonempty cloud")


def refine_grasp(g: Pose, src: RefinementSource) -> Pose:
    """Move the grasp point to the nearest cloud point; the rotation is kept as-is.

    Ties go to the lowest point ordinal.
    """
    if src.variant == NONE:
        return g
    cloud = src.payload
    if cloud.frame != g.to_frame:
        from .errors import FrameMismatch
        raise FrameMismatch(f"grasp is in {g.to_frame.value}, cloud in {cloud.frame.value}")
    p, _, _ = nearest_point(cloud.index, g.translation)
    return Pose(g.rotation, p, g.from_frame, g.to_frame, check=False)


@dataclass
class SceneInputs:
    """Everything a planner may use for one observation."""

    observation: object
    visible: PointCloud                   # segmented, camera frame
    camera_pose: Pose                     # Table <- Camera
    robot_from_table: Pose = field(default_factory=lambda: Pose(np.eye(3), [0.5, 0.0, 0.0], Frame.TABLE, Frame.ROBOT))
    table: Plane = Plane()
    object_id: str | None = None
    proposal_model: object = None
    recon_model: object = None
    library: object = None
    # ground-truth T_C^O when the caller knows it; Library refinement then
    # projects onto the exactly posed library cloud (the geometry oracle)
    true_object_pose: Pose | None = None
    seed: int = 0
    icp: IcpParams = IcpParams(starts=1)
    recon_samples: int = 4096
    # memoised intermediate results shared between method combinations
    cache: dict = field(default_factory=dict)


@dataclass
class GraspPlan:
    proposed: Pose        # Gripper -> Camera
    refined: Pose         # Gripper -> Camera
    robot_grasp: Pose     # Gripper -> Robot
    timings: dict


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except (GraspRefError, ValueError) as exc:
        raise PipelineError(name, exc) from exc


def srnet_cloud(inp: SceneInputs):
    """ICP-aligned reconstruction (camera frame); unaligned on alignment failure."""
    if "srnet" in inp.cache:
        return inp.cache["srnet"]
    from .recon import align_to_visible, reconstruct
    if inp.recon_model is None:
        raise PipelineError("reconstruct", ValueError("no reconstruction model supplied"))
    recon = _stage("reconstruct", reconstruct, inp.recon_model, inp.observation, inp.recon_samples, inp.seed)
    try:
        cloud, _ = _stage("align", align_to_visible, recon, inp.visible, inp.icp)
    except PipelineError as exc:
        if not isinstance(exc.cause, (NoCorrespondences, EmptyCloud)):
            raise
        log.warning("reconstruction alignment failed (%s); using the unaligned reconstruction", exc.cause)
        cloud = recon
    inp.cache["srnet"] = cloud
    return cloud


def object_pose_estimate(inp: SceneInputs):
    """Library-based ``T_C^O`` for ``inp.object_id`` (memoised)."""
    if "c_from_o" in inp.cache:
        return inp.cache["c_from_o"]
    from .propose import estimate_object_pose
    if inp.library is None:
        raise PipelineError("pose_estimate", ValueError("no grasp library supplied"))
    entry = _stage("pose_estimate", inp.library.get, inp.object_id)
    c_from_o, _ = _stage("pose_estimate", estimate_object_pose, entry.cloud, inp.visible, IcpParams(),
                         inp.camera_pose)
    inp.cache["c_from_o"] = c_from_o
    return c_from_o


def library_cloud(inp: SceneInputs):
    """Library cloud in the camera frame, posed by the true object pose if known, else estimated."""
    if "library_cloud" in inp.cache:
        return inp.cache["library_cloud"]
    if inp.library is None:
        raise PipelineError("pose_estimate", ValueError("no grasp library supplied"))
    c_from_o = inp.true_object_pose
    if c_from_o is None:
        c_from_o = object_pose_estimate(inp)
    else:
        _stage("pose_estimate", inp.library.get, inp.object_id)
    cloud = inp.library.get(inp.object_id).cloud.transformed(c_from_o)
    inp.cache["library_cloud"] = cloud
    return cloud


def propose(method, inp: SceneInputs, refinement=None) -> Pose:
    """Proposal in the camera frame (Gripper -> Camera)."""
    if method == GPNET:
        from .propose import gpnet_propose
        if inp.proposal_model is None:
            raise PipelineError("propose", ValueError("no proposal model supplied"))
        return _stage("propose", gpnet_propose, inp.proposal_model, inp.observation)
    if method == NAIVE:
        from .propose import naive_propose
        # paired with reconstruction refinement, the naive grasp is placed from the aligned reconstruction
        basis = srnet_cloud(inp) if refinement == SRNET else inp.visible
        basis_t = basis.transformed(inp.camera_pose)
        g_t = _stage("propose", naive_propose, basis_t, inp.table, inp.seed)
        return compose(invert(inp.camera_pose), g_t)
    if method == LIBRARY:
        c_from_o = object_pose_estimate(inp)
        return compose(c_from_o, inp.library.get(inp.object_id).grasp)
    raise PipelineError("propose", ValueError(f"unknown proposal method {method!r}"))


def refinement_source(method, inp: SceneInputs) -> RefinementSource:
    if method == NONE:
        return RefinementSource(NONE)
    if method == VISIBLE:
        return _stage("refine", RefinementSource, VISIBLE, inp.visible)
    if method == SRNET:
        return RefinementSource(SRNET, srnet_cloud(inp))
    if method == LIBRARY:
        return RefinementSource(LIBRARY, library_cloud(inp))
    raise PipelineError("refine", ValueError(f"unknown refinement method {method!r}"))


def plan_grasp_detailed(proposal_method, refinement_method, inp: SceneInputs) -> GraspPlan:
    timings = {}
    t0 = time.perf_counter()
    g = propose(proposal_method, inp, refinement_method)
    timings["propose"] = (time.perf_counter() - t0) * 1e3
    t0 = time.perf_counter()
    src = refinement_source(refinement_method, inp)
    g_ref = _stage("refine", refine_grasp, g, src)
    timings["refine"] = (time.perf_counter() - t0) * 1e3
    robot_from_camera = compose(inp.robot_from_table, inp.camera_pose)
    return GraspPlan(g, g_ref, compose(robot_from_camera, g_ref), timings)


def plan_grasp(proposal_method, refinement_method, inp: SceneInputs) -> Pose:
    """Propose, refine and express the grasp in the robot frame (Gripper -> Robot)."""
    return plan_grasp_detailed(proposal_method, refinement_method, inp).robot_grasp
