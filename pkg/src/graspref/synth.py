"""Synthetic capture rig: scenes, a virtual depth camera, example-grasp labels and datasets."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import Plane, PointCloud, load_cloud, save_cloud
from .errors import NoFeasibleGrasp, ObjectOutOfView
from .geometry import (Frame, Pose, compose, format_row, invert, look_at, pose_from_row, pose_to_row,
                       pose_to_vector, rot_z)
from .grasp_eval import GripperSpec, evaluate_grasp, make_grasp_pose
from .shapes import (BOX, ShapeSpec, bounding_center, bounding_radius, dense_samples, raycast_pinhole,
                     sample_surface, shape_mesh)

log = logging.getLogger(__name__)

RESOLUTION = 64
FOCAL = 60.0
DEFAULT_INTRINSICS = (FOCAL, FOCAL, (RESOLUTION - 1) / 2.0, (RESOLUTION - 1) / 2.0)


@dataclass(frozen=True)
class Scene:
    shape: ShapeSpec
    object_pose: Pose   # Table <- Object
    camera_pose: Pose   # Table <- Camera
    table_plane: Plane = Plane()


@dataclass
class Observation:
    depth: np.ndarray
    mask: np.ndarray
    intrinsics: tuple
    camera_pose: Pose   # Table <- Camera

    @property
    def shape(self):
        return self.depth.shape


@dataclass
class LabeledExample:
    observation: Observation
    grasp_camera_frame: np.ndarray   # 12-vector t* = T_C^G*
    object_id: str
    gt_cloud: PointCloud             # object frame
    object_pose: Pose                # Table <- Object
    grasp_object_frame: Pose         # Object <- Gripper, as used for this view
    split: str = "train"
    view_index: int = 0

    @property
    def camera_from_object(self):
        return compose(invert(self.observation.camera_pose), self.object_pose)

    def gt_cloud_camera(self):
        return self.gt_cloud.transformed(self.camera_from_object)


# -- rendering ---------------------------------------------------------------------------

def pixel_rays(height, width, intrinsics):
    fx, fy, cx, cy = intrinsics
    v, u = np.mgrid[0:height, 0:width].astype(float)
    return np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1)


def render_depth(scene: Scene, resolution=RESOLUTION, intrinsics=DEFAULT_INTRINSICS,
                 depth_noise=0.0, seed=None) -> Observation:
    """Ray-cast camera-z depth of object and table; the mask marks object pixels."""
    H = W = int(resolution)
    c_from_o = compose(invert(scene.camera_pose), scene.object_pose)
    obj = raycast_pinhole(shape_mesh(scene.shape), c_from_o.rotation, c_from_o.translation, intrinsics, H, W)
    plane_c = scene.table_plane.transformed(invert(scene.camera_pose))
    rays = pixel_rays(H, W, intrinsics)
    denom = rays @ np.asarray(plane_c.normal)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_table = plane_c.offset / denom
    t_table = np.where(np.isfinite(t_table) & (t_table > 1e-9), t_table, np.inf)
    mask = np.isfinite(obj) & (obj <= t_table)
    if not np.any(mask):
        raise ObjectOutOfView(f"object {scene.shape.id} produces no pixels")
    depth = np.where(mask, obj, t_table)
    depth = np.where(np.isfinite(depth), depth, 0.0)
    if depth_noise > 0:
        rng = np.random.default_rng(seed)
        depth = np.where(depth > 0, depth + rng.normal(0.0, depth_noise, depth.shape), 0.0)
    return Observation(depth, mask, tuple(float(v) for v in intrinsics), scene.camera_pose)


def unproject(obs: Observation, mask=None) -> PointCloud:
    """Back-project pixels with a return (restricted to ``mask`` if given) into the camera frame."""
    sel = obs.depth > 0
    if mask is not None:
        sel &= mask
    rays = pixel_rays(*obs.depth.shape, obs.intrinsics)
    pts = rays[sel] * obs.depth[sel][:, None]
    return PointCloud(pts, None, Frame.CAMERA)


def visible_cloud(obs: Observation, table: Plane = Plane(), epsilon=0.002) -> PointCloud:
    """Segment the object by dropping back-projected points on or beneath the table (camera frame)."""
    from .cloud import crop_below_plane
    full = unproject(obs).transformed(obs.camera_pose)
    kept = crop_below_plane(full, table, epsilon)
    return kept.transformed(invert(obs.camera_pose))


# -- example grasp labelling ---------------------------------------------------------------

def _rule_target(spec: ShapeSpec):
    """Semantic anchor: top-face centre for boxes, the -x ("heel") rim for superquadrics."""
    samples = dense_samples(spec)
    if spec.family == BOX:
        return np.array([0.0, 0.0, spec.extents[2]])
    x_t = -0.35 * spec.extents[0]
    near = (np.abs(samples.points[:, 0] - x_t) < 0.01) & (np.abs(samples.points[:, 1]) < 0.01)
    z_t = samples.points[near, 2].max()
    return np.array([x_t, 0.0, z_t])


def grasp_candidates(spec: ShapeSpec, n, rng):
    """Top-down candidates on upward-facing surface plus free 6-DOF candidates."""
    samples = dense_samples(spec)
    pts, nrm = samples.points, samples.normals
    up = np.flatnonzero(nrm[:, 2] > 0.95)
    if len(up) == 0:
        up = np.arange(len(pts))
    # a third of the top-down candidates concentrate around the semantic anchor
    anchor = _rule_target(spec)
    near = up[np.linalg.norm(pts[up, :2] - anchor[:2], axis=1) < 0.02]
    n_top = int(round(0.7 * n))
    cands = []
    for k in range(n_top):
        pool = near if (k % 3 == 2 and len(near)) else up
        i = pool[rng.integers(len(pool))]
        if k % 2 == 0:
            yaw = rng.uniform(0.0, np.pi)
        else:
            yaw = rng.integers(2) * np.pi / 2 + rng.normal(0.0, np.radians(3.0))
        closing = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        cands.append((make_grasp_pose(pts[i], [0, 0, -1.0], closing), True))
    for _ in range(n - n_top):
        i = rng.integers(len(pts))
        approach = -nrm[i] + rng.normal(0.0, 0.15, 3)
        closing = rng.normal(size=3)
        if np.linalg.norm(np.cross(approach, closing)) < 1e-6:
            continue
        cands.append((make_grasp_pose(pts[i], approach, closing), False))
    return cands


ROBUST_SHIFT = 0.003
ROBUST_TILT = np.radians(3.0)


def _robust(pose: Pose, spec, table_pose, gripper):
    """Success under +-3 mm shifts along the gripper x/y axes and +-3 deg about its approach axis."""
    for axis in (0, 1):
        for sign in (-1.0, 1.0):
            t = pose.translation + sign * ROBUST_SHIFT * pose.rotation[:, axis]
            if not evaluate_grasp(Pose(pose.rotation, t, pose.from_frame, pose.to_frame), spec, table_pose,
                                  gripper).success:
                return False
    for sign in (-1.0, 1.0):
        R = pose.rotation @ rot_z(sign * ROBUST_TILT)
        if not evaluate_grasp(Pose(R, pose.translation, pose.from_frame, pose.to_frame), spec, table_pose,
                              gripper).success:
            return False
    return True


def label_example_grasp(spec: ShapeSpec, gripper: GripperSpec = GripperSpec(), seed=0, n_candidates=500,
                        rule="semantic") -> Pose:
    """Sample, score and select one example grasp ``T_O^G*`` (Object <- Gripper).

    ``rule="semantic"`` keeps successful top-down grasps (those that also survive
    small placement errors, when any do), takes the ones within 3 mm of the
    candidate nearest the family's anchor point and returns the best-quality one;
    ``rule="best"`` returns the highest-quality successful candidate.
    """
    rng = np.random.default_rng(seed)
    table_pose = Pose(np.eye(3), np.zeros(3), Frame.OBJECT, Frame.OBJECT)
    cands = grasp_candidates(spec, max(n_candidates, 500), rng)
    scored = []
    for k, (pose, top_down) in enumerate(cands):
        v = evaluate_grasp(pose, spec, table_pose, gripper)
        if v.success:
            scored.append((k, pose, top_down, v.quality))
    if rule == "best":
        if not scored:
            raise NoFeasibleGrasp(f"no successful grasp among {len(cands)} candidates for {spec.id}")
        k, pose, _, _ = max(scored, key=lambda s: (s[3], -s[0]))
        return pose
    pool = [s for s in scored if s[2]]
    if not pool:
        raise NoFeasibleGrasp(f"no successful top-down grasp among {len(cands)} candidates for {spec.id}")
    # prefer grasps that survive small placement errors
    robust = [s for s in pool if _robust(s[1], spec, table_pose, gripper)]
    pool = robust or pool
    target = _rule_target(spec)
    dist = np.array([np.linalg.norm(s[1].translation - target) for s in pool])
    near = [s for s, d in zip(pool, dist) if d <= dist.min() + 0.003]
    k, pose, _, _ = max(near, key=lambda s: (s[3], -s[0]))
    return pose


# -- viewpoints and datasets ----------------------------------------------------------------

@dataclass(frozen=True)
class ViewpointPolicy:
    """Turntable-style azimuth ring; view k uses elevation ``elevations_deg[k % len]``.

    Elevation 0 places the camera ``low_camera_height`` above the table looking
    horizontally; other elevations look at the object's bounding-box centre from
    ``distance``.
    """

    distance: float = 0.5
    elevations_deg: tuple = (0.0, 50.0)
    low_camera_height: float = 0.065
    jitter_position: float = 0.01
    jitter_yaw_deg: float = 5.0
    resolution: int = RESOLUTION
    focal: float = FOCAL
    depth_noise: float = 0.0
    cloud_points: int = 2048

    @property
    def intrinsics(self):
        c = (self.resolution - 1) / 2.0
        return (self.focal, self.focal, c, c)


def camera_pose_for(target, azimuth, elevation_deg, distance=0.5, low_height=0.065) -> Pose:
    """Table <- Camera pose on a ring around ``target`` (table frame)."""
    target = np.asarray(target, dtype=float)
    dirxy = np.array([np.cos(azimuth), np.sin(azimuth), 0.0])
    if abs(elevation_deg) < 1e-12:
        eye = np.array([target[0], target[1], 0.0]) + distance * dirxy
        eye[2] = low_height
        look = np.array([target[0], target[1], low_height])
    else:
        el = np.radians(elevation_deg)
        eye = target + distance * (np.cos(el) * dirxy + np.array([0, 0, np.sin(el)]))
        look = target
    return Pose(look_at(eye, look), eye, Frame.CAMERA, Frame.TABLE)


def jittered_object_pose(rng, jitter_position, jitter_yaw_deg, base_yaw=0.0) -> Pose:
    dx, dy = rng.uniform(-jitter_position, jitter_position, 2) if jitter_position > 0 else (0.0, 0.0)
    yaw = base_yaw + (np.radians(rng.uniform(-jitter_yaw_deg, jitter_yaw_deg)) if jitter_yaw_deg > 0 else 0.0)
    return Pose(rot_z(yaw), [dx, dy, 0.0], Frame.OBJECT, Frame.TABLE)


def canonical_grasp(c_from_o: Pose, grasp_obj: Pose) -> Pose:
    """Pick the one of the two jaw-symmetric grasps whose closing axis has camera x >= 0."""
    g = compose(c_from_o, grasp_obj)
    if g.rotation[0, 0] < 0:
        flip = Pose(rot_z(np.pi), np.zeros(3), Frame.GRIPPER, Frame.GRIPPER)
        return compose(grasp_obj, flip)
    return grasp_obj


def make_dataset(shapes, views_per_shape, policy: ViewpointPolicy = ViewpointPolicy(), seed=0,
                 test_ids=(), gripper: GripperSpec = GripperSpec(), labels=None):
    """Render every (shape, view) pair and attach ground-truth grasps and clouds.

    ``labels`` optionally maps shape id -> precomputed ``T_O^G*``.
    """
    if not shapes:
        raise ValueError("make_dataset needs at least one shape")
    examples = []
    test_ids = set(test_ids)
    for si, spec in enumerate(shapes):
        ss = np.random.SeedSequence([int(seed), si])
        label_seed, cloud_seed, view_seed = ss.spawn(3)
        grasp_obj = labels[spec.id] if labels and spec.id in labels else \
            label_example_grasp(spec, gripper, np.random.default_rng(label_seed))
        gt = sample_surface(spec, policy.cloud_points, np.random.default_rng(cloud_seed))
        rng = np.random.default_rng(view_seed)
        for k in range(views_per_shape):
            az = 2.0 * np.pi * k / views_per_shape
            el = policy.elevations_deg[k % len(policy.elevations_deg)]
            obj_pose = jittered_object_pose(rng, policy.jitter_position, policy.jitter_yaw_deg)
            target = obj_pose.apply(bounding_center(spec))
            cam = camera_pose_for(target, az, el, policy.distance, policy.low_camera_height)
            scene = Scene(spec, obj_pose, cam)
            try:
                obs = render_depth(scene, policy.resolution, policy.intrinsics, policy.depth_noise,
                                   seed=rng.integers(1 << 31) if policy.depth_noise > 0 else None)
            except ObjectOutOfView as exc:
                log.warning("skipping view %d of %s: %s", k, spec.id, exc)
                continue
            c_from_o = compose(invert(cam), obj_pose)
            g_obj = canonical_grasp(c_from_o, grasp_obj)
            t_star = pose_to_vector(compose(c_from_o, g_obj))
            examples.append(LabeledExample(obs, t_star, spec.id, gt, obj_pose, g_obj,
                                           "test" if spec.id in test_ids else "train", k))
    return examples


def split(examples, which):
    return [e for e in examples if e.split == which]


def labels_from_examples(examples):
    """Per-object example grasp, taken from the first view (up to the jaw-symmetric flip)."""
    out = {}
    for e in examples:
        out.setdefault(e.object_id, e.grasp_object_frame)
    return out


# -- dataset directory -------------------------------------------------------------------------
#
#   <dir>/manifest.json            shapes, labels and one record per example
#   <dir>/clouds/<object_id>.pcb   ground-truth cloud (object frame, binary cloud format)
#   <dir>/views/<object_id>_<k>_depth.npy, _mask.npy

def save_dataset(examples, shapes, directory, labels=None):
    d = Path(directory)
    (d / "clouds").mkdir(parents=True, exist_ok=True)
    (d / "views").mkdir(parents=True, exist_ok=True)
    labels = labels or {}
    records = []
    clouds_done = set()
    for e in examples:
        if e.object_id not in clouds_done:
            save_cloud(e.gt_cloud, d / "clouds" / f"{e.object_id}.pcb")
            clouds_done.add(e.object_id)
        stem = f"{e.object_id}_{e.view_index:03d}"
        np.save(d / "views" / f"{stem}_depth.npy", e.observation.depth)
        np.save(d / "views" / f"{stem}_mask.npy", e.observation.mask)
        records.append({
            "object_id": e.object_id,
            "view_index": e.view_index,
            "split": e.split,
            "depth": f"views/{stem}_depth.npy",
            "mask": f"views/{stem}_mask.npy",
            "cloud": f"clouds/{e.object_id}.pcb",
            "intrinsics": list(e.observation.intrinsics),
            "camera_pose": format_row(pose_to_row(e.observation.camera_pose)),
            "object_pose": format_row(pose_to_row(e.object_pose)),
            "grasp_object_frame": format_row(pose_to_row(e.grasp_object_frame)),
            "grasp_camera_frame": format_row(e.grasp_camera_frame),
        })
    manifest = {
        "format": "graspref-dataset/1",
        "shapes": [s.to_dict() for s in shapes],
        "labels": {k: format_row(pose_to_row(v)) for k, v in sorted(labels.items())},
        "examples": records,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(directory):
    """Returns ``(examples, shapes, labels)``."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    shapes = [ShapeSpec.from_dict(s) for s in manifest["shapes"]]
    labels = {k: pose_from_row([float(x) for x in v.split()], Frame.GRIPPER, Frame.OBJECT)
              for k, v in manifest.get("labels", {}).items()}
    clouds = {}
    examples = []
    for r in manifest["examples"]:
        if r["cloud"] not in clouds:
            clouds[r["cloud"]] = load_cloud(d / r["cloud"])
        row = lambda key: [float(x) for x in r[key].split()]
        obs = Observation(np.load(d / r["depth"]), np.load(d / r["mask"]), tuple(r["intrinsics"]),
                          pose_from_row(row("camera_pose"), Frame.CAMERA, Frame.TABLE))
        examples.append(LabeledExample(
            obs, np.array(row("grasp_camera_frame")), r["object_id"], clouds[r["cloud"]],
            pose_from_row(row("object_pose"), Frame.OBJECT, Frame.TABLE),
            pose_from_row(row("grasp_object_frame"), Frame.GRIPPER, Frame.OBJECT),
            r["split"], r["view_index"]))
    return examples, shapes, labels


def grasp_radius_ok(spec: ShapeSpec, grasp_obj: Pose):
    return np.linalg.norm(grasp_obj.translation - bounding_center(spec)) <= 1.5 * bounding_radius(spec)
