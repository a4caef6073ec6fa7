"""Grasp proposal: a regression network plus the naive and library proposers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import IcpParams, icp_align
from .cloud import Plane, PointCloud, load_cloud, save_cloud
from .errors import DegenerateCloud, EmptyCloud, UnknownObject
from .geometry import (Frame, Pose, combined_loss, combined_loss_grad, compose, format_row, invert,
                       pose_from_row, pose_to_row, rotation_loss, vector_to_pose)
from .nn import Mlp, Optimizer, TrainConfig, backward, forward, load_checkpoint, save_checkpoint
from .recon import ENCODING_SIZE, encode_observation, fit_normalizer

log = logging.getLogger(__name__)

PROPOSAL_LAYERS = (ENCODING_SIZE, 256, 128, 12)
NAIVE_HEIGHT = 0.20
NAIVE_JITTER = 0.02


@dataclass
class ProposalModel:
    """Observation encoding -> 12-vector ``[t, R row-major]`` of ``T_C^G``.

    Inputs are standardised and outputs de-standardised with affine maps
    fitted on the training split (identity until fitted).
    """

    net: Mlp
    in_mean: np.ndarray = field(default_factory=lambda: np.zeros(ENCODING_SIZE))
    in_std: np.ndarray = field(default_factory=lambda: np.ones(ENCODING_SIZE))
    out_mean: np.ndarray = field(default_factory=lambda: np.zeros(12))
    out_std: np.ndarray = field(default_factory=lambda: np.ones(12))

    def __post_init__(self):
        if self.net.n_out != 12:
            raise ValueError("a proposal network must emit 12 values")

    @classmethod
    def create(cls, seed=0, layers=PROPOSAL_LAYERS):
        return cls(Mlp(layers, seed=seed, out_scale=0.1))

    def predict_encoded(self, enc):
        raw = forward(self.net, (np.asarray(enc, dtype=float) - self.in_mean) / self.in_std)
        return self.out_mean + self.out_std * raw

    def predict(self, obs):
        return self.predict_encoded(encode_observation(obs))

    def copy(self):
        return ProposalModel(self.net.copy(), self.in_mean.copy(), self.in_std.copy(), self.out_mean.copy(),
                             self.out_std.copy())


def gpnet_propose(m: ProposalModel, obs) -> Pose:
    """Regressed grasp ``T_C^G`` (Gripper -> Camera), rotation projected onto SO(3)."""
    return vector_to_pose(m.predict(obs), Frame.GRIPPER, Frame.CAMERA)


def _targets(data):
    return np.array([np.asarray(e.grasp_camera_frame, dtype=float) for e in data])


def train_proposal(m: ProposalModel, data, cfg: TrainConfig = TrainConfig(), optimizer: Optimizer | None = None,
                   epoch_offset=0, refit=True, progress=None):
    """Minimise ``lambda_t |dt|^2 + lambda_r |R_hat R*^T - I|_F^2``; returns ``(model, curve)``.

    The curve holds the mean per-example training loss of each epoch.
    """
    if not data:
        raise ValueError("train_proposal needs a nonempty training split")
    encs = np.array([encode_observation(e.observation) for e in data])
    T = _targets(data)
    if refit and epoch_offset == 0:
        m.in_mean, m.in_std = fit_normalizer(encs)
        if len(data) > 1:
            m.out_mean = T.mean(axis=0)
            m.out_std = np.maximum(T.std(axis=0), 1e-3)
    X = (encs - m.in_mean) / m.in_std
    w = cfg.loss_weights
    opt = optimizer or Optimizer(m.net.n_params, cfg)
    params = m.net.params
    curve = []
    N = len(data)
    for epoch in range(epoch_offset, epoch_offset + cfg.epochs):
        opt.set_epoch(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(N)
        total = 0.0
        for s in range(0, N, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            raw = forward(m.net, X[idx])
            t_hat = m.out_mean + m.out_std * raw
            losses = combined_loss(t_hat, T[idx], w)
            total += losses.sum()
            g = combined_loss_grad(t_hat, T[idx], w) * m.out_std
            if cfg.reduction == "mean":
                g = g / len(idx)
            grad, _ = backward(m.net, X[idx], g)
            params = opt.step(params, grad)
            m.net.params = params
        curve.append(total / N)
        if progress:
            progress(epoch, curve[-1])
    return m, curve


def proposal_errors(m: ProposalModel, data):
    """Per-example position error (m) and rotation loss of the projected pose."""
    pos, rl = [], []
    for e in data:
        p = gpnet_propose(m, e.observation)
        pos.append(float(np.linalg.norm(p.translation - e.grasp_camera_frame[:3])))
        rl.append(float(rotation_loss(np.concatenate([p.translation, p.rotation.reshape(9)]), e.grasp_camera_frame,
                                      check=False)))
    return np.array(pos), np.array(rl)


def save_proposal(path, m: ProposalModel, optimizer: Optimizer | None = None, curve=(), epoch=0):
    header = {"layers": m.net.layer_sizes, "epoch": int(epoch)}
    vectors = {"params": m.net.params, "in_mean": m.in_mean, "in_std": m.in_std, "out_mean": m.out_mean,
               "out_std": m.out_std, "curve": np.asarray(curve, dtype=float)}
    if optimizer is not None:
        ov, oh = optimizer.export()
        vectors.update(ov)
        header.update(oh)
        header["optimizer"] = optimizer.cfg.optimizer
    save_checkpoint(path, "proposal", header, vectors)


def load_proposal(path):
    kind, header, vectors = load_checkpoint(path)
    if kind != "proposal":
        raise ValueError(f"{path} holds a {kind!r} checkpoint, not 'proposal'")
    m = ProposalModel(Mlp(header["layers"], params=vectors["params"]), vectors["in_mean"], vectors["in_std"],
                      vectors["out_mean"], vectors["out_std"])
    return m, header, vectors


# -- naive ---------------------------------------------------------------------------------

def _plane_basis(n):
    n = np.asarray(n, dtype=float)
    ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - np.dot(ref, n) * n
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(n, e1)


def naive_propose(visible: PointCloud, table: Plane = Plane(), seed=0) -> Pose:
    """Top-down grasp 20 cm above the table over the cloud centroid (+-2 cm jitter).

    The fingers span the major in-plane axis of the cloud, so the jaws close
    across it.  Returns ``Gripper -> visible.frame``.
    """
    if len(visible) == 0:
        raise EmptyCloud("naive proposal needs a nonempty cloud")
    if len(visible) < 3:
        raise DegenerateCloud("naive proposal needs at least 3 points")
    n = np.asarray(table.normal, dtype=float)
    e1, e2 = _plane_basis(n)
    c = visible.points.mean(axis=0)
    d = visible.points - c
    uv = np.stack([d @ e1, d @ e2], axis=1)
    cov = uv.T @ uv / len(uv)
    w, v = np.linalg.eigh(cov)
    if w[1] <= 1e-14:
        raise DegenerateCloud("cloud has no extent in the table plane")
    major = v[0, 1] * e1 + v[1, 1] * e2
    rng = np.random.default_rng(seed)
    du, dv = rng.uniform(-NAIVE_JITTER, NAIVE_JITTER, 2)
    base = c - (np.dot(n, c) - table.offset) * n
    position = base + NAIVE_HEIGHT * n + du * e1 + dv * e2
    z = -n
    y = major - np.dot(major, z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return Pose(np.stack([x, y, z], axis=1), position, Frame.GRIPPER, visible.frame)


# -- library ---------------------------------------------------------------------------------

@dataclass
class LibraryEntry:
    cloud: PointCloud      # object frame
    grasp: Pose            # Object <- Gripper


class GraspLibrary:
    """Known objects: canonical cloud plus example grasp ``T_O^G*``.

    On disk: ``library.txt`` with one line per object,
    ``<object_id> <cloud file> <r00 ... r22 tx ty tz>`` (pose row order), and the
    referenced clouds in the binary cloud format.
    """

    def __init__(self, entries=None):
        self.entries = dict(entries or {})

    def __contains__(self, object_id):
        return object_id in self.entries

    def __len__(self):
        return len(self.entries)

    def ids(self):
        return sorted(self.entries)

    def add(self, object_id, cloud: PointCloud, grasp: Pose):
        if cloud.frame != Frame.OBJECT:
            raise ValueError("library clouds live in the object frame")
        self.entries[object_id] = LibraryEntry(cloud, grasp.relabel(Frame.GRIPPER, Frame.OBJECT))

    def get(self, object_id) -> LibraryEntry:
        if object_id not in self.entries:
            raise UnknownObject(f"object {object_id!r} is not in the grasp library")
        return self.entries[object_id]

    @classmethod
    def from_labels(cls, shapes, labels, points=6000, seed=0):
        from .shapes import sample_surface
        lib = cls()
        for i, s in enumerate(shapes):
            if s.id in labels:
                lib.add(s.id, sample_surface(s, points, np.random.default_rng([seed, i])), labels[s.id])
        return lib

    def validate(self, shapes):
        """Ids of entries whose grasp fails the evaluator on their own geometry."""
        from .grasp_eval import evaluate_grasp
        ident = Pose(np.eye(3), np.zeros(3), Frame.OBJECT, Frame.OBJECT)
        by_id = {s.id: s for s in shapes}
        return [k for k, e in sorted(self.entries.items())
                if k in by_id and not evaluate_grasp(e.grasp, by_id[k], ident).success]

    def save(self, directory):
        d = Path(directory)
        (d / "clouds").mkdir(parents=True, exist_ok=True)
        lines = []
        for k in self.ids():
            e = self.entries[k]
            rel = f"clouds/{k}.pcb"
            save_cloud(e.cloud, d / rel)
            lines.append(f"{k} {rel} {format_row(pose_to_row(e.grasp))}")
        (d / "library.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        lib = cls()
        for ln, line in enumerate((d / "library.txt").read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 14:
                raise ValueError(f"library.txt line {ln}: expected id, cloud path and 12 numbers")
            row = [float(v) for v in parts[2:]]
            lib.add(parts[0], load_cloud(d / parts[1]), pose_from_row(row, Frame.GRIPPER, Frame.OBJECT))
        return lib


def estimate_object_pose(lib_cloud: PointCloud, visible: PointCloud, p: IcpParams = IcpParams(),
                         camera_pose: Pose | None = None, yaw_starts=8, coarse_gate=0.03) -> tuple:
    """Estimate ``T_C^O`` by registering the visible (camera-frame) cloud onto the library cloud.

    With ``camera_pose`` (Table <- Camera) the initial guess puts the object
    upright under the visible centroid and tries ``yaw_starts`` headings; the
    coarse pass uses a wide correspondence gate, the fine pass the default.
    Returns ``(pose, IcpResult)``.
    """
    if len(visible) == 0:
        raise EmptyCloud("pose estimation needs a nonempty visible cloud")
    init = p.init
    starts = p.starts
    if init is None and camera_pose is not None:
        c_t = camera_pose.apply(visible.points.mean(axis=0))
        t_from_o = Pose(np.eye(3), [c_t[0], c_t[1], 0.0], Frame.OBJECT, Frame.TABLE)
        init = compose(invert(t_from_o), camera_pose.relabel(Frame.CAMERA, Frame.TABLE))
        init = init.relabel(visible.frame, Frame.OBJECT)
        starts = max(starts, yaw_starts)
    elif init is None:
        shift = lib_cloud.points.mean(axis=0) - visible.points.mean(axis=0)
        init = Pose(np.eye(3), shift, visible.frame, Frame.OBJECT)
    coarse = IcpParams(max_iterations=p.max_iterations, convergence_delta=p.convergence_delta,
                       max_correspondence_dist=max(coarse_gate, p.max_correspondence_dist or 0.0),
                       init=init, starts=starts)
    res = icp_align(visible, lib_cloud, coarse)
    fine = IcpParams(max_iterations=p.max_iterations, convergence_delta=p.convergence_delta,
                     max_correspondence_dist=p.max_correspondence_dist, init=res.transform, starts=1)
    res = icp_align(visible, lib_cloud, fine)
    o_from_c = res.transform
    return invert(o_from_c).relabel(Frame.OBJECT, Frame.CAMERA), res


def library_propose(lib: GraspLibrary, object_id, visible: PointCloud, p: IcpParams = IcpParams(),
                    camera_pose: Pose | None = None) -> Pose:
    """``T_C^O T_O^G*`` with ``T_C^O`` estimated by ICP against the library cloud."""
    entry = lib.get(object_id)
    c_from_o, _ = estimate_object_pose(entry.cloud, visible, p, camera_pose)
    return compose(c_from_o, entry.grasp)
