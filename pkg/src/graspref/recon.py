"""Single-view shape reconstruction with a higher-order function.

A hypernetwork ``g`` maps an observation encoding to the weights of a small
MLP ``f_theta`` which carries points of the unit sphere onto the object
surface, expressed in the camera frame.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .align import IcpParams, icp_align
from .cloud import PointCloud
from .errors import EmptyCloud, EmptyMask
from .geometry import Frame, invert
from .nn import (HyperNet, Mlp, Optimizer, TrainConfig, backward, backward_flat, forward, forward_flat,
                 load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

GRID = 16
ENCODING_SIZE = 2 * GRID * GRID + 6
DEPTH_SCALE = 2.0
TEMPLATE = (3, 64, 64, 3)
HIDDEN = (256, 256)
INFERENCE_SAMPLES = 4096


def encode_observation(obs) -> np.ndarray:
    """Fixed-length observation features (518 values).

    ``[depth crop 16x16 | mask crop 16x16 | centroid (u/W, v/H) | bbox (u0/W, v0/H, w/W, h/H)]``.
    The crops cover a square window centred on the mask bounding box; each
    cell holds the mean masked depth (divided by 2 m) and the mask fraction.
    """
    mask = np.asarray(obs.mask, dtype=bool)
    depth = np.asarray(obs.depth, dtype=float)
    H, W = mask.shape
    vs, us = np.nonzero(mask)
    if len(us) == 0:
        raise EmptyMask("observation mask is empty")
    u0, u1, v0, v1 = us.min(), us.max() + 1, vs.min(), vs.max() + 1
    side = max(u1 - u0, v1 - v0, GRID // 4)
    cu, cv = (u0 + u1) / 2.0, (v0 + v1) / 2.0
    # cell index of every masked pixel within the square window
    iu = np.floor((us + 0.5 - (cu - side / 2.0)) / side * GRID).astype(int)
    iv = np.floor((vs + 0.5 - (cv - side / 2.0)) / side * GRID).astype(int)
    iu = np.clip(iu, 0, GRID - 1)
    iv = np.clip(iv, 0, GRID - 1)
    cell = iv * GRID + iu
    counts = np.bincount(cell, minlength=GRID * GRID).astype(float)
    dsum = np.bincount(cell, weights=depth[vs, us], minlength=GRID * GRID)
    dcell = np.divide(dsum, counts, out=np.zeros_like(dsum), where=counts > 0) / DEPTH_SCALE
    pix_per_cell = (side / GRID) ** 2
    mcell = np.minimum(counts / pix_per_cell, 1.0)
    centroid = [us.mean() / W, vs.mean() / H]
    bbox = [u0 / W, v0 / H, (u1 - u0) / W, (v1 - v0) / H]
    return np.concatenate([dcell, mcell, centroid, bbox])


def sphere_samples(n, rng):
    """Uniform points on the unit sphere (normalised Gaussian triples)."""
    if n < 1:
        raise ValueError("need at least one domain sample")
    x = rng.normal(size=(n, 3))
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    while np.any(r < 1e-12):
        bad = (r < 1e-12)[:, 0]
        x[bad] = rng.normal(size=(bad.sum(), 3))
        r = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / r


@dataclass
class ReconModel:
    hypernet: HyperNet
    domain_samples: int = 512
    canonical_domain: str = "UnitSphere"
    # standardisation of the encoding, fitted on the training split
    in_mean: np.ndarray = field(default_factory=lambda: np.zeros(ENCODING_SIZE))
    in_std: np.ndarray = field(default_factory=lambda: np.ones(ENCODING_SIZE))

    @classmethod
    def create(cls, seed=0, template=TEMPLATE, hidden=HIDDEN, domain_samples=512):
        h = HyperNet.build(ENCODING_SIZE, list(template), hidden, seed=seed, out_scale=1e-2, base_scale=0.1)
        return cls(h, domain_samples)

    @property
    def template(self):
        return self.hypernet.template

    def features(self, enc):
        return (np.asarray(enc, dtype=float) - self.in_mean) / self.in_std

    def weights_for(self, obs):
        return forward(self.hypernet.mlp, self.features(encode_observation(obs)))

    def copy(self):
        return ReconModel(HyperNet(self.hypernet.mlp.copy(), list(self.template)), self.domain_samples,
                          self.canonical_domain, self.in_mean.copy(), self.in_std.copy())


def fit_normalizer(encodings, floor=1e-3):
    enc = np.asarray(encodings, dtype=float)
    return enc.mean(axis=0), np.maximum(enc.std(axis=0), floor)


def reconstruct(m: ReconModel, obs, n=INFERENCE_SAMPLES, seed=0) -> PointCloud:
    """Carry ``n`` uniform sphere samples through ``f_theta``; camera frame, before alignment."""
    theta = m.weights_for(obs)
    x = sphere_samples(int(n), np.random.default_rng(seed))
    return PointCloud(forward_flat(m.template, theta, x), None, Frame.CAMERA)


def chamfer_grad(pred, target_tree: cKDTree, target):
    """Chamfer value and gradient w.r.t. ``pred`` (sum of the two directed means)."""
    _, i_pt = target_tree.query(pred)
    diff_p = pred - target[i_pt]
    _, i_tp = cKDTree(pred).query(target)
    diff_t = target - pred[i_tp]
    n, m = len(pred), len(target)
    val = float(np.sum(diff_p ** 2) / n + np.sum(diff_t ** 2) / m)
    g = 2.0 * diff_p / n
    np.add.at(g, i_tp, -2.0 * diff_t / m)
    return val, g


def batch_loss_grad(m: ReconModel, feats, domain, targets, trees=None, reduction="mean"):
    """Chamfer loss over a batch and its gradient w.r.t. the hypernetwork parameters.

    ``feats`` (B, 518) normalised encodings, ``domain`` (B, S, 3) sphere points,
    ``targets`` list of (M_i, 3) camera-frame ground-truth clouds.
    """
    feats = np.atleast_2d(feats)
    B = len(feats)
    theta = forward(m.hypernet.mlp, feats)
    pred, cache = forward_flat(m.template, theta, domain, return_cache=True)
    trees = trees or [cKDTree(t) for t in targets]
    losses = np.empty(B)
    up = np.empty_like(pred)
    for b in range(B):
        losses[b], up[b] = chamfer_grad(pred[b], trees[b], targets[b])
    scale = 1.0 / B if reduction == "mean" else 1.0
    dtheta, _ = backward_flat(m.template, theta, domain, up * scale, cache)
    grad, _ = backward(m.hypernet.mlp, feats, dtheta)
    loss = losses.mean() if reduction == "mean" else losses.sum()
    return float(loss), grad, losses


@dataclass
class _Prepared:
    feats: np.ndarray
    targets: list
    trees: list


def prepare(m: ReconModel, data, fit=True, target_points=1024, seed=0):
    encs = np.array([encode_observation(e.observation) for e in data])
    if fit:
        m.in_mean, m.in_std = fit_normalizer(encs)
    rng = np.random.default_rng(seed)
    targets = []
    for e in data:
        pts = e.gt_cloud_camera().points
        if len(pts) > target_points:
            pts = pts[np.sort(rng.choice(len(pts), target_points, replace=False))]
        targets.append(pts)
    return _Prepared(m.features(encs), targets, [cKDTree(t) for t in targets])


def train_recon(m: ReconModel, data, cfg: TrainConfig = TrainConfig(), optimizer: Optimizer | None = None,
                epoch_offset=0, refit=True, progress=None):
    """Minimise Chamfer(reconstruction, ground truth in camera frame); returns ``(model, curve)``.

    Sphere samples are redrawn every iteration.  The curve holds the mean
    training loss of each epoch.  Pass a restored ``optimizer`` and
    ``epoch_offset`` to resume; shuffling depends only on (seed, epoch).
    """
    if not data:
        raise ValueError("train_recon needs a nonempty training split")
    prep = prepare(m, data, fit=refit and epoch_offset == 0, seed=cfg.seed)
    opt = optimizer or Optimizer(m.hypernet.mlp.n_params, cfg)
    params = m.hypernet.mlp.params
    curve = []
    N = len(data)
    for epoch in range(epoch_offset, epoch_offset + cfg.epochs):
        opt.set_epoch(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(N)
        total = 0.0
        for s in range(0, N, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            domain = sphere_samples(len(idx) * m.domain_samples, rng).reshape(len(idx), m.domain_samples, 3)
            loss, grad, losses = batch_loss_grad(m, prep.feats[idx], domain, [prep.targets[i] for i in idx],
                                                 [prep.trees[i] for i in idx], cfg.reduction)
            params = opt.step(params, grad)
            m.hypernet.mlp.params = params
            total += losses.sum()
        curve.append(total / N)
        if progress:
            progress(epoch, curve[-1])
    return m, curve


def evaluate_chamfer(m: ReconModel, data, n=INFERENCE_SAMPLES, seed=0):
    """Mean Chamfer distance between reconstructions and camera-frame ground truth."""
    from .cloud import chamfer
    vals = [chamfer(reconstruct(m, e.observation, n, seed), e.gt_cloud_camera()) for e in data]
    return float(np.mean(vals))


def align_to_visible(recon: PointCloud, visible: PointCloud, p: IcpParams = IcpParams(starts=1)):
    """Rigidly align a camera-frame reconstruction to the visible cloud.

    The visible cloud is registered onto the reconstruction (the partial view is
    the subset, so every visible point has a true counterpart) and the inverse
    transform is applied to the reconstruction.  Returns ``(cloud, IcpResult)``.
    """
    if len(visible) == 0:
        raise EmptyCloud("aligned reconstruction needs a nonempty visible cloud")
    res = icp_align(visible, recon, p)
    move = invert(res.transform).relabel(from_frame=Frame.CAMERA, to_frame=Frame.CAMERA)
    return PointCloud(move.apply(recon.points), None, Frame.CAMERA), res


def aligned_reconstruction(m: ReconModel, obs, visible: PointCloud, p: IcpParams = IcpParams(starts=1),
                           n=INFERENCE_SAMPLES, seed=0) -> PointCloud:
    recon = reconstruct(m, obs, n, seed)
    cloud, res = align_to_visible(recon, visible, p)
    log.debug("reconstruction aligned: residual %.3g after %d iterations", res.residual_mse, res.iterations_used)
    return cloud


# -- checkpoints ---------------------------------------------------------------------------

def save_recon(path, m: ReconModel, optimizer: Optimizer | None = None, curve=(), epoch=0):
    header = {"template": list(m.template), "layers": m.hypernet.mlp.layer_sizes,
              "domain_samples": m.domain_samples, "canonical_domain": m.canonical_domain,
              "epoch": int(epoch)}
    vectors = {"params": m.hypernet.mlp.params, "in_mean": m.in_mean, "in_std": m.in_std,
               "curve": np.asarray(curve, dtype=float)}
    if optimizer is not None:
        ov, oh = optimizer.export()
        vectors.update(ov)
        header.update(oh)
        header["optimizer"] = optimizer.cfg.optimizer
    save_checkpoint(path, "recon", header, vectors)


def load_recon(path):
    """Returns ``(model, header, vectors)``; ``vectors`` holds optimizer state and the curve."""
    kind, header, vectors = load_checkpoint(path)
    if kind != "recon":
        raise ValueError(f"{path} holds a {kind!r} checkpoint, not 'recon'")
    mlp = Mlp(header["layers"], params=vectors["params"])
    m = ReconModel(HyperNet(mlp, header["template"]), header["domain_samples"], header["canonical_domain"],
                   vectors["in_mean"], vectors["in_std"])
    return m, header, vectors
