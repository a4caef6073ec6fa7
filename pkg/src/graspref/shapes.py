"""Procedural object geometry: boxes and tapered superquadrics with native meshes.

Object frame: origin at the centre of the footprint on the table, +z up.  A
box with extents ``(L, W, H)`` spans ``[-L/2, L/2] x [-W/2, W/2] x [0, H]``.
A superquadric with the same nominal extents is tapered along x: the height
grows toward -x by ``taper[0]`` and the width shrinks toward -x by
``taper[1]``, which gives it a distinguishable "heel" end.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .cloud import PointCloud
from .geometry import Frame

BOX = "Box"
SUPERQUADRIC = "Superquadric"


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    extents: tuple
    exponents: tuple = (1.0, 1.0)
    taper: tuple = (0.0, 0.0)
    id: str = "shape"

    def __post_init__(self):
        if self.family not in (BOX, SUPERQUADRIC):
            raise ValueError(f"unknown shape family {self.family!r}")
        ext = tuple(float(v) for v in self.extents)
        if len(ext) != 3 or min(ext) < 0.02 - 1e-12 or max(ext) > 0.4 + 1e-12:
            raise ValueError("extents must lie in [0.02, 0.4] m")
        exps = tuple(float(v) for v in self.exponents)
        if self.family == SUPERQUADRIC and (min(exps) < 0.3 or max(exps) > 2.0):
            raise ValueError("superquadric exponents must lie in [0.3, 2.0]")
        taper = tuple(float(v) for v in self.taper)
        if len(taper) != 2 or max(abs(v) for v in taper) >= 0.9:
            raise ValueError("taper factors must lie in (-0.9, 0.9)")
        object.__setattr__(self, "extents", ext)
        object.__setattr__(self, "exponents", exps)
        object.__setattr__(self, "taper", taper)

    def to_dict(self):
        d = asdict(self)
        d["extents"] = list(self.extents)
        d["exponents"] = list(self.exponents)
        d["taper"] = list(self.taper)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], tuple(d["extents"]), tuple(d.get("exponents", (1, 1))),
                   tuple(d.get("taper", (0, 0))), d["id"])


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    # per-vertex unit normals (smooth surfaces) or None for flat shading
    vertex_normals: np.ndarray | None
    face_normals: np.ndarray
    # per-vertex (eta, omega) surface parameters, superquadrics only
    params: np.ndarray | None = None

    @property
    def triangles(self):
        return self.vertices[self.faces]

    @property
    def areas(self):
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    @property
    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _spow(v, e):
    return np.sign(v) * np.abs(v) ** e


def superquadric_point(spec: ShapeSpec, eta, omega):
    """Exact surface points and outward unit normals at parameters (eta, omega)."""
    a, b, c = (e / 2.0 for e in spec.extents)
    e1, e2 = spec.exponents
    th, tw = spec.taper
    eta = np.asarray(eta, dtype=float)
    omega = np.asarray(omega, dtype=float)
    ce, se = np.cos(eta), np.sin(eta)
    co, so = np.cos(omega), np.sin(omega)
    x = a * _spow(ce, e1) * _spow(co, e2)
    y = b * _spow(ce, e1) * _spow(so, e2)
    z = c * _spow(se, e1)
    nx = _spow(ce, 2 - e1) * _spow(co, 2 - e2) / a
    ny = _spow(ce, 2 - e1) * _spow(so, 2 - e2) / b
    nz = _spow(se, 2 - e1) / c
    u = x / a
    sw = 1.0 + tw * u
    sh = 1.0 - th * u
    pts = np.stack([x, y * sw, (z + c) * sh], axis=-1)
    my = ny / sw
    mz = nz / sh
    mx = nx - (y * tw / a) * my + ((z + c) * th / a) * mz
    n = np.stack([mx, my, mz], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return pts, n


def _box_mesh(spec):
    L, W, H = spec.extents
    x0, x1, y0, y1, z0, z1 = -L / 2, L / 2, -W / 2, W / 2, 0.0, H
    v = np.array([[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
                  [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]])
    f = np.array([[0, 2, 1], [0, 3, 2],      # bottom (-z)
                  [4, 5, 6], [4, 6, 7],      # top (+z)
                  [0, 1, 5], [0, 5, 4],      # -y
                  [2, 3, 7], [2, 7, 6],      # +y
                  [1, 2, 6], [1, 6, 5],      # +x
                  [3, 0, 4], [3, 4, 7]])     # -x
    tri = v[f]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    fn /= np.linalg.norm(fn, axis=1, keepdims=True)
    return Mesh(v, f, None, fn)


def _superquadric_mesh(spec, n_eta=24, n_omega=48):
    etas = np.linspace(-np.pi / 2, np.pi / 2, n_eta + 1)[1:-1]
    omegas = np.linspace(-np.pi, np.pi, n_omega, endpoint=False)
    E, O = np.meshgrid(etas, omegas, indexing="ij")
    prm = np.concatenate([[[-np.pi / 2, 0.0]], np.stack([E.ravel(), O.ravel()], axis=1), [[np.pi / 2, 0.0]]])
    pts, nrm = superquadric_point(spec, prm[:, 0], prm[:, 1])
    rows = len(etas)
    top = len(prm) - 1

    def vid(i, j):
        return 1 + i * n_omega + (j % n_omega)

    faces = []
    for j in range(n_omega):
        faces.append([0, vid(0, j + 1), vid(0, j)])
        faces.append([top, vid(rows - 1, j), vid(rows - 1, j + 1)])
    for i in range(rows - 1):
        for j in range(n_omega):
            a, b, c, d = vid(i, j), vid(i, j + 1), vid(i + 1, j + 1), vid(i + 1, j)
            faces.append([a, b, c])
            faces.append([a, c, d])
    faces = np.array(faces)
    tri = pts[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(fn, axis=1, keepdims=True)
    fn = fn / np.where(norm > 0, norm, 1.0)
    # orient faces outward using the analytic normals
    flip = np.einsum("ij,ij->i", fn, nrm[faces].mean(axis=1)) < 0
    faces[flip] = faces[flip][:, ::-1]
    fn[flip] = -fn[flip]
    return Mesh(pts, faces, nrm, fn, prm)


@lru_cache(maxsize=256)
def shape_mesh(spec: ShapeSpec) -> Mesh:
    if spec.family == BOX:
        return _box_mesh(spec)
    return _superquadric_mesh(spec)


def bounding_radius(spec: ShapeSpec):
    lo, hi = shape_mesh(spec).bounds
    center = (lo + hi) / 2
    return float(np.linalg.norm(shape_mesh(spec).vertices - center, axis=1).max())


def bounding_center(spec: ShapeSpec):
    lo, hi = shape_mesh(spec).bounds
    return (lo + hi) / 2


def bounding_diameter(spec: ShapeSpec):
    lo, hi = shape_mesh(spec).bounds
    return float(np.linalg.norm(hi - lo))


# -- ray casting ------------------------------------------------------------------------

def raycast(mesh: Mesh, origins, dirs, chunk=1 << 20):
    """Nearest positive hit of each ray against the mesh (Moller-Trumbore).

    Returns ``(t, face, hit_normals)`` with ``t = inf`` for misses.  ``t`` is in
    units of the (unnormalised) direction vectors.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=float), np.shape(dirs)).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    n = len(dirs)
    t_best = np.full(n, np.inf)
    f_best = np.full(n, -1, dtype=np.int64)
    uv_best = np.zeros((n, 2))
    if n == 0:
        return t_best, f_best, np.zeros((0, 3))
    lo, hi = mesh.bounds
    # slab test against the bounding box to discard rays early
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - 1e-9 - origins) * inv
        t2 = (hi + 1e-9 - origins) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    live = np.flatnonzero((tmax >= np.maximum(tmin, 0.0)))
    if len(live) == 0:
        return t_best, f_best, np.zeros((n, 3))
    tri = mesh.triangles
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    nf = len(tri)
    step = max(1, chunk // nf)
    for s in range(0, len(live), step):
        ids = live[s:s + step]
        o = origins[ids][:, None, :]
        d = dirs[ids][:, None, :]
        p = np.cross(d, e2[None])
        det = np.einsum("rfk,fk->rf", p, e1)
        ok = np.abs(det) > 1e-18
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tv = o - v0[None]
        u = np.einsum("rfk,rfk->rf", tv, p) * inv_det
        q = np.cross(tv, e1[None])
        v = np.einsum("rfk,rfk->rf", d, q) * inv_det
        t = np.einsum("fk,rfk->rf", e2, q) * inv_det
        hit = ok & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1 + 1e-12) & (t > 1e-12)
        t = np.where(hit, t, np.inf)
        j = np.argmin(t, axis=1)
        tj = t[np.arange(len(ids)), j]
        better = tj < t_best[ids]
        sel = ids[better]
        t_best[sel] = tj[better]
        f_best[sel] = j[better]
        uv_best[sel, 0] = u[np.arange(len(ids)), j][better]
        uv_best[sel, 1] = v[np.arange(len(ids)), j][better]
    normals = np.zeros((n, 3))
    hitm = f_best >= 0
    if np.any(hitm):
        fidx = f_best[hitm]
        if mesh.vertex_normals is None:
            normals[hitm] = mesh.face_normals[fidx]
        else:
            vn = mesh.vertex_normals[mesh.faces[fidx]]
            u, v = uv_best[hitm, 0], uv_best[hitm, 1]
            nn = (1 - u - v)[:, None] * vn[:, 0] + u[:, None] * vn[:, 1] + v[:, None] * vn[:, 2]
            normals[hitm] = nn / np.linalg.norm(nn, axis=1, keepdims=True)
    return t_best, f_best, normals


# -- surface sampling -------------------------------------------------------------------

def _allocate(weights, n, rng):
    """Systematic allocation of ``n`` samples proportional to ``weights``."""
    cdf = np.cumsum(weights) / np.sum(weights)
    marks = (rng.uniform() + np.arange(n)) / n
    idx = np.searchsorted(cdf, marks, side="right")
    return np.minimum(idx, len(weights) - 1)


def sample_surface(spec: ShapeSpec, n: int, seed) -> PointCloud:
    """Area-weighted surface samples (object frame) with outward unit normals."""
    if n < 1:
        raise ValueError("sample count must be >= 1")
    rng = np.random.default_rng(seed)
    mesh = shape_mesh(spec)
    tri_idx = _allocate(mesh.areas, n, rng)
    r1 = rng.uniform(size=n)
    r2 = rng.uniform(size=n)
    s = np.sqrt(r1)
    w0, w1, w2 = 1 - s, s * (1 - r2), s * r2
    if spec.family == BOX:
        tri = mesh.triangles[tri_idx]
        pts = w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1] + w2[:, None] * tri[:, 2]
        normals = mesh.face_normals[tri_idx]
    else:
        prm = mesh.params[mesh.faces[tri_idx]]
        # pole vertices carry an arbitrary omega; borrow it from the neighbouring corner
        pole = np.abs(np.abs(prm[:, :, 0]) - np.pi / 2) < 1e-12
        for k in range(3):
            prm[pole[:, k], k, 1] = prm[pole[:, k], (k + 1) % 3, 1]
        om = prm[:, :, 1]
        # unwrap omega across the -pi/pi seam
        om = np.where(om - om[:, :1] > np.pi, om - 2 * np.pi, om)
        om = np.where(om - om[:, :1] < -np.pi, om + 2 * np.pi, om)
        eta = w0 * prm[:, 0, 0] + w1 * prm[:, 1, 0] + w2 * prm[:, 2, 0]
        omega = w0 * om[:, 0] + w1 * om[:, 1] + w2 * om[:, 2]
        pts, normals = superquadric_point(spec, eta, omega)
    return PointCloud(pts, normals, Frame.OBJECT)


@lru_cache(maxsize=256)
def dense_samples(spec: ShapeSpec, spacing=0.0015, max_points=20000):
    """Deterministic dense surface sample used by the grasp evaluator."""
    area = float(shape_mesh(spec).areas.sum())
    n = int(np.clip(area / spacing ** 2, 3000, max_points))
    return sample_surface(spec, n, seed=12345)


def random_shape(family, rng, shape_id):
    """Draw a desk-scale shape: pantry-style boxes or shoe-like superquadrics."""
    if family == BOX:
        while True:
            narrow = rng.uniform(0.035, 0.065)
            wide = rng.uniform(0.06, 0.18)
            if wide - narrow >= 0.012:
                break
        height = rng.uniform(0.05, 0.18)
        dims = (wide, narrow, height) if rng.uniform() < 0.5 else (narrow, wide, height)
        return ShapeSpec(BOX, dims, id=shape_id)
    length = rng.uniform(0.20, 0.27)
    width = rng.uniform(0.088, 0.1)
    height = rng.uniform(0.065, 0.085)
    e1 = rng.uniform(0.3, 0.5)
    e2 = rng.uniform(0.5, 0.8)
    th = rng.uniform(0.25, 0.4)
    tw = rng.uniform(0.45, 0.6)
    return ShapeSpec(SUPERQUADRIC, (length, width, height), (e1, e2), (th, tw), id=shape_id)


def raycast_pinhole(mesh: Mesh, pose_rotation, pose_translation, intrinsics, height, width):
    """Depth of the nearest mesh hit for every pixel ray of a pinhole camera.

    The mesh is placed in the camera frame by ``(pose_rotation, pose_translation)``.
    Each triangle is intersected only with the pixel rays inside its projected
    bounding box, which gives exactly the ray-cast answer at a fraction of the cost.
    Returns an ``(height, width)`` array of camera-z depths (``inf`` for misses).
    """
    fx, fy, cx, cy = intrinsics
    V = mesh.vertices @ np.asarray(pose_rotation).T + np.asarray(pose_translation)
    tri = V[mesh.faces]
    depth = np.full(height * width, np.inf)
    z = tri[:, :, 2]
    front = np.all(z > 1e-6, axis=1)
    straddle = ~front & np.any(z > 1e-6, axis=1)
    tf = tri[front]
    u = fx * tf[:, :, 0] / tf[:, :, 2] + cx
    v = fy * tf[:, :, 1] / tf[:, :, 2] + cy
    u0 = np.clip(np.floor(u.min(axis=1)), 0, width).astype(np.int64)
    u1 = np.clip(np.ceil(u.max(axis=1)), -1, width - 1).astype(np.int64)
    v0 = np.clip(np.floor(v.min(axis=1)), 0, height).astype(np.int64)
    v1 = np.clip(np.ceil(v.max(axis=1)), -1, height - 1).astype(np.int64)
    nu = np.maximum(u1 - u0 + 1, 0)
    nv = np.maximum(v1 - v0 + 1, 0)
    counts = nu * nv
    tris = [tf]
    ids = [np.repeat(np.arange(len(tf)), counts)]
    if len(ids[0]):
        start = np.repeat(np.cumsum(counts) - counts, counts)
        local = np.arange(len(ids[0])) - start
        tt = ids[0]
        pu = u0[tt] + local % nu[tt]
        pv = v0[tt] + local // nu[tt]
        pix = [pv * width + pu]
    else:
        pix = [np.zeros(0, dtype=np.int64)]
    if np.any(straddle):
        ts = tri[straddle]
        tris.append(ts)
        allpix = np.arange(height * width)
        ids.append(np.repeat(np.arange(len(ts)), height * width) + len(tf))
        pix.append(np.tile(allpix, len(ts)))
    T = np.concatenate(tris)
    fid = np.concatenate(ids)
    pix = np.concatenate(pix)
    if len(pix) == 0:
        return depth.reshape(height, width)
    pu = (pix % width).astype(float)
    pv = (pix // width).astype(float)
    d = np.stack([(pu - cx) / fx, (pv - cy) / fy, np.ones_like(pu)], axis=1)
    t0 = T[fid, 0]
    e1 = T[fid, 1] - t0
    e2 = T[fid, 2] - t0
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", p, e1)
    ok = np.abs(det) > 1e-18
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = -t0
    uu = np.einsum("ij,ij->i", tv, p) * inv_det
    q = np.cross(tv, e1)
    vv = np.einsum("ij,ij->i", d, q) * inv_det
    t = np.einsum("ij,ij->i", e2, q) * inv_det
    hit = ok & (uu >= -1e-12) & (vv >= -1e-12) & (uu + vv <= 1 + 1e-12) & (t > 1e-9)
    np.minimum.at(depth, pix[hit], t[hit])
    return depth.reshape(height, width)
