"""Point clouds, exact nearest-neighbour queries, Chamfer distance, PCA and table cropping."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ChecksumError, DegenerateCloud, EmptyCloud
from .geometry import Frame, Pose

NORMAL_TOL = 1e-6


@dataclass(frozen=True)
class Plane:
    """Oriented plane ``{x : normal . x = offset}``; the normal points to the kept side."""

    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "normal", tuple(float(v) for v in n))
        object.__setattr__(self, "offset", float(self.offset))

    def signed_distance(self, points):
        return np.asarray(points, dtype=float) @ np.asarray(self.normal) - self.offset

    def transformed(self, pose: Pose):
        n = pose.rotation @ np.asarray(self.normal)
        p0 = pose.apply(np.asarray(self.normal) * self.offset)
        return Plane(tuple(n), float(n @ p0))


class PointCloud:
    """Immutable ordered point set with optional unit normals."""

    __slots__ = ("points", "normals", "frame", "_index")

    def __init__(self, points, normals=None, frame=Frame.OBJECT):
        pts = np.array(points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        if normals is not None:
            nrm = np.array(normals, dtype=float).reshape(-1, 3)
            if nrm.shape != pts.shape:
                raise ValueError("normals must parallel points")
            if len(nrm) and np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max() > NORMAL_TOL:
                raise ValueError("normals must be unit length")
            nrm.setflags(write=False)
        else:
            nrm = None
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "frame", Frame(frame))
        object.__setattr__(self, "_index", None)

    def __setattr__(self, name, value):
        raise AttributeError("PointCloud is immutable")

    def __reduce__(self):
        return (PointCloud, (np.array(self.points), None if self.normals is None else np.array(self.normals),
                             self.frame))

    def __len__(self):
        return len(self.points)

    def __repr__(self):
        kind = "xyzn" if self.normals is not None else "xyz"
        return f"PointCloud({kind}, n={len(self)}, frame={self.frame.value})"

    @property
    def index(self) -> "NnIndex":
        if self._index is None:
            object.__setattr__(self, "_index", NnIndex(self))
        return self._index

    def transformed(self, pose: Pose) -> "PointCloud":
        if pose.from_frame != self.frame:
            from .errors import FrameMismatch
            raise FrameMismatch(f"cloud is in {self.frame.value}, pose maps from {pose.from_frame.value}")
        normals = None if self.normals is None else pose.apply_dirs(self.normals)
        return PointCloud(pose.apply(self.points), normals, pose.to_frame)

    def select(self, mask_or_idx) -> "PointCloud":
        normals = None if self.normals is None else self.normals[mask_or_idx]
        return PointCloud(self.points[mask_or_idx], normals, self.frame)

    def centroid(self):
        if len(self) == 0:
            raise EmptyCloud("centroid of an empty cloud")
        return self.points.mean(axis=0)


class NnIndex:
    """k-d tree over a cloud snapshot; answers match exhaustive search exactly.

    Squared distances are recomputed from the stored coordinates and ties are
    broken by the lowest ordinal, so results equal a brute-force scan.
    """

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise EmptyCloud("cannot index an empty cloud")
        self.cloud = cloud
        self.points = cloud.points
        self._tree = cKDTree(self.points, balanced_tree=True)

    def query(self, queries):
        """Batched query: returns ``(squared distances, ordinals)``."""
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        n = len(self.points)
        k = min(4, n)
        _, idx = self._tree.query(q, k=k)
        idx = idx.reshape(len(q), k)
        diff = self.points[idx] - q[:, None, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        best = np.empty(len(q), dtype=np.int64)
        best_d2 = np.empty(len(q))
        # lexicographic (d2, ordinal) minimum per row
        dmin = d2.min(axis=1)
        cand = np.where(d2 == dmin[:, None], idx, n)
        best[:] = cand.min(axis=1)
        best_d2[:] = dmin
        if k < n:
            # all k candidates tied: more equidistant points may exist beyond k
            tied = np.all(d2 == dmin[:, None], axis=1)
            for i in np.flatnonzero(tied):
                r = np.sqrt(dmin[i]) * (1 + 1e-9) + 1e-15
                near = np.asarray(self._tree.query_ball_point(q[i], r), dtype=np.int64)
                dd = np.sum((self.points[near] - q[i]) ** 2, axis=1)
                near = near[dd == dd.min()]
                best[i] = near.min()
                best_d2[i] = dd.min()
        return best_d2, best


def nearest_point(index: NnIndex, q):
    """Globally nearest point to ``q``: ``(point, squared distance, ordinal)``."""
    d2, i = index.query(np.asarray(q, dtype=float).reshape(1, 3))
    j = int(i[0])
    return index.points[j].copy(), float(d2[0]), j


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric Chamfer distance: mean squared NN distance a->b plus b->a."""
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("chamfer needs two nonempty clouds")
    d_ab, _ = b.index.query(a.points)
    d_ba, _ = a.index.query(b.points)
    return float(d_ab.mean() + d_ba.mean())


def principal_axes(c: PointCloud):
    """Centroid, principal axes (as columns, right-handed) and descending variances.

    The first axis is oriented to have a nonnegative +x component (ties resolved
    toward +y); the second likewise toward +y (ties toward +z).
    """
    pts = c.points
    if len(pts) < 3:
        raise DegenerateCloud("principal axes need at least 3 points")
    centroid = pts.mean(axis=0)
    d = pts - centroid
    cov = d.T @ d / len(pts)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    if w[1] <= 1e-12 * max(w[0], 1e-300):
        raise DegenerateCloud("points are collinear")
    for j, (primary, fallback) in enumerate(((0, 1), (1, 2))):
        axis = v[:, j]
        s = axis[primary] if abs(axis[primary]) > 1e-12 else axis[fallback]
        if s < 0:
            v[:, j] = -axis
    v[:, 2] = np.cross(v[:, 0], v[:, 1])
    return centroid, v, np.maximum(w, 0.0)


def crop_below_plane(c: PointCloud, plane: Plane, epsilon=0.002) -> PointCloud:
    """Keep points whose signed distance to ``plane`` exceeds ``epsilon``."""
    keep = plane.signed_distance(c.points) > epsilon
    return c.select(keep)


def subsample(c: PointCloud, n: int, seed) -> PointCloud:
    if n < 1:
        raise ValueError("subsample size must be >= 1")
    if len(c) == 0:
        raise EmptyCloud("cannot subsample an empty cloud")
    rng = np.random.default_rng(seed)
    if n <= len(c):
        idx = rng.choice(len(c), size=n, replace=False)
    else:
        idx = rng.integers(0, len(c), size=n)
    return c.select(idx)


# -- file formats -----------------------------------------------------------------
#
# ASCII: header "xyz <count> <frame>" or "xyzn <count> <frame>", then one point per
# line ("x y z" or "x y z nx ny nz"), values written with repr() precision.
#
# Binary (little-endian):
#   magic  b"PCB1"
#   u8     has_normals (0/1)
#   u8     frame tag length L, then L bytes of ASCII frame tag
#   u64    count
#   f64    count*3 coordinates (x,y,z per point), then count*3 normals if present
#   u32    CRC-32 of every preceding byte

BINARY_MAGIC = b"PCB1"


def cloud_to_ascii(c: PointCloud) -> str:
    kind = "xyzn" if c.normals is not None else "xyz"
    data = c.points if c.normals is None else np.hstack([c.points, c.normals])
    lines = [f"{kind} {len(c)} {c.frame.value}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in data)
    return "\n".join(lines) + "\n"


def cloud_from_ascii(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty cloud file")
    kind, count, frame = lines[0].split()
    count = int(count)
    if kind not in ("xyz", "xyzn"):
        raise ValueError(f"unknown cloud header {kind!r}")
    cols = 6 if kind == "xyzn" else 3
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise ValueError(f"header declares {count} points, found {len(body)}")
    data = np.array([[float(v) for v in ln.split()] for ln in body], dtype=float).reshape(count, cols)
    normals = data[:, 3:] if cols == 6 else None
    return PointCloud(data[:, :3], normals, Frame(frame))


def cloud_to_bytes(c: PointCloud) -> bytes:
    tag = c.frame.value.encode("ascii")
    head = BINARY_MAGIC + struct.pack("<BB", int(c.normals is not None), len(tag)) + tag
    head += struct.pack("<Q", len(c))
    body = c.points.astype("<f8").tobytes()
    if c.normals is not None:
        body += c.normals.astype("<f8").tobytes()
    blob = head + body
    return blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)


def cloud_from_bytes(blob: bytes) -> PointCloud:
    if blob[:4] != BINARY_MAGIC:
        raise ValueError("not a binary point cloud")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("binary cloud checksum mismatch")
    has_normals, tag_len = struct.unpack_from("<BB", blob, 4)
    tag = blob[6:6 + tag_len].decode("ascii")
    (count,) = struct.unpack_from("<Q", blob, 6 + tag_len)
    off = 14 + tag_len
    pts = np.frombuffer(blob, dtype="<f8", count=count * 3, offset=off).reshape(count, 3)
    normals = None
    if has_normals:
        normals = np.frombuffer(blob, dtype="<f8", count=count * 3, offset=off + count * 24).reshape(count, 3)
    return PointCloud(pts, normals, Frame(tag))


def save_cloud(c: PointCloud, path) -> None:
    """Write ``.pcb`` files in the binary form, anything else as ASCII."""
    path = Path(path)
    if path.suffix == ".pcb":
        path.write_bytes(cloud_to_bytes(c))
    else:
        path.write_text(cloud_to_ascii(c))


def load_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix == ".pcb":
        return cloud_from_bytes(path.read_bytes())
    return cloud_from_ascii(path.read_text())
