"""Background reprojection: lift pixels with depth, move them rigidly, project
into the target camera and keep the nearest point per pixel.

Pixel coordinates are ``(u, v)`` = (column, row). Target pixels are rounded to
the nearest integer with halves rounded up. When two points land on the same
pixel at exactly the same depth the one that arrived first wins; points are
visited in row-major source order, frames in ascending time.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    k: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.k, dtype=np.float64)
        if k.shape != (3, 3):
            raise GeometryError(f"intrinsics must be 3x3, got {k.shape}")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")
        if abs(np.linalg.det(k)) < 1e-12:
            raise GeometryError("intrinsics matrix is singular")
        object.__setattr__(self, "k", k)

    @classmethod
    def from_focal(cls, fx, fy, cx, cy):
        return cls(np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]))

    @property
    def inv(self):
        return np.linalg.inv(self.k)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise GeometryError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw, translation):
        """Rotation about the camera's vertical (y) axis."""
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]), translation)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, pts):
        return pts @ self.rotation.T + self.translation

    def compose(self, first: "RigidTransform"):
        """``self o first``: apply ``first`` then ``self``."""
        return RigidTransform(self.rotation @ first.rotation,
                              self.rotation @ first.translation + self.translation)

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass
class ProjStats:
    behind: int = 0
    off_frame: int = 0
    kept: int = 0


@dataclass
class Projected:
    """Reprojected points: integer target pixels plus their depth and label."""

    rows: np.ndarray
    cols: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    xyz: np.ndarray = field(repr=False)
    stats: ProjStats = field(default_factory=ProjStats)


def round_half_up(x):
    return np.floor(np.asarray(x) + 0.5).astype(int)


def backproject(pixels_uv, depths, K: CameraIntrinsics):
    """Camera-frame 3D points for ``(u, v)`` pixels at the given depths."""
    uv1 = np.column_stack([np.asarray(pixels_uv, dtype=np.float64), np.ones(len(depths))])
    return (uv1 @ K.inv.T) * np.asarray(depths, dtype=np.float64)[:, None]


def project_points(xyz, K: CameraIntrinsics):
    """Continuous ``(u, v)`` for camera-frame points (``z`` must be positive)."""
    uvw = (xyz / xyz[:, 2:3]) @ K.k.T
    return uvw[:, :2]


def proj(pixels_uv, depths, K: CameraIntrinsics, H: RigidTransform, labels=None, frame_hw=None):
    """Back-project, transform by ``H`` and reproject into the target frame.

    Points with ``z <= 0`` or outside ``frame_hw`` are dropped and counted.
    """
    pixels_uv = np.asarray(pixels_uv, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    if np.any(depths <= 0):
        raise GeometryError("proj needs positive depth at every listed pixel")
    labels = np.zeros(len(depths), dtype=int) if labels is None else np.asarray(labels).reshape(-1)
    xyz = H.apply(backproject(pixels_uv, depths, K))
    stats = ProjStats()
    front = xyz[:, 2] > 0
    stats.behind = int((~front).sum())
    xyz_f, lab = xyz[front], labels[front]
    uv = project_points(xyz_f, K) if len(xyz_f) else np.zeros((0, 2))
    cols, rows = round_half_up(uv[:, 0]), round_half_up(uv[:, 1])
    inside = np.ones(len(rows), dtype=bool)
    if frame_hw is not None:
        h, w = frame_hw
        inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    stats.off_frame = int((~inside).sum())
    stats.kept = int(inside.sum())
    return Projected(rows[inside], cols[inside], xyz_f[inside, 2], lab[inside], xyz_f[inside], stats)


def zbuffer_scatter(rows, cols, depth, labels, frame_hw, fill_label=-1):
    """Keep the minimum depth (and its label) per target pixel.

    Returns ``(labels, depth, valid)`` maps; equal depths keep the earliest point.
    """
    h, w = frame_hw
    out_d = np.full((h, w), np.inf)
    out_l = np.full((h, w), fill_label, dtype=int)
    rows, cols = np.asarray(rows, int), np.asarray(cols, int)
    depth, labels = np.asarray(depth, float), np.asarray(labels, int)
    if len(depth):
        # stable sort by (pixel, depth) keeps arrival order among exact ties
        flat = rows * w + cols
        order = np.lexsort((np.arange(len(depth)), depth, flat))
        flat_s = flat[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = flat_s[1:] != flat_s[:-1]
        win = order[first]
        out_d[rows[win], cols[win]] = depth[win]
        out_l[rows[win], cols[win]] = labels[win]
    valid = np.isfinite(out_d)
    out_d[~valid] = 0.0
    return out_l, out_d, valid


@dataclass
class Reprojected:
    labels: np.ndarray      # (T, H, W), -1 where empty
    depth: np.ndarray       # (T, H, W), 0 where empty
    valid: np.ndarray       # (T, H, W) bool
    Q: np.ndarray           # (H, W) union of validity over frames
    merged_labels: np.ndarray
    merged_depth: np.ndarray
    stats: list


def build_reprojected_maps(semantics, depths, background, K: CameraIntrinsics, poses):
    """Reproject every input frame's background pixels into the target frame.

    ``semantics``/``depths``/``background`` are ``(T, H, W)`` stacks and
    ``poses[t]`` maps frame ``t`` camera coordinates to the target camera.
    The merged maps z-buffer all frames together (earlier frames first).
    """
    semantics = np.asarray(semantics)
    depths = np.asarray(depths, dtype=np.float64)
    background = np.asarray(background, dtype=bool)
    T, h, w = semantics.shape
    labels = np.full((T, h, w), -1, dtype=int)
    dep = np.zeros((T, h, w))
    valid = np.zeros((T, h, w), dtype=bool)
    all_pts = []
    stats = []
    for t in range(T):
        pick = background[t] & (depths[t] > 0)
        rr, cc = np.nonzero(pick)
        uv = np.column_stack([cc, rr])
        pr = proj(uv, depths[t][pick], K, poses[t], semantics[t][pick], (h, w))
        labels[t], dep[t], valid[t] = zbuffer_scatter(pr.rows, pr.cols, pr.depth, pr.labels, (h, w))
        all_pts.append(pr)
        stats.append(pr.stats)
    cat = lambda key: np.concatenate([getattr(p, key) for p in all_pts]) if all_pts else np.zeros(0)  # noqa: E731
    ml, md, mv = zbuffer_scatter(cat("rows"), cat("cols"), cat("depth"), cat("labels"), (h, w))
    return Reprojected(labels, dep, valid, valid.any(axis=0), ml, md, stats)
