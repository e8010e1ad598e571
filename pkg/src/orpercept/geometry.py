"""Rigid transforms, the depth-camera model, and pixel/point conversions.

All types are immutable after construction and all operations are pure, so
everything here is safe to share across threads or processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RigidTransform",
    "CameraIntrinsics",
    "DepthImage",
    "IntensityImage",
    "PointCloud",
    "identity",
    "compose",
    "invert",
    "transform_points",
    "rotation_about_axis",
    "rotation_angle",
    "rotation_axis",
    "nearest_rotation",
    "project_point",
    "project_points",
    "unproject_pixel",
    "unproject_pixels",
    "depth_to_cloud",
]

# Rotation matrices with orthonormality error above this are rejected rather
# than silently repaired.
_MAX_REPAIRABLE_ROTATION_ERROR = 1e-6
_BEHIND_CAMERA_EPS = 1e-9


def nearest_rotation(m):
    """Project a 3x3 matrix onto SO(3) (polar decomposition, det +1)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: ``p_out = rotation @ p_in + translation``.

    The constructor re-orthonormalizes rotations whose deviation from SO(3)
    is below 1e-6 (Frobenius) and rejects anything worse.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite entries in transform")
        err = np.linalg.norm(r.T @ r - np.eye(3))
        if err > _MAX_REPAIRABLE_ROTATION_ERROR or np.linalg.det(r) < 0:
            raise ValueError(f"matrix is not a rotation (orthonormality error {err:.3g})")
        if err > 0:
            r = nearest_rotation(r)
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))

    def apply(self, points):
        """Transform an (N, 3) array (or a single 3-vector) of points."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def matrix(self):
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])


def identity() -> RigidTransform:
    return RigidTransform(np.eye(3), np.zeros(3))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composite transform applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def transform_points(t: RigidTransform, points):
    return t.apply(points)


def rotation_about_axis(axis, angle: float):
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("zero rotation axis")
    k = axis / n
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def rotation_angle(r) -> float:
    """Rotation angle in [0, pi] of a rotation matrix."""
    c = (np.trace(np.asarray(r)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_axis(r):
    """Unit rotation axis of a rotation matrix (arbitrary for angle 0)."""
    r = np.asarray(r, dtype=np.float64)
    w, v = np.linalg.eigh((r + r.T) / 2.0)
    axis = v[:, np.argmax(w)]
    # eigh gives the +1 eigenvector up to sign; orient by the skew part
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if skew @ axis < 0:
        axis = -axis
    return axis / np.linalg.norm(axis)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model with Brown-Conrady distortion (3 radial + 2 tangential)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 352
    height: int = 287
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def has_distortion(self) -> bool:
        return any(c != 0.0 for c in (self.k1, self.k2, self.k3, self.p1, self.p2))

    def distortion(self):
        return np.array([self.k1, self.k2, self.k3, self.p1, self.p2])


def _distort(x, y, k: CameraIntrinsics):
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k.k1 + r2 * (k.k2 + r2 * k.k3))
    xd = x * radial + 2.0 * k.p1 * x * y + k.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + k.p1 * (r2 + 2.0 * y * y) + 2.0 * k.p2 * x * y
    return xd, yd


def _undistort(xd, yd, k: CameraIntrinsics, max_iter=20, tol_px=1e-10):
    """Invert the distortion by fixed-point iteration on normalized coords."""
    if not k.has_distortion:
        return xd, yd
    tol = tol_px / max(k.fx, k.fy)
    x, y = np.array(xd, dtype=np.float64, copy=True), np.array(yd, dtype=np.float64, copy=True)
    for _ in range(max_iter):
        dx, dy = _distort(x, y, k)
        nx = x + (xd - dx)
        ny = y + (yd - dy)
        step = np.max(np.abs(nx - x)) + np.max(np.abs(ny - y))
        x, y = nx, ny
        if step < tol:
            break
    return x, y


def project_points(points, k: CameraIntrinsics):
    """Project (N, 3) camera-frame points.

    Returns (uv, depth, in_front): pixel coordinates (N, 2), the z depth (N,)
    and a bool mask; uv rows for points behind the camera are NaN.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    in_front = z > _BEHIND_CAMERA_EPS
    safe_z = np.where(in_front, z, 1.0)
    x = p[:, 0] / safe_z
    y = p[:, 1] / safe_z
    xd, yd = _distort(x, y, k)
    uv = np.stack([k.fx * xd + k.cx, k.fy * yd + k.cy], axis=1)
    uv[~in_front] = np.nan
    return uv, z, in_front


def project_point(p, k: CameraIntrinsics):
    """Project one camera-frame point; None when at or behind the camera."""
    uv, z, ok = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), k)
    if not ok[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def unproject_pixels(uv, depth, k: CameraIntrinsics):
    """Back-project pixels at the given z depths to (N, 3) camera-frame points."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    xd = (uv[:, 0] - k.cx) / k.fx
    yd = (uv[:, 1] - k.cy) / k.fy
    x, y = _undistort(xd, yd, k)
    return np.stack([x * d, y * d, d], axis=1)


def unproject_pixel(u: float, v: float, depth: float, k: CameraIntrinsics):
    return unproject_pixels(np.array([[u, v]]), np.array([depth]), k)[0]


@dataclass(frozen=True)
class DepthImage:
    """Per-pixel z depth in meters; invalid pixels carry no information."""

    values: np.ndarray
    validity: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("depth values must be HxW")
        ok = np.isfinite(v) & (v > 0)
        if self.validity is not None:
            mask = np.asarray(self.validity, dtype=bool)
            if mask.shape != v.shape:
                raise ValueError("validity shape mismatch")
            ok &= mask
        object.__setattr__(self, "values", _freeze(v))
        object.__setattr__(self, "validity", _freeze(ok))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class IntensityImage:
    """IR amplitude image, arbitrary non-negative units."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("intensity values must be HxW")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("intensity must be finite and non-negative")
        object.__setattr__(self, "values", _freeze(v))


@dataclass(frozen=True)
class PointCloud:
    """N points with optional per-point label / intensity payload."""

    points: np.ndarray
    labels: np.ndarray | None = None
    intensity: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite point coordinates")
        object.__setattr__(self, "points", _freeze(p))
        for name in ("labels", "intensity"):
            a = getattr(self, name)
            if a is not None:
                a = np.asarray(a)
                if a.shape != (len(p),):
                    raise ValueError(f"{name} must have one entry per point")
                object.__setattr__(self, name, _freeze(a))

    def __len__(self):
        return len(self.points)

    def transformed(self, t: RigidTransform) -> "PointCloud":
        return PointCloud(t.apply(self.points), self.labels, self.intensity)


def depth_to_cloud(d: DepthImage, k: CameraIntrinsics, labels=None, intensity=None) -> PointCloud:
    """Convert every valid depth pixel to a 3D point in the camera frame.

    ``labels``/``intensity`` are optional HxW arrays sampled at the same
    valid pixels and attached as the point payload.
    """
    h, w = d.shape
    vv, uu = np.nonzero(d.validity)
    if len(vv) == 0:
        return PointCloud(np.zeros((0, 3)))
    uv = np.stack([uu.astype(np.float64), vv.astype(np.float64)], axis=1)
    pts = unproject_pixels(uv, d.values[vv, uu], k)
    lab = None if labels is None else np.asarray(labels)[vv, uu]
    inten = None if intensity is None else np.asarray(intensity)[vv, uu]
    return PointCloud(pts, lab, inten)
