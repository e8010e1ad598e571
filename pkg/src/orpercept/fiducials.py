"""Locating the four-sphere calibration fixture in a point cloud.

The fixture carries four spheres at mutually distinct pairwise distances, so
cluster-to-sphere correspondence can be established from geometry alone (the
depth sensor has no color channel to identify spheres by).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, RigidTransform, compose, invert

__all__ = [
    "DegenerateGeometryError",
    "FixtureDetectionError",
    "AmbiguousCorrespondenceError",
    "SphereFitResult",
    "FiducialPattern",
    "FixtureObservation",
    "fit_sphere",
    "build_fixture_frame",
    "euclidean_clusters",
    "detect_fixture",
    "default_pattern",
]

_MIN_SPHERE_POINTS = 10
_COPLANARITY_VOLUME = 1e-6  # m^3
_DISTANCE_SEPARATION = 0.02  # m, makes distance-based correspondence well posed
_AMBIGUITY_MARGIN = 0.005  # m


class DegenerateGeometryError(ValueError):
    """Input geometry does not determine a solution (coplanar, collinear...)."""


class FixtureDetectionError(RuntimeError):
    """The fixture could not be located in the cloud."""


class AmbiguousCorrespondenceError(FixtureDetectionError):
    """Two sphere-to-pattern assignments explain the data almost equally well."""


@dataclass(frozen=True)
class SphereFitResult:
    center: np.ndarray
    radius: float
    rms_residual: float
    inlier_count: int

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if self.radius <= 0:
            raise ValueError("fitted radius must be positive")
        if self.rms_residual < 0:
            raise ValueError("negative residual")


@dataclass(frozen=True)
class FiducialPattern:
    """Sphere centers in the fixture's own frame plus the physical sphere radius.

    Centers must be non-coplanar and all six pairwise distances mutually
    distinct by more than 2 cm.
    """

    centers: np.ndarray
    sphere_radius: float = 0.10

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(4, 3)
        vol = abs(np.linalg.det(c[1:] - c[0])) / 6.0
        if vol <= _COPLANARITY_VOLUME:
            raise DegenerateGeometryError(f"pattern centers are (near) coplanar, volume {vol:.2e} m^3")
        d = self.pairwise_distances_of(c)
        gaps = np.abs(d[:, None] - d[None, :])[np.triu_indices(6, 1)]
        if np.min(gaps) <= _DISTANCE_SEPARATION:
            raise ValueError("pairwise distances must differ by more than 2 cm")
        if self.sphere_radius <= 0:
            raise ValueError("sphere radius must be positive")
        c = np.ascontiguousarray(c)
        c.flags.writeable = False
        object.__setattr__(self, "centers", c)

    @staticmethod
    def pairwise_distances_of(centers):
        c = np.asarray(centers, dtype=np.float64).reshape(4, 3)
        return np.array([np.linalg.norm(c[i] - c[j]) for i, j in itertools.combinations(range(4), 2)])

    @property
    def pairwise_distances(self):
        return self.pairwise_distances_of(self.centers)


@dataclass(frozen=True)
class FixtureObservation:
    """Fixture frame as seen by one camera.

    ``frame`` maps fixture-local coordinates into camera coordinates, i.e.
    ``frame.apply(pattern.centers[i])`` reproduces the observed centers.
    """

    frame: RigidTransform
    sphere_fits: tuple

    @property
    def centers(self):
        return np.stack([f.center for f in self.sphere_fits])


def default_pattern() -> FiducialPattern:
    """Fixture used by the synthetic rig; canonical pose, 20 cm spheres."""
    return FiducialPattern(
        centers=np.array(
            [
                [0.0, 0.0, 0.0],
                [0.615, 0.0, 0.0],
                [0.265, 0.31, 0.0],
                [0.39, 0.43, 0.52],
            ]
        ),
        sphere_radius=0.10,
    )


def fit_sphere(points, fixed_radius: float | None = None) -> SphereFitResult:
    """Fit a sphere to 3D points.

    Algebraic linear least squares seeds a Gauss-Newton refinement of the
    geometric residual ``|p - c| - r``; the refinement never increases the
    RMS residual (steps are halved until they improve).

    Args:
        points: (N, 3) array or PointCloud, N >= 10.
        fixed_radius: when given, only the center is optimized.

    Raises:
        DegenerateGeometryError: coplanar/collinear points.
        ValueError: fewer than 10 points.
    """
    p = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    p = p.reshape(-1, 3)
    n = len(p)
    if n < _MIN_SPHERE_POINTS:
        raise ValueError(f"need at least {_MIN_SPHERE_POINTS} points, got {n}")

    # algebraic: |p|^2 = 2 c.p + (r^2 - |c|^2), linear in (c, k)
    a = np.hstack([2.0 * p, np.ones((n, 1))])
    b = np.sum(p * p, axis=1)
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[-1] < 1e-9 * max(sv[0], 1.0):
        raise DegenerateGeometryError("points are coplanar or otherwise degenerate for a sphere fit")
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    center = sol[:3]
    r2 = sol[3] + center @ center
    radius = float(np.sqrt(max(r2, 1e-12))) if fixed_radius is None else float(fixed_radius)

    def rms(c, r):
        return float(np.sqrt(np.mean((np.linalg.norm(p - c, axis=1) - r) ** 2)))

    best = rms(center, radius)
    for _ in range(50):
        diff = p - center
        dist = np.linalg.norm(diff, axis=1)
        dist = np.maximum(dist, 1e-12)
        res = dist - radius
        j_center = -diff / dist[:, None]
        if fixed_radius is None:
            jac = np.hstack([j_center, -np.ones((n, 1))])
        else:
            jac = j_center
        step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        scale = 1.0
        improved = False
        for _ in range(12):
            c_try = center + scale * step[:3]
            r_try = radius + scale * step[3] if fixed_radius is None else radius
            val = rms(c_try, max(r_try, 1e-9))
            if val <= best:
                center, radius, best = c_try, max(r_try, 1e-9), val
                improved = True
                break
            scale *= 0.5
        if not improved or np.linalg.norm(step) * scale < 1e-10:
            break

    return SphereFitResult(center=center, radius=radius, rms_residual=best, inlier_count=n)


def build_fixture_frame(centers) -> RigidTransform:
    """Deterministic frame from four sphere centers given in camera coordinates.

    Origin at the first center, x-axis toward the second, z-axis along
    ``(c2-c1) x (c3-c1)``. The result maps fixture-local coordinates into the
    camera frame; applying it to canonical pattern centers reproduces the
    observed ones.
    """
    c = np.asarray(centers, dtype=np.float64).reshape(4, 3)
    vol = abs(np.linalg.det(c[1:] - c[0])) / 6.0
    if vol <= _COPLANARITY_VOLUME:
        raise DegenerateGeometryError(f"centers are (near) coplanar, volume {vol:.2e} m^3")
    x = c[1] - c[0]
    x = x / np.linalg.norm(x)
    z = np.cross(c[1] - c[0], c[2] - c[0])
    z = z / np.linalg.norm(z)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), c[0])


def euclidean_clusters(points, radius: float):
    """Connected components of points under a Euclidean linkage radius.

    Implemented as connectivity of occupied voxels at the linkage scale
    (26-neighborhood), which matches single-linkage clustering whenever
    clusters are separated by clearly more than the radius.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        return []
    keys = np.floor(p / radius).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    index = {tuple(k): i for i, k in enumerate(uniq)}

    parent = list(range(len(uniq)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    offsets = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    for i, k in enumerate(uniq):
        for o in offsets:
            j = index.get((k[0] + o[0], k[1] + o[1], k[2] + o[2]))
            if j is not None:
                union(i, j)

    roots = np.array([find(i) for i in range(len(uniq))])
    comp_of_point = roots[inverse]
    clusters = []
    for root in np.unique(comp_of_point):
        clusters.append(np.nonzero(comp_of_point == root)[0])
    clusters.sort(key=lambda idx: (-len(idx), idx[0]))
    return clusters


def detect_fixture(
    cloud: PointCloud,
    pattern: FiducialPattern,
    *,
    linkage_radius: float = 0.05,
    radius_tolerance: float = 0.20,
    residual_threshold: float = 0.02,
    min_cluster_points: int = _MIN_SPHERE_POINTS,
) -> FixtureObservation:
    """Find the fixture in a camera point cloud.

    Points are clustered, each cluster is sphere-fit, candidates are gated on
    radius (within ``radius_tolerance`` of the pattern sphere) and residual,
    and the cluster-to-sphere correspondence is the minimum-cost assignment
    of the six observed pairwise center distances to the pattern's.

    Raises:
        FixtureDetectionError: fewer than four sphere candidates.
        AmbiguousCorrespondenceError: two assignments within 5 mm total cost.
    """
    candidates = []
    for idx in euclidean_clusters(cloud.points, linkage_radius):
        if len(idx) < min_cluster_points:
            continue
        try:
            fit = fit_sphere(cloud.points[idx])
        except (DegenerateGeometryError, ValueError):
            continue
        if abs(fit.radius - pattern.sphere_radius) > radius_tolerance * pattern.sphere_radius:
            continue
        if fit.rms_residual > residual_threshold:
            continue
        candidates.append(fit)

    if len(candidates) < 4:
        raise FixtureDetectionError(
            f"found {len(candidates)} sphere candidates, need 4 (one sphere may be occluded)"
        )

    pat_d = pattern.pairwise_distances
    pair_idx = list(itertools.combinations(range(4), 2))

    best = None
    second = None
    for subset in itertools.combinations(range(len(candidates)), 4):
        centers = np.stack([candidates[i].center for i in subset])
        for perm in itertools.permutations(range(4)):
            ordered = centers[list(perm)]
            obs_d = np.array([np.linalg.norm(ordered[i] - ordered[j]) for i, j in pair_idx])
            cost = float(np.sum(np.abs(obs_d - pat_d)))
            entry = (cost, subset, perm)
            if best is None or cost < best[0]:
                second = best
                best = entry
            elif second is None or cost < second[0]:
                second = entry

    if second is not None and second[0] - best[0] < _AMBIGUITY_MARGIN:
        raise AmbiguousCorrespondenceError(
            f"two assignments within 5 mm total cost ({best[0]*1e3:.1f} vs {second[0]*1e3:.1f} mm)"
        )

    _, subset, perm = best
    fits = tuple(candidates[subset[perm[k]]] for k in range(4))
    observed = np.stack([f.center for f in fits])
    frame_obs = build_fixture_frame(observed)
    frame_pat = build_fixture_frame(pattern.centers)
    return FixtureObservation(frame=compose(frame_obs, invert(frame_pat)), sphere_fits=fits)
