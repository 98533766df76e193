"""Point clouds, exact k-NN neighbourhoods, rigid transforms and error metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

BRUTE_FORCE_MAX = 128
ORTHO_TOL = 1e-9


class SizeError(ValueError):
    """Raised when an input is too small for the requested operation."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3D points, optionally with per-point normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise SizeError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64, copy=True)
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points in shape")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return self.points.shape[0]

    @property
    def size(self) -> int:
        return self.points.shape[0]


def as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class NeighborhoodIndex:
    """K nearest neighbours of every point, closest first, self excluded.

    ``neighbors[i, 0]`` is the nearest other point of ``i``; equal distances
    are ordered by point index.
    """

    neighbors: np.ndarray
    sq_distances: np.ndarray
    K: int
    owner: PointCloud | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.neighbors.shape[0]


def _sq_dist_rows(pts: np.ndarray, i: np.ndarray, cand: np.ndarray) -> np.ndarray:
    # one fixed expression for every distance so tree and brute force agree bitwise
    return ((pts[cand] - pts[i][..., None, :]) ** 2).sum(-1)


def brute_force_neighbors(pts: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    n = pts.shape[0]
    idx = np.arange(n)
    nbrs = np.empty((n, K), dtype=np.int64)
    d2 = np.empty((n, K))
    cand = np.broadcast_to(idx, (n, n))
    chunk = max(1, 2**20 // max(n, 1))
    for s in range(0, n, chunk):
        rows = idx[s:s + chunk]
        dist = _sq_dist_rows(pts, rows, cand[rows])
        dist[np.arange(len(rows)), rows] = np.inf
        order = np.lexsort((np.broadcast_to(idx, dist.shape), dist), axis=-1)[:, :K]
        nbrs[rows] = order
        d2[rows] = np.take_along_axis(dist, order, axis=1)
    return nbrs, d2


def _tree_neighbors(pts: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    n = pts.shape[0]
    extra = min(n, K + 4)
    tree = cKDTree(pts)
    _, cand = tree.query(pts, k=extra)
    cand = np.asarray(cand, dtype=np.int64).reshape(n, extra)
    rows = np.arange(n)
    dist = _sq_dist_rows(pts, rows, cand)
    dist = np.where(cand == rows[:, None], np.inf, dist)
    order = np.lexsort((cand, dist), axis=-1)
    cand = np.take_along_axis(cand, order, axis=1)
    dist = np.take_along_axis(dist, order, axis=1)
    nbrs, d2 = cand[:, :K].copy(), dist[:, :K].copy()
    # rows whose K-th distance is not strictly inside the searched radius may
    # have tied candidates the tree never returned
    if extra < n:
        bound = np.max(np.where(np.isfinite(dist), dist, -np.inf), axis=1)
        risky = ~(d2[:, -1] < bound * (1 - 1e-9))
    else:
        risky = np.zeros(n, dtype=bool)
    for i in np.flatnonzero(risky):
        everyone = np.arange(n)
        di = _sq_dist_rows(pts, np.array([i]), everyone[None, :])[0]
        di[i] = np.inf
        o = np.lexsort((everyone, di))[:K]
        nbrs[i], d2[i] = o, di[o]
    return nbrs, d2


def build_neighborhood_index(cloud, K: int) -> NeighborhoodIndex:
    """Exact K-nearest-neighbour table of ``cloud`` (self excluded)."""
    pts = as_points(cloud)
    K = int(K)
    if K < 1:
        raise ValueError("K must be positive")
    if pts.shape[0] < K + 1:
        raise SizeError(f"cloud of {pts.shape[0]} points is too small for K={K}")
    if pts.shape[0] <= BRUTE_FORCE_MAX:
        nbrs, d2 = brute_force_neighbors(pts, K)
    else:
        nbrs, d2 = _tree_neighbors(pts, K)
    nbrs.setflags(write=False)
    d2.setflags(write=False)
    owner = cloud if isinstance(cloud, PointCloud) else None
    return NeighborhoodIndex(nbrs, d2, K, owner)


def one_nn_cloud(cloud, index: NeighborhoodIndex) -> PointCloud:
    """Replace every point by its nearest other point."""
    pts = as_points(cloud)
    if index.size != pts.shape[0]:
        raise ValueError("index was built over a different cloud")
    return PointCloud(pts[index.neighbors[:, 0]])


# ------------------------------------------------------------ rigid motions

def _check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    return (np.max(np.abs(R.T @ R - np.eye(3))) <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> R x + t with R a proper rotation."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64, copy=True).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64, copy=True).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform entries must be finite")
        if not _check_rotation(R):
            raise ValueError("R is not a proper rotation within 1e-9")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4):
            raise ValueError("expected a 4x4 homogeneous matrix")
        if np.max(np.abs(T[3] - [0.0, 0.0, 0.0, 1.0])) > 1e-12:
            raise ValueError("bottom row of a homogeneous matrix must be 0 0 0 1")
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def apply_transform(T: RigidTransform, cloud) -> PointCloud:
    pts = as_points(cloud)
    out = pts @ T.R.T + T.t
    normals = cloud.normals if isinstance(cloud, PointCloud) else None
    if normals is not None:
        normals = normals @ T.R.T
    return PointCloud(out, normals)


def compose(T2: RigidTransform, T1: RigidTransform) -> RigidTransform:
    """The transform equal to applying ``T1`` first, then ``T2``."""
    R = T2.R @ T1.R
    if not _check_rotation(R):
        R = orthonormalize(R)
    return RigidTransform(R, T2.R @ T1.t + T2.t)


def rot_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def euler_zyx_to_matrix(angles_deg) -> np.ndarray:
    """Intrinsic Z-Y-X Euler angles (degrees) to a rotation matrix."""
    z, y, x = angles_deg
    return rot_z(z) @ rot_y(y) @ rot_x(x)


def matrix_to_euler_zyx(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_euler("ZYX", degrees=True)


def geodesic_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle of the relative rotation Raᵀ Rb in degrees."""
    Rrel = Ra.T @ Rb
    # arccos loses precision near 0; the axis-angle norm does not
    return float(np.rad2deg(np.linalg.norm(Rotation.from_matrix(Rrel).as_rotvec())))


@dataclass(frozen=True)
class RegistrationMetrics:
    mae_rot: float
    mae_trans: float
    mie_rot: float
    mie_trans: float

    def as_dict(self) -> dict:
        return {"mae_rot": self.mae_rot, "mae_trans": self.mae_trans,
                "mie_rot": self.mie_rot, "mie_trans": self.mie_trans}


def compute_metrics(T_est: RigidTransform, T_gt: RigidTransform) -> RegistrationMetrics:
    """Isotropic (geodesic) and anisotropic (Euler/axis-wise) errors."""
    mie_rot = geodesic_angle_deg(T_gt.R, T_est.R)
    mie_trans = float(np.linalg.norm(T_gt.R.T @ (T_est.t - T_gt.t)))
    e_est = matrix_to_euler_zyx(T_est.R)
    e_gt = matrix_to_euler_zyx(T_gt.R)
    mae_rot = float(np.mean(np.abs(e_est - e_gt)))
    mae_trans = float(np.mean(np.abs(T_est.t - T_gt.t)))
    return RegistrationMetrics(mae_rot, mae_trans, mie_rot, mie_trans)
