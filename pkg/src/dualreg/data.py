"""Synthetic shapes and partially overlapping registration pairs."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import (PointCloud, RigidTransform, SizeError, apply_transform,
                       as_points, euler_zyx_to_matrix)

SHAPES = ("sphere", "torus", "box-frame", "helix", "two-planes", "bunny-like-composite")


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class PairSpec:
    n_points: int = 2048
    rot_range_deg: tuple[float, float] = (0.0, 45.0)
    trans_range: tuple[float, float] = (-0.5, 0.5)
    keep_fraction: float = 0.7
    noise_sigma: float = 0.0
    noise_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.rot_range_deg
        if not 0 <= lo <= hi:
            raise ValueError("rot_range_deg must satisfy 0 <= lo <= hi")
        if self.trans_range[0] > self.trans_range[1]:
            raise ValueError("trans_range must be ordered")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must lie in (0, 1]")
        if self.noise_sigma < 0 or self.noise_clip < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.n_points < 1:
            raise ValueError("n_points must be positive")

    @property
    def n_keep(self) -> int:
        return int(round(self.keep_fraction * self.n_points))


@dataclass(frozen=True)
class Pair:
    P: PointCloud
    Q: PointCloud
    T_gt: RigidTransform
    overlap: float


# ------------------------------------------------------------------- shapes

def _sphere_dirs(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _ellipsoid(rng, n, radii, centre):
    return _sphere_dirs(rng, n) * np.asarray(radii) + np.asarray(centre)


def _sphere(rng, n):
    return _sphere_dirs(rng, n)


def _torus(rng, n):
    # elliptical core so the shape has no continuous symmetry
    u = rng.uniform(0, 2 * np.pi, n)
    v = rng.uniform(0, 2 * np.pi, n)
    ra, rb, r = 1.0, 0.6, 0.25
    return np.column_stack([(ra + r * np.cos(v)) * np.cos(u),
                            (rb + r * np.cos(v)) * np.sin(u),
                            r * np.sin(v)])


def _box_frame(rng, n):
    hx, hy, hz = 1.0, 0.7, 0.45
    corners = np.array([[sx * hx, sy * hy, sz * hz]
                        for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    edges = [(a, b) for a in range(8) for b in range(a + 1, 8)
             if np.count_nonzero(corners[a] != corners[b]) == 1]
    lengths = np.array([np.linalg.norm(corners[b] - corners[a]) for a, b in edges])
    which = rng.choice(len(edges), size=n, p=lengths / lengths.sum())
    s = rng.uniform(0, 1, n)[:, None]
    a = corners[[edges[k][0] for k in which]]
    b = corners[[edges[k][1] for k in which]]
    return a + s * (b - a) + 0.03 * _sphere_dirs(rng, n) * rng.uniform(0, 1, (n, 1))


def _helix(rng, n):
    turns, radius, height, tube = 2.5, 0.6, 1.6, 0.1
    s = rng.uniform(0, 1, n)
    ang = 2 * np.pi * turns * s
    c = np.column_stack([radius * np.cos(ang), radius * np.sin(ang), height * (s - 0.5)])
    tangent = np.column_stack([-radius * np.sin(ang) * 2 * np.pi * turns,
                               radius * np.cos(ang) * 2 * np.pi * turns,
                               np.full(n, height)])
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    nrm = np.column_stack([np.cos(ang), np.sin(ang), np.zeros(n)])
    bin_ = np.cross(tangent, nrm)
    phi = rng.uniform(0, 2 * np.pi, n)[:, None]
    return c + tube * (np.cos(phi) * nrm + np.sin(phi) * bin_)


def _two_planes(rng, n):
    # an open book with unequal pages meeting along the y axis at 60 degrees
    n1 = int(round(n * 1.6 / (1.6 + 1.0)))
    a = np.column_stack([rng.uniform(0, 1.6, n1), rng.uniform(-0.5, 0.5, n1), np.zeros(n1)])
    n2 = n - n1
    r = rng.uniform(0, 1.0, n2)
    th = np.deg2rad(60.0)
    b = np.column_stack([r * np.cos(th), rng.uniform(-0.5, 0.3, n2), r * np.sin(th)])
    pts = np.vstack([a, b])
    return pts - np.array([0.6, -0.05, 0.2])


def _bunny(rng, n):
    parts = [((0.6, 0.45, 0.4), (0.0, 0.0, 0.0)),     # body
             ((0.28, 0.26, 0.26), (0.55, 0.0, 0.35)),  # head
             ((0.06, 0.05, 0.25), (0.55, 0.1, 0.75)),  # ears
             ((0.06, 0.05, 0.22), (0.52, -0.12, 0.72)),
             ((0.1, 0.1, 0.1), (-0.62, 0.0, 0.05))]    # tail
    areas = np.array([np.prod(r) ** (2 / 3) for r, _ in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = np.vstack([_ellipsoid(rng, c, r, ctr) for (r, ctr), c in zip(parts, counts)])
    lo, hi = pts.min(0), pts.max(0)
    return pts - 0.5 * (lo + hi)


_BUILDERS = {"sphere": _sphere, "torus": _torus, "box-frame": _box_frame,
             "helix": _helix, "two-planes": _two_planes, "bunny-like-composite": _bunny}


def builtin_shapes(name: str, n: int, seed: int = 0) -> PointCloud:
    """``n`` points on a parametric surface, scaled into the unit ball."""
    if name not in _BUILDERS:
        raise UsageError(f"unknown shape {name!r}; choose from {', '.join(SHAPES)}")
    rng = np.random.default_rng(seed)
    pts = _BUILDERS[name](rng, int(n))
    pts = pts / np.max(np.linalg.norm(pts, axis=1))
    pts = rng.permutation(pts, axis=0)
    return PointCloud(pts)


# -------------------------------------------------------------------- pairs

def sample_transform(spec: PairSpec, rng: np.random.Generator) -> RigidTransform:
    """Three uniform Euler angles (Z-Y-X intrinsic) and a uniform translation."""
    lo, hi = spec.rot_range_deg
    angles = rng.uniform(lo, hi, size=3)
    t = rng.uniform(spec.trans_range[0], spec.trans_range[1], size=3)
    return RigidTransform(euler_zyx_to_matrix(angles), t)


def half_space_crop(pts: np.ndarray, n_keep: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of the ``n_keep`` points lying furthest along a random direction."""
    if n_keep >= pts.shape[0]:
        return np.arange(pts.shape[0])
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    proj = (pts - pts.mean(0)) @ v
    return np.sort(np.argsort(-proj, kind="stable")[:n_keep])


def _noise(rng, shape, sigma, clip):
    if sigma == 0:
        return np.zeros(shape)
    return np.clip(rng.normal(0.0, sigma, size=shape), -clip, clip)


def make_pair(shape, spec: PairSpec) -> Pair:
    """Source/reference pair with ground truth ``Q ≈ T_gt(P)``.

    The reference is a random subset of the shape; the source is the
    inverse-transformed copy of the same points in shuffled order.  Each is
    then cropped by its own random half space and independently noised.
    ``overlap`` is the fraction of kept source points whose counterpart
    survives in the reference.
    """
    base = as_points(shape)
    if base.shape[0] < spec.n_points:
        raise SizeError(f"shape has {base.shape[0]} points, spec needs {spec.n_points}")
    rng = np.random.default_rng(spec.seed)
    sel = rng.choice(base.shape[0], size=spec.n_points, replace=False)
    q_full = base[sel]
    T = sample_transform(spec, rng)
    perm = rng.permutation(spec.n_points)
    p_full = apply_transform(T.inverse(), q_full[perm]).points
    keep_q = half_space_crop(q_full, spec.n_keep, rng)
    keep_p = half_space_crop(p_full, spec.n_keep, rng)
    q = q_full[keep_q] + _noise(rng, (len(keep_q), 3), spec.noise_sigma, spec.noise_clip)
    p = p_full[keep_p] + _noise(rng, (len(keep_p), 3), spec.noise_sigma, spec.noise_clip)
    overlap = float(np.isin(perm[keep_p], keep_q).mean())
    return Pair(PointCloud(p), PointCloud(q), T, overlap)


# ----------------------------------------------------------- seeded streams

TRAIN_STREAM, HELDOUT_STREAM = 0, 1


def seeded_pair(shapes, spec: PairSpec, seed: int, k: int, stream: int = HELDOUT_STREAM) -> Pair:
    """Pair ``k`` of a reproducible stream.

    Shape ``shapes[k % len(shapes)]`` is resampled from its own seed and the
    crop, motion and noise come from another, both derived from
    ``(seed, stream, k)``; training and held-out streams never share seeds.
    """
    shapes = list(shapes)
    if not shapes:
        raise UsageError("need at least one shape")
    ss = np.random.SeedSequence([int(seed), int(stream), int(k)])
    shape_seed, pair_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    base = builtin_shapes(shapes[k % len(shapes)], 4 * spec.n_points, seed=shape_seed)
    return make_pair(base, replace(spec, seed=pair_seed))


def pair_stream(shapes, spec: PairSpec, seed: int, stream: int = TRAIN_STREAM):
    """``step -> (P, Q)`` for :func:`dualreg.training.train`."""
    def get(step):
        pair = seeded_pair(shapes, spec, seed, step, stream)
        return pair.P, pair.Q
    return get


# ------------------------------------------------------- ambiguity fixture

@dataclass(frozen=True)
class AmbiguityScene:
    P: PointCloud
    Q: PointCloud
    T_gt: RigidTransform
    query: int        # source index of the patch centre
    correct: int      # its true counterpart in Q
    decoy: int        # centre of the look-alike patch in Q


def ambiguity_scene(K: int = 4) -> AmbiguityScene:
    """Two patches that agree point for point within every K-neighbourhood.

    Each patch is a centre with four close neighbours.  Next to the decoy
    sits one far, isolated point whose nearest neighbour is the decoy's
    nearest-to-centre point.  It lies outside every patch point's
    K-neighbourhood, so descriptors of the input clouds cannot tell the
    patches apart, but in the 1-NN cloud it collapses onto that point and
    creates a duplicate only around the decoy.  The source is a rigid
    image of the reference, so every point has an exact counterpart.
    """
    if K != 4:
        raise ValueError("the fixture is built for K = 4")
    patch = np.array([[0.0, 0.0, 0.0],      # centre
                      [0.05, 0.0, 0.0],     # nearest neighbour of the centre
                      [-0.07, 0.02, 0.0],
                      [0.01, 0.08, 0.01],
                      [0.0, -0.03, 0.09]])
    good = patch + np.array([-1.0, 0.0, 0.0])
    bad = patch + np.array([1.0, 0.0, 0.0])
    lone = bad[1] + np.array([0.6, 0.0, 0.0])
    q = np.vstack([good, bad, lone])
    T = RigidTransform(euler_zyx_to_matrix([30.0, 20.0, 10.0]), np.array([0.1, -0.2, 0.3]))
    perm = np.random.default_rng(7).permutation(len(q))
    p = apply_transform(T.inverse(), q[perm]).points
    query = int(np.flatnonzero(perm == 0)[0])
    return AmbiguityScene(PointCloud(p), PointCloud(q), T, query, 0, len(patch))
