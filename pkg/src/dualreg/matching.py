"""Soft matching between two clouds and the reference-copy construction.

Two score maps are built: ``M`` from the features of the input clouds and
``M_hat`` from the features of their 1-NN clouds.  Both are summed over the
K-neighbourhoods of source and target points into ``G``, which modulates the
combined feature distance before the final row softmax ``F``.  The reference
copy is the ``F``-weighted barycentre of the target cloud for every source
point.

All functions accept arrays or autodiff nodes; the public ones return numpy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .geometry import NeighborhoodIndex, PointCloud, as_points
from .params import ConfigError

NORMALIZATIONS = ("as_written", "k_squared")
COINCIDENT_RTOL = 1e-9


@dataclass(frozen=True)
class MatchingMap:
    M: np.ndarray
    M_hat: np.ndarray | None
    G: np.ndarray
    F: np.ndarray
    alpha: float


@dataclass(frozen=True)
class ReferenceCopy:
    points: PointCloud

    @property
    def source_size(self) -> int:
        return self.points.size


def _fm(x):
    """Feature values from a FeatureMatrix, array or node."""
    return getattr(x, "values", x)


# ------------------------------------------------------------------ graph ops

def distance_graph(FA, FB) -> ad.Var:
    FA, FB = ad.const(_fm(FA)), ad.const(_fm(FB))
    if FA.shape[1] != FB.shape[1]:
        raise ValueError(f"feature dimensions differ: {FA.shape[1]} vs {FB.shape[1]}")

    def fwd(a, b):
        D = cdist(a, b)
        # rows equal up to rounding count as coincident: distance 0, zero subgradient
        scale = np.maximum(np.linalg.norm(a, axis=1)[:, None], np.linalg.norm(b, axis=1)[None, :])
        D[D <= COINCIDENT_RTOL * scale] = 0.0
        return D, (a, b, D)

    def bwd(ctx, g):
        # d|a_i - b_j| = (a_i - b_j) / D_ij, zero where the rows coincide
        a, b, D = ctx
        C = np.divide(g, D, out=np.zeros_like(D), where=D > 0)
        return (a * C.sum(1)[:, None] - C @ b, b * C.sum(0)[:, None] - C.T @ a)

    return ad.custom([FA, FB], fwd, bwd)


def adjacency(index: NeighborhoodIndex) -> sp.csr_matrix:
    """Sparse 0/1 matrix with row i marking the K neighbours of point i."""
    n, K = index.neighbors.shape
    rows = np.repeat(np.arange(n), K)
    return sp.csr_matrix((np.ones(n * K), (rows, index.neighbors.ravel())), shape=(n, n))


def neighborhood_sum(S, idx_src: NeighborhoodIndex, idx_dst: NeighborhoodIndex) -> ad.Var:
    """``out[i, j] = sum over i' in N(i), j' in N(j) of S[i', j']``."""
    left = ad.sparse_matmul(adjacency(idx_src), S, side="left")
    return ad.sparse_matmul(adjacency(idx_dst).T.tocsr(), left, side="right")


def fuse_graph(M, M_hat, idxP, idxQ, idxP_hat=None, idxQ_hat=None,
               normalization: str = "as_written") -> ad.Var:
    if normalization not in NORMALIZATIONS:
        raise ConfigError(f"unknown normalization {normalization!r}")
    K = idxP.K
    ks = [idxQ.K] + [i.K for i in (idxP_hat, idxQ_hat) if i is not None]
    if any(k != K for k in ks):
        raise ValueError("all neighbourhood indices must share K")
    M = ad.const(M)
    n, m = M.shape
    if idxP.size != n or idxQ.size != m:
        raise ValueError(f"map shape {M.shape} does not match indices ({idxP.size}, {idxQ.size})")
    scale = 1.0 / K if normalization == "as_written" else 1.0 / (K * K)
    G = neighborhood_sum(M, idxP, idxQ) * scale
    if M_hat is not None:
        M_hat = ad.const(M_hat)
        if M_hat.shape != M.shape:
            raise ValueError("M and M_hat must have the same shape")
        G = G + neighborhood_sum(M_hat, idxP_hat, idxQ_hat) * scale
    return G


def final_map_graph(D, D_hat, G, alpha: float) -> ad.Var:
    dist = ad.const(D) if D_hat is None else ad.const(D) + D_hat
    D_prime = ad.exp(alpha - ad.const(G)) * dist
    return ad.softmax(-D_prime, axis=1)


# ------------------------------------------------------------- public numpy API

def pairwise_distance(FA, FB) -> np.ndarray:
    """Euclidean distances between every row of ``FA`` and every row of ``FB``."""
    return distance_graph(FA, FB).value


def matching_scores(D) -> np.ndarray:
    """Row softmax of ``-D`` (stabilised by the row maximum)."""
    return ad.softmax(-ad.const(D), axis=1).value


def fuse_dual_neighborhood(M, M_hat, idxP, idxQ, idxP_hat=None, idxQ_hat=None,
                           normalization: str = "as_written") -> np.ndarray:
    """Neighbourhood-fused score ``G``; pass ``M_hat=None`` for the single variant.

    The double sum over K x K neighbour pairs is divided by K as written
    (``normalization="as_written"``), which keeps G within [0, 2]; "k_squared"
    divides by K² instead.
    """
    return fuse_graph(M, M_hat, idxP, idxQ, idxP_hat, idxQ_hat, normalization).value


def final_matching_map(D, D_hat, G, alpha: float = 0.0) -> np.ndarray:
    """``F = softmax(-exp(alpha - G) * (D + D_hat))`` row-wise; ``D_hat`` may be None."""
    D = np.asarray(D, dtype=np.float64)
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")
    if np.shape(G) != D.shape or (D_hat is not None and np.shape(D_hat) != D.shape):
        raise ValueError("D, D_hat and G must share a shape")
    return final_map_graph(D, D_hat, G, alpha).value


def reference_copy(F, Q) -> ReferenceCopy:
    F = np.asarray(F, dtype=np.float64)
    q = as_points(Q)
    if F.shape[1] != q.shape[0]:
        raise ValueError(f"F has {F.shape[1]} columns but Q has {q.shape[0]} points")
    return ReferenceCopy(PointCloud(F @ q))


def build_matching_map(FP, FP_hat, FQ, FQ_hat, idxP, idxQ, idxP_hat, idxQ_hat,
                       alpha: float = 0.0, dual: bool = True,
                       normalization: str = "as_written") -> MatchingMap:
    """All matching intermediates for one source/target pair."""
    D = pairwise_distance(FP, FQ)
    M = matching_scores(D)
    if dual:
        D_hat = pairwise_distance(FP_hat, FQ_hat)
        M_hat = matching_scores(D_hat)
        G = fuse_dual_neighborhood(M, M_hat, idxP, idxQ, idxP_hat, idxQ_hat, normalization)
    else:
        D_hat = M_hat = None
        G = fuse_dual_neighborhood(M, None, idxP, idxQ, normalization=normalization)
    return MatchingMap(M, M_hat, G, final_matching_map(D, D_hat, G, alpha), alpha)


def write_map(F, path) -> None:
    """Dense text dump of F: one row per line, space separated, repr floats."""
    F = np.asarray(F)
    with open(path, "w") as fh:
        fh.write(f"# matching-map {F.shape[0]} {F.shape[1]}\n")
        for row in F:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_map(path) -> np.ndarray:
    with open(path) as fh:
        head = fh.readline().split()
        if head[:2] != ["#", "matching-map"]:
            raise ValueError(f"{path}: line 1: not a matching-map file")
        n, m = int(head[2]), int(head[3])
        rows = [np.array(line.split(), dtype=np.float64) for line in fh if line.strip()]
    F = np.vstack(rows) if rows else np.zeros((0, m))
    if F.shape != (n, m):
        raise ValueError(f"{path}: header says {n}x{m}, body is {F.shape}")
    return F
