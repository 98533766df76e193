"""Weighted rigid alignment (Kabsch with reflection guard) and its gradient.

The rotation is ``R = V diag(1, 1, det(V Uᵀ)) Uᵀ`` from the SVD ``H = U S Vᵀ``
of the weighted cross-covariance.  Its derivative is written in the SVD
frame: with ``P = Uᵀ dH V`` and ``B = Vᵀ dR̄ U``, for i != j

    same sign d_i = d_j:      dP̄_ij = d_i (B_ji - B_ij) / (s_i + s_j)
    opposite signs:           dP̄_ij = d_j (B_ij + B_ji) / (s_j - s_i)

so only the reflected case needs a gap between singular values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import RigidTransform, SizeError, as_points

GAP_TOL = 1e-8


class DegenerateWeightsError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    """Rank-deficient cross-covariance; ``result`` holds a best-effort solve."""

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


class DegenerateSpectrumError(ValueError):
    """Singular values too close for a stable gradient; use stop-gradient."""


@dataclass(frozen=True)
class SolveResult:
    transform: RigidTransform
    residual: float


@dataclass
class SVDTape:
    p: np.ndarray
    q: np.ndarray
    w: np.ndarray
    p_bar: np.ndarray
    q_bar: np.ndarray
    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray
    d: float
    R: np.ndarray


def _solve(p, q, w):
    W = w.sum()
    p_bar = w @ p / W
    q_bar = w @ q / W
    a, b = p - p_bar, q - q_bar
    H = (a * w[:, None]).T @ b
    U, S, Vt = np.linalg.svd(H)
    d = 1.0 if np.linalg.det(U) * np.linalg.det(Vt) >= 0 else -1.0
    R = (Vt.T * [1.0, 1.0, d]) @ U.T
    t = q_bar - R @ p_bar
    return R, t, SVDTape(p, q, w, p_bar, q_bar, U, S, Vt, d, R)


def _validate(p, q, w):
    p = as_points(p).reshape(-1, 3)
    q = as_points(q).reshape(-1, 3)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if p.shape != q.shape or w.shape[0] != p.shape[0]:
        raise ValueError("points and weights must have matching lengths")
    if p.shape[0] < 3:
        raise SizeError("weighted SVD needs at least 3 pairs")
    if not (w.min() >= 0 and np.isfinite(w.sum())):
        raise DegenerateWeightsError("weights must be finite and non-negative")
    if w.sum() <= 0:
        raise DegenerateWeightsError("all weights are zero")
    return p, q, w


def weighted_svd(p, q, weights, return_tape: bool = False, check_rank: bool = True):
    """Minimise ``sum_i w_i |R p_i + t - q_i|²`` over rotations R and translations t."""
    p, q, w = _validate(p, q, weights)
    R, t, tape = _solve(p, q, w)
    r = p @ R.T + t - q
    residual = float(np.sqrt((w * (r * r).sum(1)).sum() / w.sum()))
    res = SolveResult(RigidTransform(R, t), residual)
    if check_rank and tape.S[1] <= GAP_TOL * max(1.0, tape.S[0]):
        raise DegenerateGeometryError("cross-covariance has rank < 2; rotation is not unique", res)
    return (res, tape) if return_tape else res


def spectrum_problem(S, d: float) -> str | None:
    """Why the rotation gradient is undefined for this spectrum, or None."""
    if S[1] + S[2] < GAP_TOL:
        return "two vanishing singular values"
    if d < 0 and abs(S[2] - S[1]) < GAP_TOL:
        return f"singular values {S[1]:.3e} and {S[2]:.3e} are closer than {GAP_TOL}"
    return None


def rotation_grad_to_H(tape: SVDTape, dR: np.ndarray) -> np.ndarray:
    U, S, V = tape.U, tape.S, tape.Vt.T
    problem = spectrum_problem(S, tape.d)
    if problem:
        raise DegenerateSpectrumError(problem)
    dvec = np.array([1.0, 1.0, tape.d])
    B = V.T @ dR @ U
    gP = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            if i == j:
                continue
            if dvec[i] == dvec[j]:
                gP[i, j] = dvec[i] * (B[j, i] - B[i, j]) / (S[i] + S[j])
            else:
                gP[i, j] = dvec[j] * (B[i, j] + B[j, i]) / (S[j] - S[i])
    return U @ gP @ V.T


def weighted_svd_backward(tape: SVDTape, d_R, d_t):
    """Gradients of ``<d_R, R> + <d_t, t>`` w.r.t. p, q and the weights."""
    d_R = np.asarray(d_R, dtype=np.float64).reshape(3, 3)
    d_t = np.asarray(d_t, dtype=np.float64).reshape(3)
    p, q, w = tape.p, tape.q, tape.w
    W = w.sum()
    a, b = p - tape.p_bar, q - tape.q_bar
    # t = q_bar - R p_bar
    dR_total = d_R - np.outer(d_t, tape.p_bar)
    RTdt = tape.R.T @ d_t
    gH = rotation_grad_to_H(tape, dR_total) if np.any(dR_total) else np.zeros((3, 3))
    gp = w[:, None] * (b @ gH.T) - np.outer(w / W, RTdt)
    gq = w[:, None] * (a @ gH) + np.outer(w / W, d_t)
    gw = np.einsum("ni,ij,nj->n", a, gH, b) + (b @ d_t - a @ RTdt) / W
    return gp, gq, gw


def weighted_svd_graph(p, q, w, stop_gradient: bool = False):
    """(R, t) as autodiff nodes."""
    def fwd(pv, qv, wv):
        R, t, tape = _solve(pv, qv, wv)
        return (R, t), tape

    def bwd(tape, gR, gt):
        return weighted_svd_backward(tape, gR, gt)

    if stop_gradient:
        R, t, _ = _solve(ad.value_of(p), ad.value_of(q), ad.value_of(w))
        return ad.const(R), ad.const(t)
    return ad.custom([p, q, w], fwd, bwd)
