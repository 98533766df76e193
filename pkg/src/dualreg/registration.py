"""The iterative registration driver.

One iteration: features of the current source, its 1-NN cloud, the target
and the target's 1-NN cloud -> matching map -> reference copy -> inlier
confidences -> top-k inliers -> weighted SVD -> move the source.  The same
forward code serves inference (constants only) and training (parameters as
graph leaves), so the losses see exactly what ``register`` computes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .features import ExtractorConfig, extract_features
from .geometry import (NeighborhoodIndex, PointCloud, RigidTransform, as_points,
                       build_neighborhood_index, compose)
from .inlier import InlierConfig, InlierSet, score_graph, top_k_indices
from .matching import distance_graph, final_map_graph, fuse_graph
from .params import ConfigError, ParamSet
from .solver import DegenerateGeometryError, SolveResult, weighted_svd, weighted_svd_graph


@dataclass(frozen=True)
class PipelineConfig:
    K: int = 8
    n_iter: int = 3
    alpha: float = 0.0
    dual: bool = True
    normalization: str = "as_written"
    inlier_ratio: float = 0.5
    stop_gradient_svd: bool = False
    features: ExtractorConfig = field(default_factory=ExtractorConfig)
    inlier: InlierConfig = field(default_factory=InlierConfig)

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.n_iter < 1:
            raise ConfigError("n_iter must be >= 1")
        if not 0 < self.inlier_ratio <= 1:
            raise ConfigError("inlier_ratio must lie in (0, 1]")
        if not math.isfinite(self.alpha):
            raise ConfigError("alpha must be finite")

    def n_inliers(self, n: int) -> int:
        return max(3, int(math.floor(self.inlier_ratio * n)))

    def init_params(self) -> ParamSet:
        return self.features.init_params().merged(self.inlier.init_params(self.K))

    def param_layout(self):
        return self.features.layout() + self.inlier.layout(self.K)


@dataclass
class IterationRecord:
    """Graph nodes and discrete choices of one iteration (training view)."""

    P: ad.Var
    idxP: NeighborhoodIndex
    Q_tilde: ad.Var
    G: ad.Var
    F: ad.Var
    w: ad.Var
    inliers: np.ndarray
    R: ad.Var
    t: ad.Var
    P_next: ad.Var


@dataclass
class IterationSummary:
    transform: RigidTransform
    inliers: InlierSet
    residual: float
    mean_confidence: float
    max_F: float
    F: np.ndarray | None = None


@dataclass
class RegistrationResult:
    per_iteration: list[IterationSummary]
    final_transform: RigidTransform

    @property
    def iterations(self) -> int:
        return len(self.per_iteration)

    @property
    def transforms(self) -> list[RigidTransform]:
        return [it.transform for it in self.per_iteration]


class RegistrationError(RuntimeError):
    pass


def _feature_index(pts: np.ndarray, idx: NeighborhoodIndex, cfg: ExtractorConfig):
    return idx if cfg.K_feat == idx.K else build_neighborhood_index(pts, cfg.K_feat)


def forward(P, Q, params: ParamSet, config: PipelineConfig, weights: dict | None = None,
            check_rank: bool = False) -> list[IterationRecord]:
    """Run all iterations, returning graph records.

    ``weights`` maps parameter names to autodiff leaves when gradients are
    wanted; otherwise parameters enter as constants.
    """
    if weights is None:
        weights = {k: ad.const(v) for k, v in params.items()}
    q = as_points(Q)
    K = config.K
    fcfg, icfg = config.features, config.inlier

    idxQ = build_neighborhood_index(q, K)
    q_hat = q[idxQ.neighbors[:, 0]]
    FQ = extract_features(q, _feature_index(q, idxQ, fcfg), fcfg, weights=weights)
    if config.dual:
        idxQh = build_neighborhood_index(q_hat, K)
        FQh = extract_features(q_hat, _feature_index(q_hat, idxQh, fcfg), fcfg, weights=weights)

    P_l = P if isinstance(P, ad.Var) else ad.const(as_points(P))
    n = P_l.shape[0]
    n_c = config.n_inliers(n)
    records = []
    for it in range(config.n_iter):
        pts = P_l.value
        idxP = build_neighborhood_index(pts, K)
        FP = extract_features(P_l, _feature_index(pts, idxP, fcfg), fcfg, weights=weights)
        D = distance_graph(FP, FQ)
        M = ad.softmax(-D, axis=1)
        if config.dual:
            P_hat = ad.take(P_l, idxP.neighbors[:, 0])
            idxPh = build_neighborhood_index(P_hat.value, K)
            FPh = extract_features(P_hat, _feature_index(P_hat.value, idxPh, fcfg), fcfg, weights=weights)
            D_hat = distance_graph(FPh, FQh)
            M_hat = ad.softmax(-D_hat, axis=1)
            G = fuse_graph(M, M_hat, idxP, idxQ, idxPh, idxQh, config.normalization)
        else:
            D_hat = None
            G = fuse_graph(M, None, idxP, idxQ, normalization=config.normalization)
        F = final_map_graph(D, D_hat, G, config.alpha)
        Q_tilde = F @ q
        w, _, _ = score_graph(P_l, Q_tilde, np.asarray(idxP.neighbors), weights, icfg)
        inl = top_k_indices(w.value, n_c)
        if check_rank:
            try:
                weighted_svd(P_l.value[inl], Q_tilde.value[inl], w.value[inl])
            except DegenerateGeometryError as exc:
                raise RegistrationError(f"iteration {it}: {exc}") from exc
        R, t = weighted_svd_graph(P_l[inl], Q_tilde[inl], w[inl], config.stop_gradient_svd)
        P_next = P_l @ ad.transpose(R) + t
        records.append(IterationRecord(P_l, idxP, Q_tilde, G, F, w, inl, R, t, P_next))
        P_l = P_next
    return records


def register(P, Q, params: ParamSet | None, config: PipelineConfig | None = None,
             keep_maps: bool = False) -> RegistrationResult:
    """Estimate the rigid transform taking source ``P`` onto reference ``Q``."""
    config = config or PipelineConfig()
    if params is None:
        params = config.init_params()
    params.check_layout(config.param_layout())
    p0, q = as_points(P), as_points(Q)
    for name, pts in (("source", p0), ("reference", q)):
        if pts.shape[0] < config.K + 1:
            raise ConfigError(f"{name} cloud has {pts.shape[0]} points; K={config.K} needs more")
    records = forward(p0, q, params, config, check_rank=True)
    total = RigidTransform.identity()
    summaries = []
    for rec in records:
        T = RigidTransform(rec.R.value, rec.t.value)
        total = compose(T, total)
        inl = rec.inliers
        pts, qt, w = rec.P.value, rec.Q_tilde.value, rec.w.value
        solve = weighted_svd(pts[inl], qt[inl], w[inl], check_rank=False)
        summaries.append(IterationSummary(
            T, InlierSet(inl, w[inl], pts[inl], qt[inl]), solve.residual,
            float(w.mean()), float(rec.F.value.max(axis=1).mean()),
            rec.F.value.copy() if keep_maps else None))
    return RegistrationResult(summaries, total)
