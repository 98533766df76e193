"""Inlier confidence from neighbourhood geometry consistency.

For a source point ``p_i`` with neighbours ``p_k`` the edge ``p_i - p_k`` and
the angle between that edge and the anchor edge (to the nearest neighbour)
describe the local structure.  The same description is computed on the
reference copy using the copies of the *same* source neighbours, so the k-th
rows are directly comparable.  A shared perceptron embeds both, their
difference is pooled with learned attention, and a bias-free linear read-out
gives ``w_i = 1 - tanh(|l(.)|)``: exactly 1 when the two neighbourhoods agree.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import NeighborhoodIndex, PointCloud, SizeError, as_points
from .params import ConfigError, ParamSet, init_layout

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class GeometricRepr:
    edges: np.ndarray
    edge_norms: np.ndarray
    angles: np.ndarray


@dataclass(frozen=True)
class InlierSet:
    indices: np.ndarray
    weights: np.ndarray
    source: np.ndarray
    target: np.ndarray

    def __len__(self):
        return len(self.indices)

    @property
    def correspondences(self):
        return list(zip(self.source, self.target))


@dataclass(frozen=True)
class InlierConfig:
    """Shapes and variants of the scoring network.

    ``angle_mode``: "anchor" gives one angle per neighbour (against the edge
    to the nearest neighbour); "all_pairs" gives K angles per neighbour.
    ``input_mode``: "geometric" (edges + angles) or "coords" (raw neighbour
    coordinates, the coordinate-based ablation).
    """

    hidden: int = 16
    feat_dim: int = 16
    attn_hidden: int = 8
    angle_mode: str = "anchor"
    input_mode: str = "geometric"
    seed: int = 1

    def __post_init__(self):
        if self.angle_mode not in ("anchor", "all_pairs"):
            raise ConfigError(f"unknown angle_mode {self.angle_mode!r}")
        if self.input_mode not in ("geometric", "coords"):
            raise ConfigError(f"unknown input_mode {self.input_mode!r}")

    def in_dim(self, K: int) -> int:
        if self.input_mode == "coords":
            return 3
        return 4 if self.angle_mode == "anchor" else 3 + K

    def layout(self, K: int) -> list[tuple[str, tuple[int, ...]]]:
        c, h, d, a = self.in_dim(K), self.hidden, self.feat_dim, self.attn_hidden
        return [("inl.theta.w1", (c, h)), ("inl.theta.b1", (h,)),
                ("inl.theta.w2", (h, d)), ("inl.theta.b2", (d,)),
                ("inl.mu.w1", (d, a)), ("inl.mu.b1", (a,)),
                ("inl.mu.w2", (a, 1)), ("inl.mu.b2", (1,)),
                ("inl.l.w", (d, 1))]

    def init_params(self, K: int) -> ParamSet:
        meta = {"inl.hidden": str(self.hidden), "inl.feat_dim": str(self.feat_dim),
                "inl.attn_hidden": str(self.attn_hidden), "inl.angle_mode": self.angle_mode,
                "inl.input_mode": self.input_mode, "inl.seed": str(self.seed), "inl.K": str(K)}
        return ParamSet(init_layout(self.layout(K), np.random.default_rng(self.seed)), meta)


# --------------------------------------------------------------------- numpy

def angle(u, v) -> float:
    """atan2(|u x v|, u . v): robust near 0 and pi; 0 if either vector is zero."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    return float(np.arctan2(np.linalg.norm(np.cross(u, v)), np.dot(u, v)))


def geometric_repr(center, neighbors) -> GeometricRepr:
    center = np.asarray(center, dtype=np.float64).reshape(3)
    nb = np.asarray(neighbors, dtype=np.float64).reshape(-1, 3)
    if nb.shape[0] < 2:
        raise SizeError("geometric representation needs at least 2 neighbours")
    edges = center - nb
    angles = np.array([angle(e, edges[0]) for e in edges])
    return GeometricRepr(edges, np.linalg.norm(edges, axis=1), angles)


# --------------------------------------------------------------------- graph

def angle_graph(u, v) -> ad.Var:
    u, v = ad.const(u), ad.const(v)
    return ad.atan2(ad.norm(ad.cross(u, v), axis=-1), ad.sum(u * v, axis=-1))


def neighborhood_repr(points, neighbors: np.ndarray, angle_mode: str = "anchor"):
    """Edges (N,K,3) and angles (N,K) or (N,K,K) for every point."""
    points = ad.const(points)
    n, K = neighbors.shape
    edges = ad.reshape(points, (n, 1, 3)) - ad.take(points, neighbors)
    if angle_mode == "anchor":
        anchor = ad.reshape(ad.take(edges, (slice(None), 0)), (n, 1, 3))
        angles = angle_graph(edges, anchor + ad.const(np.zeros((1, K, 1))))
    else:
        ek = ad.reshape(edges, (n, K, 1, 3)) + ad.const(np.zeros((1, 1, K, 1)))
        es = ad.reshape(edges, (n, 1, K, 3)) + ad.const(np.zeros((1, K, 1, 1)))
        angles = angle_graph(ek, es)
    return edges, angles


def _mlp2(x, w, prefix):
    h = ad.leaky_relu(x @ w[f"{prefix}.w1"] + w[f"{prefix}.b1"], LEAKY_SLOPE)
    return h @ w[f"{prefix}.w2"] + w[f"{prefix}.b2"]


def _branch_input(points, neighbors, config: InlierConfig):
    if config.input_mode == "coords":
        return ad.take(ad.const(points), neighbors)
    edges, angles = neighborhood_repr(points, neighbors, config.angle_mode)
    if config.angle_mode == "anchor":
        angles = ad.reshape(angles, angles.shape + (1,))
    return ad.concat([edges, angles], axis=-1)


def consistency_graph(xp, xq, weights):
    """d = f_theta(source input) - f_theta(copy input), shared weights."""
    return _mlp2(xp, weights, "inl.theta") - _mlp2(xq, weights, "inl.theta")


def confidence_graph(d, weights):
    """Attention over neighbours and the tanh read-out; returns (w, delta)."""
    logits = _mlp2(d, weights, "inl.mu")
    delta = ad.softmax(ad.reshape(logits, logits.shape[:-1]), axis=-1)
    pooled = ad.sum(ad.reshape(delta, delta.shape + (1,)) * d, axis=-2)
    s = pooled @ weights["inl.l.w"]
    s = ad.reshape(s, s.shape[:-1])
    return 1.0 - ad.tanh(ad.abs(s)), delta


def score_graph(P, Q_tilde, neighbors: np.ndarray, weights, config: InlierConfig):
    xp = _branch_input(P, neighbors, config)
    xq = _branch_input(Q_tilde, neighbors, config)
    d = consistency_graph(xp, xq, weights)
    w, delta = confidence_graph(d, weights)
    return w, d, delta


def _weights(params: ParamSet):
    return {k: ad.const(v) for k, v in params.items()}


def consistency_features(reprP: GeometricRepr, reprQ: GeometricRepr, theta: ParamSet) -> np.ndarray:
    """Per-neighbour difference of embedded (edge, angle) rows, K x Cd."""
    if reprP.edges.shape != reprQ.edges.shape:
        raise ValueError("representations must have the same K")
    xp = np.column_stack([reprP.edges, reprP.angles])
    xq = np.column_stack([reprQ.edges, reprQ.angles])
    if theta["inl.theta.w1"].shape[0] != xp.shape[1]:
        raise ValueError("f_theta input width does not match (edge, angle) rows")
    return consistency_graph(xp, xq, _weights(theta)).value


def attention_weights(d, mu: ParamSet) -> np.ndarray:
    logits = _mlp2(ad.const(d), _weights(mu), "inl.mu").value[:, 0]
    return ad.softmax(logits, axis=-1).value


def inlier_confidence(d, delta, l_weight) -> float:
    d = np.asarray(d, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    lw = np.asarray(l_weight, dtype=np.float64).reshape(-1)
    return float(1.0 - np.tanh(abs(float((delta @ d) @ lw))))


@dataclass
class ScoreTape:
    weights: ad.Var
    P: ad.Var
    Q_tilde: ad.Var
    leaves: dict = field(default_factory=dict)
    d: ad.Var | None = None
    delta: ad.Var | None = None


def score_all(P, Q_tilde, idxP: NeighborhoodIndex, params: ParamSet,
              config: InlierConfig | None = None) -> tuple[np.ndarray, ScoreTape]:
    """Confidence ``w_i`` for every source point, plus the tape for gradients."""
    config = config or InlierConfig()
    params.check_layout(config.layout(idxP.K))
    q = Q_tilde.points if hasattr(Q_tilde, "points") and not isinstance(Q_tilde, PointCloud) else Q_tilde
    p_leaf = ad.leaf(as_points(P), "P")
    q_leaf = ad.leaf(as_points(q), "Q_tilde")
    if p_leaf.shape != q_leaf.shape:
        raise ValueError("source and reference copy must have the same size")
    leaves = {k: ad.leaf(v, k) for k, v in params.items()}
    w, d, delta = score_graph(p_leaf, q_leaf, np.asarray(idxP.neighbors), leaves, config)
    return w.value.copy(), ScoreTape(w, p_leaf, q_leaf, leaves, d, delta)


def score_backward(tape: ScoreTape, d_w) -> tuple[ParamSet, np.ndarray, np.ndarray]:
    names = list(tape.leaves)
    g = ad.grad(tape.weights, [tape.leaves[k] for k in names] + [tape.P, tape.Q_tilde], d_w)
    return ParamSet(dict(zip(names, g[:-2]))), g[-2], g[-1]


def top_k_indices(weights, n_c: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if n_c > w.shape[0]:
        raise SizeError(f"cannot select {n_c} inliers from {w.shape[0]} points")
    if n_c < 1:
        raise SizeError("need at least one inlier")
    return np.argsort(-w, kind="stable")[:n_c]


def select_inliers(weights, P, Q_tilde, n_c: int) -> InlierSet:
    """The ``n_c`` most confident correspondences, highest weight first."""
    idx = top_k_indices(weights, n_c)
    w = np.asarray(weights, dtype=np.float64)
    q = Q_tilde.points if not isinstance(Q_tilde, (PointCloud, np.ndarray)) else Q_tilde
    return InlierSet(idx, w[idx].copy(), as_points(P)[idx].copy(), as_points(q)[idx].copy())
