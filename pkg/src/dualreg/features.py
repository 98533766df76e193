"""Per-point descriptors: a fixed invariant descriptor and a toy edge-conv net.

The edge-convolution network stands in for a full dynamic-graph CNN.  Each
layer applies a shared two-layer perceptron to ``concat(x_i, x_k - x_i)`` for
every neighbour ``k`` of point ``i`` and max-pools over neighbours.  The
graph is built once from coordinates and reused by every layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import NeighborhoodIndex, PointCloud, as_points
from .params import ConfigError, ParamSet, init_layout

HANDCRAFTED_DIM = 10
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    extractor_id: str

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ExtractorConfig:
    """``backend`` is "handcrafted" or "edgeconv".

    ``input`` selects what the first edge-conv layer sees per point: raw
    coordinates ("coords") or the invariant handcrafted descriptor
    ("handcrafted"), which makes the whole network rigid-motion invariant.
    ``use_center`` drops the ``x_i`` block when False.
    ``handcrafted_gain`` scales the descriptor when it is the whole backend.
    Matching takes a softmax of negative feature distances with no
    temperature, so the raw descriptor (distances of order 0.1 on unit-scale
    clouds) gives nearly uniform maps; the gain sharpens them.
    """

    backend: str = "edgeconv"
    layer_widths: tuple[int, ...] = (32, 64)
    K_feat: int = 8
    seed: int = 0
    input: str = "coords"
    use_center: bool = True
    handcrafted_gain: float = 100.0

    def __post_init__(self):
        if self.backend not in ("handcrafted", "edgeconv"):
            raise ConfigError(f"unknown feature backend {self.backend!r}")
        if self.input not in ("coords", "handcrafted"):
            raise ConfigError(f"unknown edge-conv input {self.input!r}")
        if self.backend == "edgeconv" and not self.layer_widths:
            raise ConfigError("edgeconv needs at least one layer width")
        if any(int(w) < 1 for w in self.layer_widths):
            raise ConfigError("layer widths must be positive")
        if self.K_feat < 1:
            raise ConfigError("K_feat must be >= 1")
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))

    @property
    def in_dim(self) -> int:
        return 3 if self.input == "coords" else HANDCRAFTED_DIM

    @property
    def out_dim(self) -> int:
        if self.backend == "handcrafted":
            return HANDCRAFTED_DIM
        return self.layer_widths[-1]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.backend == "handcrafted":
            return []
        out, c = [], self.in_dim
        for ell, w in enumerate(self.layer_widths):
            fan = 2 * c if self.use_center else c
            out += [(f"feat.{ell}.w1", (fan, w)), (f"feat.{ell}.b1", (w,)),
                    (f"feat.{ell}.w2", (w, w)), (f"feat.{ell}.b2", (w,))]
            c = w
        return out

    def init_params(self) -> ParamSet:
        """Glorot-uniform weights, zero biases, seeded by ``seed``."""
        return ParamSet(init_layout(self.layout(), np.random.default_rng(self.seed)), self.meta())

    def meta(self) -> dict[str, str]:
        return {"feat.backend": self.backend,
                "feat.layer_widths": ",".join(map(str, self.layer_widths)),
                "feat.K_feat": str(self.K_feat), "feat.seed": str(self.seed),
                "feat.input": self.input, "feat.use_center": str(int(self.use_center))}


# ---------------------------------------------------------------- handcrafted

def _angle_np(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.arctan2(np.linalg.norm(np.cross(u, v), axis=-1), (u * v).sum(-1))


def extract_handcrafted(cloud, index: NeighborhoodIndex, gain: float = 1.0) -> FeatureMatrix:
    """Ten rigid-motion-invariant statistics of each point's neighbourhood.

    Columns: four nearest neighbour distances, mean and standard deviation of
    all K neighbour distances, the three angles between the first three
    neighbour offsets, and local density 1/mean distance.
    """
    pts = as_points(cloud)
    if index.K < 4:
        raise ConfigError("handcrafted descriptor needs K >= 4")
    offs = pts[index.neighbors] - pts[:, None, :]
    dist = np.linalg.norm(offs, axis=-1)
    mean = dist.mean(axis=1)
    e1, e2, e3 = offs[:, 0], offs[:, 1], offs[:, 2]
    feats = np.column_stack([
        dist[:, :4], mean, dist.std(axis=1),
        _angle_np(e1, e2), _angle_np(e1, e3), _angle_np(e2, e3),
        1.0 / np.maximum(mean, 1e-12),
    ])
    return FeatureMatrix(gain * feats, "handcrafted")


# ------------------------------------------------------------------- edgeconv

@dataclass
class ForwardTape:
    """Graph of one edge-conv forward call; single use."""

    output: ad.Var
    points: ad.Var
    leaves: dict[str, ad.Var] = field(default_factory=dict)
    used: bool = False


def edgeconv_graph(x: ad.Var, neighbors: np.ndarray, weights: dict, config: ExtractorConfig) -> ad.Var:
    """Differentiable edge-conv stack on per-point inputs ``x`` (N x c)."""
    n, K = neighbors.shape
    h = x
    for ell, w in enumerate(config.layer_widths):
        nb = ad.take(h, neighbors)                      # N x K x c
        centre = ad.reshape(h, (n, 1, h.shape[1]))
        edge = nb - centre
        if config.use_center:
            z = ad.concat([centre + ad.const(np.zeros((1, K, 1))), edge], axis=-1)
        else:
            z = edge
        a = ad.leaky_relu(z @ weights[f"feat.{ell}.w1"] + weights[f"feat.{ell}.b1"], LEAKY_SLOPE)
        a = ad.leaky_relu(a @ weights[f"feat.{ell}.w2"] + weights[f"feat.{ell}.b2"], LEAKY_SLOPE)
        h = ad.amax(a, axis=1)
    return h


def edgeconv_forward(cloud, index: NeighborhoodIndex, params: ParamSet,
                     config: ExtractorConfig | None = None, inputs=None) -> tuple[FeatureMatrix, ForwardTape]:
    """Run the edge-conv network and keep the graph for :func:`edgeconv_backward`.

    ``inputs`` overrides the per-point input features (used for the
    handcrafted-input variant); by default the coordinates are used.
    """
    config = config or ExtractorConfig()
    if index.K != config.K_feat:
        raise ConfigError(f"index K={index.K} does not match K_feat={config.K_feat}")
    params.check_layout(config.layout())
    pts = ad.leaf(as_points(cloud), "points")
    leaves = {k: ad.leaf(v, k) for k, v in params.items()}
    x = pts if inputs is None else ad.const(inputs)
    if x.shape[1] != config.in_dim:
        raise ConfigError(f"input width {x.shape[1]} != configured {config.in_dim}")
    out = edgeconv_graph(x, np.asarray(index.neighbors), leaves, config)
    return FeatureMatrix(out.value.copy(), "edgeconv"), ForwardTape(out, pts, leaves)


def edgeconv_backward(tape: ForwardTape, d_features) -> tuple[ParamSet, np.ndarray]:
    """Gradients of ``<d_features, features>`` w.r.t. parameters and points."""
    d_features = np.asarray(d_features, dtype=np.float64)
    if d_features.shape != tape.output.shape:
        raise ValueError(f"d_features shape {d_features.shape} != features {tape.output.shape}")
    if tape.used:
        raise RuntimeError("forward tape already consumed")
    tape.used = True
    names = list(tape.leaves)
    grads = ad.grad(tape.output, [tape.leaves[k] for k in names] + [tape.points], d_features)
    return ParamSet(dict(zip(names, grads[:-1]))), grads[-1]


def extract_features(cloud, index: NeighborhoodIndex, config: ExtractorConfig,
                     params: ParamSet | None = None, weights: dict | None = None):
    """Features as an autodiff node, for either backend.

    ``weights`` maps parameter names to graph nodes (so gradients reach them);
    when omitted the arrays in ``params`` are used as constants.
    """
    # invariant descriptors have zero derivative along rigid motions of the
    # cloud, so treating them as constants is exact inside the pipeline
    pts = cloud.value if isinstance(cloud, ad.Var) else as_points(cloud)
    if config.backend == "handcrafted":
        return ad.const(extract_handcrafted(pts, index, config.handcrafted_gain).values)
    if weights is None:
        weights = {k: ad.const(v) for k, v in params.items()}
    if config.input == "handcrafted":
        x = ad.const(extract_handcrafted(pts, index).values)
    else:
        x = cloud if isinstance(cloud, ad.Var) else ad.const(pts)
    return edgeconv_graph(x, np.asarray(index.neighbors), weights, config)
