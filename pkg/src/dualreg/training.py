"""Unsupervised losses, the training step and finite-difference gradient checks.

Four terms are computed per registration iteration and summed with trade-off
weights::

    total = sum_l  gc_l + gamma * in_l + rho * gs_l + lambda * sc_l

* ``gc``: Huber of squared nearest-neighbour distances, both directions,
  between the moved source and the reference.
* ``in``: distance between moved source neighbours of each inlier and their
  reference-copy counterparts (unsquared).
* ``gs``: edge and anchor-angle differences of those neighbourhoods.
* ``sc``: cross-entropy pushing each inlier's fused score row towards its
  own argmax (rows are normalised to sum to one first).

Nearest neighbours inside ``gc``, the top-k inlier choice and the argmax in
``sc`` are recomputed on every evaluation and treated as constants.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .geometry import NeighborhoodIndex, RigidTransform, as_points
from .inlier import InlierSet, neighborhood_repr
from .params import ConfigError, ParamSet
from .registration import IterationRecord, PipelineConfig, forward
from .solver import DegenerateSpectrumError, _solve, spectrum_problem

LOSS_NAMES = ("gc", "in", "gs", "sc")
SC_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 1.0
    rho: float = 0.1
    lam: float = 0.1
    huber_beta: float = 1.0
    learning_rate: float = 1e-3
    momentum: float = 0.9
    steps: int = 200
    seed: int = 0
    use_gc: bool = True
    use_in: bool = True
    use_gs: bool = True
    use_sc: bool = True
    freeze_features: bool = False
    freeze_inlier: bool = False
    grad_clip: float | None = None

    def __post_init__(self):
        for name in ("gamma", "rho", "lam"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"trade-off {name} must be finite and non-negative")
        if not self.huber_beta > 0:
            raise ConfigError("huber_beta must be positive")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be finite and non-negative")

    def coefficients(self) -> dict[str, float]:
        return {"gc": 1.0 if self.use_gc else 0.0,
                "in": self.gamma if self.use_in else 0.0,
                "gs": self.rho if self.use_gs else 0.0,
                "sc": self.lam if self.use_sc else 0.0}


@dataclass
class LossBreakdown:
    l_gc: float
    l_in: float
    l_gs: float
    l_sc: float
    total: float
    per_iteration: list[dict[str, float]] = field(default_factory=list)


# --------------------------------------------------------------- graph terms

def gc_graph(P_moved, Q, beta: float) -> ad.Var:
    P_moved = ad.const(P_moved)
    q = as_points(Q)
    p = P_moved.value
    _, nn_pq = cKDTree(q).query(p)
    _, nn_qp = cKDTree(p).query(q)
    d1 = ad.sum(ad.square(P_moved - q[nn_pq]), axis=1)
    d2 = ad.sum(ad.square(ad.const(q) - ad.take(P_moved, nn_qp)), axis=1)
    return ad.sum(ad.huber(d1, beta)) + ad.sum(ad.huber(d2, beta))


def in_graph(P, Q_tilde, neighbors: np.ndarray, inliers: np.ndarray, R, t) -> ad.Var:
    nb = neighbors[inliers]                                    # Nc x K
    p = ad.take(ad.const(P), nb)
    q = ad.take(ad.const(Q_tilde), nb)
    moved = p @ ad.transpose(ad.const(R)) + t
    return ad.sum(ad.norm(moved - q, axis=-1))


def gs_graph(P, Q_tilde, neighbors: np.ndarray, inliers: np.ndarray) -> ad.Var:
    ep, ap = neighborhood_repr(P, neighbors, "anchor")
    eq, aq = neighborhood_repr(Q_tilde, neighbors, "anchor")
    edge = ad.sum(ad.norm(ad.take(ep, inliers) - ad.take(eq, inliers), axis=-1))
    ang = ad.sum(ad.abs(ad.take(ap, inliers) - ad.take(aq, inliers)))
    return edge + ang


def sc_graph(G, inliers: np.ndarray) -> ad.Var:
    G = ad.const(G)
    rows = ad.take(G, inliers)
    gv = rows.value
    if not np.all(np.isfinite(gv)):
        raise ValueError("G has non-finite entries")
    if np.any(gv.sum(axis=1) <= 0):
        raise ValueError("G rows must have positive sums")
    jstar = np.argmax(gv, axis=1)
    norm_rows = rows / ad.sum(rows, axis=1, keepdims=True)
    picked = ad.take(norm_rows, (np.arange(len(inliers)), jstar))
    return -ad.sum(ad.log(ad.floor_min(picked, SC_FLOOR))) / float(len(inliers))


def iteration_terms(rec: IterationRecord, Q, beta: float) -> dict[str, ad.Var]:
    nb = np.asarray(rec.idxP.neighbors)
    return {"gc": gc_graph(rec.P_next, Q, beta),
            "in": in_graph(rec.P, rec.Q_tilde, nb, rec.inliers, rec.R, rec.t),
            "gs": gs_graph(rec.P, rec.Q_tilde, nb, rec.inliers),
            "sc": sc_graph(rec.G, rec.inliers)}


# ---------------------------------------------------------- public numpy API

def _pts(x):
    return x.points.points if hasattr(x, "points") and hasattr(x.points, "points") else as_points(x)


def loss_global_consistency(P_prime, Q, beta: float = 1.0) -> float:
    return float(gc_graph(as_points(P_prime), Q, beta).value)


def loss_inlier_neighborhood(inliers: InlierSet, T_est: RigidTransform, idxP: NeighborhoodIndex,
                             Q_tilde, P=None) -> float:
    """Sum over inliers and their source neighbours of |R p_j + t - q~_j|.

    ``P`` defaults to the cloud the index was built from.
    """
    P = idxP.owner if P is None else P
    if P is None:
        raise ValueError("pass P or build the index from a PointCloud")
    return float(in_graph(as_points(P), _pts(Q_tilde), np.asarray(idxP.neighbors),
                          np.asarray(inliers.indices), T_est.R, T_est.t).value)


def loss_geometric_structure(inliers: InlierSet, idxP: NeighborhoodIndex, P, Q_tilde) -> float:
    return float(gs_graph(as_points(P), _pts(Q_tilde), np.asarray(idxP.neighbors),
                          np.asarray(getattr(inliers, "indices", inliers))).value)


def loss_spatial_consistency(G, inlier_indices) -> float:
    return float(sc_graph(np.asarray(G, dtype=np.float64), np.asarray(inlier_indices)).value)


def total_loss(per_iteration_terms, gamma: float = 1.0, rho: float = 0.1,
               lam: float = 0.1) -> LossBreakdown:
    """Weighted sum over iterations; each item maps 'gc','in','gs','sc' to floats."""
    if min(gamma, rho, lam) < 0:
        raise ConfigError("trade-off parameters must be non-negative")
    if len(per_iteration_terms) < 1:
        raise ValueError("need at least one iteration of loss terms")
    terms = [{k: float(it[k]) for k in LOSS_NAMES} for it in per_iteration_terms]
    sums = {k: math.fsum(it[k] for it in terms) for k in LOSS_NAMES}
    total = math.fsum(it["gc"] + gamma * it["in"] + rho * it["gs"] + lam * it["sc"] for it in terms)
    return LossBreakdown(sums["gc"], sums["in"], sums["gs"], sums["sc"], total, terms)


# ------------------------------------------------------------------ training

def _trainable(params: ParamSet, tcfg: TrainConfig) -> list[str]:
    names = []
    for k in params.names():
        if k.startswith("feat.") and tcfg.freeze_features:
            continue
        if k.startswith("inl.") and tcfg.freeze_inlier:
            continue
        names.append(k)
    return names


def loss_and_grad(P, Q, params: ParamSet, pcfg: PipelineConfig, tcfg: TrainConfig,
                  want_grad: bool = True, fault: str | None = None):
    """Total loss breakdown and (optionally) gradients of every trainable tensor.

    ``fault`` names a tensor whose analytic gradient is sign-flipped; used
    only to prove that :func:`grad_check` catches a broken backward path.
    """
    names = _trainable(params, tcfg) if want_grad else []
    leaves = {k: (ad.leaf(v, k) if k in names else ad.const(v)) for k, v in params.items()}
    records = forward(as_points(P), as_points(Q), params, pcfg, weights=leaves)
    coef = tcfg.coefficients()
    per_it, total = [], None
    for rec in records:
        terms = iteration_terms(rec, Q, tcfg.huber_beta)
        per_it.append({k: float(v.value) for k, v in terms.items()})
        for k, v in terms.items():
            if coef[k] == 0.0:
                continue
            piece = v * coef[k]
            total = piece if total is None else total + piece
    bd = total_loss(per_it, coef["in"], coef["gs"], coef["sc"])
    bd.total = math.fsum(coef[k] * it[k] for it in per_it for k in LOSS_NAMES)
    grads = ParamSet({k: np.zeros_like(v) for k, v in params.items() if k in names})
    if want_grad and names and total is not None:
        if not pcfg.stop_gradient_svd:
            for it, rec in enumerate(records):
                inl = rec.inliers
                tape = _solve(rec.P.value[inl], rec.Q_tilde.value[inl], rec.w.value[inl])[2]
                problem = spectrum_problem(tape.S, tape.d)
                if problem:
                    raise DegenerateSpectrumError(
                        f"iteration {it}: {problem}; enable stop_gradient_svd")
        g = ad.grad(total, [leaves[k] for k in names])
        for k, gk in zip(names, g):
            grads.tensors[k] = -gk if k == fault else gk
    return bd, grads


@dataclass
class OptimizerState:
    velocity: ParamSet
    step: int = 0


def train_step(P, Q, params: ParamSet, pcfg: PipelineConfig, tcfg: TrainConfig,
               state: OptimizerState | None = None):
    """One momentum-SGD update; returns (new params, breakdown, state, grad norm)."""
    bd, grads = loss_and_grad(P, Q, params, pcfg, tcfg)
    if state is None:
        state = OptimizerState(params.zeros_like())
    gnorm = float(np.sqrt(sum(float((g * g).sum()) for _, g in grads.items())))
    scale = 1.0
    if tcfg.grad_clip is not None and gnorm > tcfg.grad_clip:
        scale = tcfg.grad_clip / gnorm
    new = params.copy()
    for k, g in grads.items():
        v = tcfg.momentum * state.velocity[k] + scale * g
        state.velocity.tensors[k] = v
        new.tensors[k] = params[k] - tcfg.learning_rate * v
    state.step += 1
    return new, bd, state, gnorm


LOG_HEADER = "step\tpair\tl_gc\tl_in\tl_gs\tl_sc\ttotal\tgrad_norm"


def format_log_line(step: int, pair: int, bd: LossBreakdown, gnorm: float) -> str:
    vals = [bd.l_gc, bd.l_in, bd.l_gs, bd.l_sc, bd.total, gnorm]
    return "\t".join([str(step), str(pair)] + [repr(float(v)) for v in vals])


def train(pairs, params: ParamSet, pcfg: PipelineConfig, tcfg: TrainConfig, log=None):
    """Run ``tcfg.steps`` updates.

    ``pairs`` is either a sequence of (P, Q), cycled through, or a callable
    ``step -> (P, Q)`` producing a fresh pair per step.  ``log`` is an
    optional writable text stream receiving the tab-separated log (header
    plus one line per step).  A pair whose SVD spectrum has no defined
    gradient is logged as skipped and leaves the parameters unchanged.
    Returns (params, list of totals of the completed steps).
    """
    state = None
    totals = []
    if log is not None:
        log.write(LOG_HEADER + "\n")
    for step in range(tcfg.steps):
        if callable(pairs):
            k = step
            P, Q = pairs(step)
        else:
            k = step % len(pairs)
            P, Q = pairs[k]
        try:
            params, bd, state, gnorm = train_step(P, Q, params, pcfg, tcfg, state)
        except DegenerateSpectrumError as exc:
            # no usable gradient for this pair; leave parameters and momentum alone
            if log is not None:
                log.write(f"{step}\t{k}\tskipped: {exc}\n")
            continue
        totals.append(bd.total)
        if log is not None:
            log.write(format_log_line(step, k, bd, gnorm) + "\n")
    return params, totals


# ----------------------------------------------------------------- gradcheck

@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float
    h: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def failed_tensors(self) -> list[str]:
        return sorted({e.name for e in self.entries if not e.passed})

    def max_error(self, name: str | None = None) -> float:
        errs = [e.rel_error for e in self.entries if name is None or e.name == name]
        return max(errs) if errs else 0.0

    def to_json(self) -> str:
        return json.dumps({"passed": self.passed, "tolerance": self.tolerance, "h": self.h,
                           "entries": [{"name": e.name, "index": list(e.index),
                                        "analytic": e.analytic, "numeric": e.numeric,
                                        "rel_error": e.rel_error, "passed": e.passed}
                                       for e in self.entries]}, indent=1)

    def to_text(self) -> str:
        lines = [f"{'tensor':<18} {'entries':>7} {'max rel err':>12}  status"]
        for name in dict.fromkeys(e.name for e in self.entries):
            sub = [e for e in self.entries if e.name == name]
            ok = all(e.passed for e in sub)
            lines.append(f"{name:<18} {len(sub):>7} {max(e.rel_error for e in sub):>12.3e}  "
                         f"{'pass' if ok else 'FAIL'}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} "
                     f"({len(self.entries)} entries, tol {self.tolerance:g}, h {self.h:g})")
        return "\n".join(lines)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(P, Q, params: ParamSet, pcfg: PipelineConfig, tcfg: TrainConfig,
               h: float = 1e-5, tolerance: float = 1e-4, names=None,
               fault: str | None = None, max_entries_per_tensor: int | None = None,
               floor: float | None = None) -> GradCheckReport:
    """Compare analytic gradients of the total loss with central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  By default the
    floor sits where the rounding noise of a central difference,
    about ``eps * |loss| / h``, would alone use up a tenth of the tolerance,
    so entries that are zero up to that noise are not judged on it.
    """
    bd0, grads = loss_and_grad(P, Q, params, pcfg, tcfg, fault=fault)
    if floor is None:
        noise = np.finfo(float).eps * max(abs(bd0.total), 1.0) / h
        floor = max(1e-6, 10.0 * noise / tolerance)
    names = list(grads.names()) if names is None else [n for n in names if n in grads]
    entries = []
    for name in names:
        base = params[name]
        idxs = list(np.ndindex(base.shape))
        if max_entries_per_tensor is not None and len(idxs) > max_entries_per_tensor:
            pick = np.linspace(0, len(idxs) - 1, max_entries_per_tensor).round().astype(int)
            idxs = [idxs[i] for i in pick]
        for ix in idxs:
            vals = []
            for sgn in (1.0, -1.0):
                trial = params.copy()
                trial.tensors[name][ix] += sgn * h
                bd, _ = loss_and_grad(P, Q, trial, pcfg, tcfg, want_grad=False)
                vals.append(bd.total)
            num = (vals[0] - vals[1]) / (2 * h)
            ana = float(grads[name][ix])
            err = relative_error(ana, num, floor)
            entries.append(GradCheckEntry(name, tuple(int(i) for i in ix), ana, float(num),
                                          float(err), bool(err < tolerance)))
    return GradCheckReport(entries, tolerance, h)


def config_hash(*objs) -> str:
    blob = json.dumps([asdict(o) if hasattr(o, "__dataclass_fields__") else o for o in objs],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
