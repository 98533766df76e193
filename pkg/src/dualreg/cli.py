"""Command-line entry point: ``dualreg <command> ...``.

Exit status is 0 on success, 2 for usage errors (bad flags, unknown keys or
shapes, unreadable config) and 1 for runtime failures (unreadable or
malformed inputs, degenerate registrations, failed gradient checks).
"""
from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import io
from .bench import run_bench, write_bench
from .config import RunConfig, load_config, parse_config_text
from .data import PairSpec, UsageError, builtin_shapes, make_pair, pair_stream, seeded_pair
from .features import ExtractorConfig
from .geometry import compute_metrics, geodesic_angle_deg
from .matching import write_map
from .params import CheckpointError, ConfigError, ParamSet, load_params, save_params
from .registration import PipelineConfig, RegistrationError, register
from .solver import DegenerateSpectrumError
from .training import TrainConfig, grad_check, train

BUNDLED_CHECKPOINT = "toy.ckpt"
_PIPELINE_PREFIXES = ("features.", "inlier.")
_PIPELINE_KEYS = {"K", "n_iter", "alpha", "dual", "normalization", "inlier_ratio",
                  "stop_gradient_svd"}


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _Usage(f"{self.prog}: {message}")


def bundled_checkpoint_path() -> Path:
    return Path(str(resources.files("dualreg") / "resources" / BUNDLED_CHECKPOINT))


def _config_meta(cfg: RunConfig) -> dict[str, str]:
    out = {}
    for key, value in parse_config_text(cfg.to_text()).items():
        out["cfg." + key] = value
    return out


def _checkpoint_values(params: ParamSet) -> dict[str, str]:
    """Pipeline settings stored with a checkpoint."""
    vals = {k[4:]: v for k, v in params.meta.items() if k.startswith("cfg.")}
    return {k: v for k, v in vals.items()
            if k in _PIPELINE_KEYS or k.startswith(_PIPELINE_PREFIXES)}


def _model(args) -> tuple[ParamSet | None, dict[str, str]]:
    if getattr(args, "handcrafted", False):
        return None, {"features.backend": "handcrafted"}
    path = args.checkpoint or bundled_checkpoint_path()
    params = load_params(path)
    return params, _checkpoint_values(params)


def _with_handcrafted(cfg: RunConfig, params):
    if params is None and cfg.pipeline.features.backend != "handcrafted":
        raise ConfigError("handcrafted mode needs features.backend = handcrafted")
    if params is None:
        # the inlier network still needs weights; use its seeded initialisation
        return cfg.pipeline.init_params()
    return params


def _add_config_args(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def _add_model_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--checkpoint", help="trained parameters (default: bundled toy checkpoint)")
    g.add_argument("--handcrafted", action="store_true",
                   help="use the invariant handcrafted descriptor instead of a network")


# ------------------------------------------------------------------ commands

def cmd_generate(args, out, err) -> int:
    cfg = load_config(args.config, args.set)
    shapes = [args.shape] if args.shape else list(cfg.shapes)
    pair = seeded_pair(shapes, cfg.pair, cfg.pair.seed, args.index)
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    ext = "ply" if args.format == "ply-ascii" else "xyz"
    io.write_point_cloud(d / f"source.{ext}", pair.P, args.format)
    io.write_point_cloud(d / f"reference.{ext}", pair.Q, args.format)
    io.write_transform(d / "T_gt.txt", pair.T_gt)
    info = (f"shape {shapes[args.index % len(shapes)]}\nindex {args.index}\n"
            f"source_points {pair.P.size}\nreference_points {pair.Q.size}\n"
            f"overlap {pair.overlap!r}\n")
    (d / "pair.txt").write_text(info)
    out.write(info)
    return 0


def cmd_train(args, out, err) -> int:
    cfg = load_config(args.config, args.set)
    params = cfg.pipeline.init_params()
    if not len(params):
        raise ConfigError("nothing to train: the configured model has no parameters")
    stream = pair_stream(cfg.shapes, cfg.pair, cfg.train.seed)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log")
    with open(log_path, "w") as log:
        params, totals = train(stream, params, cfg.pipeline, cfg.train, log)
    meta = dict(params.meta)
    meta.update(_config_meta(cfg))
    save_params(ParamSet(params.tensors, meta), args.out)
    out.write(f"trained {cfg.train.steps} steps; first total {totals[0]!r}, "
              f"last total {totals[-1]!r}\ncheckpoint {args.out}\nlog {log_path}\n")
    return 0


def _report(res) -> str:
    lines = ["iteration\tinliers\tresidual\tmean_confidence\tmean_max_F\tstep_rot_deg\tstep_trans"]
    for k, it in enumerate(res.per_iteration):
        T = it.transform
        lines.append("\t".join([str(k), str(len(it.inliers)), repr(it.residual),
                                repr(it.mean_confidence), repr(it.max_F),
                                repr(geodesic_angle_deg(T.R, np.eye(3))),
                                repr(float(np.linalg.norm(T.t)))]))
    return "\n".join(lines) + "\n"


def cmd_register(args, out, err) -> int:
    P = io.read_point_cloud(args.source, args.format)
    Q = io.read_point_cloud(args.reference, args.format)
    params, base = _model(args)
    cfg = load_config(args.config, args.set, base=base)
    params = _with_handcrafted(cfg, params)
    res = register(P, Q, params, cfg.pipeline, keep_maps=bool(args.dump_map))
    text = io.format_transform(res.final_transform)
    if args.out:
        Path(args.out).write_text(text)
    else:
        out.write(text)
    report = _report(res)
    if args.report:
        Path(args.report).write_text(report)
    else:
        err.write(report)
    if args.dump_map:
        write_map(res.per_iteration[-1].F, args.dump_map)
    return 0


def cmd_eval(args, out, err) -> int:
    est = io.read_transform(args.estimate)
    gt = io.read_transform(args.truth)
    m = compute_metrics(est, gt)
    text = "".join(f"{k} {v!r}\n" for k, v in m.as_dict().items())
    if args.out:
        Path(args.out).write_text(text)
    out.write(text)
    return 0


def micro_instance(seed: int = 3):
    """The default gradient-check instance: N = M = 8, K = 3, one iteration."""
    cfg = PipelineConfig(K=3, n_iter=1, features=ExtractorConfig(K_feat=3, layer_widths=(4, 4)))
    pair = make_pair(builtin_shapes("bunny-like-composite", 64, 0),
                     PairSpec(n_points=8, keep_fraction=1.0, seed=seed))
    return pair, cfg


def cmd_gradcheck(args, out, err) -> int:
    pair, cfg = micro_instance(args.seed)
    params = cfg.init_params()
    rep = grad_check(pair.P, pair.Q, params, cfg, TrainConfig(), h=args.h, tolerance=args.tolerance)
    out.write((rep.to_json() if args.json else rep.to_text()) + "\n")
    return 0 if rep.passed else 1


def cmd_bench(args, out, err) -> int:
    params, base = _model(args)
    cfg = load_config(args.config, args.set, base=base)
    params = _with_handcrafted(cfg, params)
    result = run_bench(cfg, params)
    write_bench(result, args.out)
    for line in result.log:
        out.write(line + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualreg", description="Unsupervised point-cloud registration at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic source/reference pair and T_gt")
    _add_config_args(g)
    g.add_argument("--shape", help="builtin shape (default: cycle through data.shapes)")
    g.add_argument("--index", type=int, default=0, help="pair index within the seeded stream")
    g.add_argument("--format", choices=io.FORMATS, default="xyz-text")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the toy network and write a checkpoint")
    _add_config_args(t)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log path (default: checkpoint path with .log)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="estimate the transform taking SOURCE onto REFERENCE")
    r.add_argument("source")
    r.add_argument("reference")
    _add_config_args(r)
    _add_model_args(r)
    r.add_argument("--format", choices=io.FORMATS, help="input format (default: by suffix)")
    r.add_argument("--out", help="transform file (default: stdout)")
    r.add_argument("--report", help="per-iteration report file (default: stderr)")
    r.add_argument("--dump-map", help="write the final matching map F to this file")
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("eval", help="compare an estimated transform with the ground truth")
    e.add_argument("--estimate", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", help="also write the metrics here")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check on the micro instance")
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=3)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="seeded benchmark over data.pairs synthetic pairs")
    _add_config_args(b)
    _add_model_args(b)
    b.add_argument("--out", required=True, help="output directory")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except _Usage as exc:
        err.write(f"{exc}\n")
        return 2
    try:
        return args.func(args, out, err)
    except (ConfigError, UsageError) as exc:
        err.write(f"dualreg {args.command}: usage error: {exc}\n")
        return 2
    except (io.ParseError, CheckpointError, RegistrationError, DegenerateSpectrumError,
            OSError, ValueError) as exc:
        err.write(f"dualreg {args.command}: error: {exc}\n")
        return 1


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
