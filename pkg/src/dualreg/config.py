"""Flat ``key = value`` run configuration.

Grammar: one ``key = value`` per line; text after ``#`` is a comment; blank
lines are ignored; a key given twice keeps the later value.  Command-line
``key=value`` overrides are applied on top in the same way.

Keys (defaults in brackets come from the dataclasses)::

    K n_iter alpha dual normalization inlier_ratio stop_gradient_svd
    features.{backend,layer_widths,K_feat,seed,input,use_center,handcrafted_gain}
    inlier.{hidden,feat_dim,attn_hidden,angle_mode,input_mode,seed}
    train.{gamma,rho,lam,huber_beta,learning_rate,momentum,steps,seed,
           use_gc,use_in,use_gs,use_sc,freeze_features,freeze_inlier,grad_clip}
    data.{n_points,rot_range_deg,trans_range,keep_fraction,noise_sigma,
          noise_clip,seed,shapes,pairs}

Tuples are comma separated (``features.layer_widths = 32,64``), booleans
accept true/false/yes/no/1/0, and ``none`` clears an optional number.
``features.K_feat`` follows ``K`` unless set.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .data import SHAPES, PairSpec
from .features import ExtractorConfig
from .inlier import InlierConfig
from .params import ConfigError
from .registration import PipelineConfig
from .training import TrainConfig

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}

# optional fields whose default is None, with the type used when set
_OPTIONAL = {"grad_clip": float}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        out[key] = value
    return out


def _coerce(key: str, name: str, text: str, default):
    try:
        if name in _OPTIONAL:
            return None if text.lower() == "none" else _OPTIONAL[name](text)
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else int
            return tuple(kind(p) for p in text.split(",") if p.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _build(cls, prefix: str, values: dict[str, str], used: set, **fixed):
    kwargs = dict(fixed)
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in values and f.name not in fixed:
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            kwargs[f.name] = _coerce(key, f.name, values[key], default)
            used.add(key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'pipeline '}settings: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pair: PairSpec = field(default_factory=PairSpec)
    shapes: tuple[str, ...] = ("torus", "box-frame", "helix", "two-planes", "bunny-like-composite")
    pairs: int = 20

    def to_text(self) -> str:
        """Canonical dump, readable back by :func:`load_config`."""
        lines = []

        def dump(prefix, obj, skip=()):
            for f in dataclasses.fields(obj):
                if f.name in skip:
                    continue
                v = getattr(obj, f.name)
                if isinstance(v, bool):
                    s = "true" if v else "false"
                elif isinstance(v, tuple):
                    s = ",".join(repr(x) for x in v)
                elif v is None:
                    s = "none"
                else:
                    s = repr(v) if isinstance(v, float) else str(v)
                lines.append(f"{prefix}{f.name} = {s}")

        dump("", self.pipeline, skip=("features", "inlier"))
        dump("features.", self.pipeline.features)
        dump("inlier.", self.pipeline.inlier)
        dump("train.", self.train)
        dump("data.", self.pair)
        lines.append(f"data.shapes = {','.join(self.shapes)}")
        lines.append(f"data.pairs = {self.pairs}")
        return "\n".join(lines) + "\n"


def build_run_config(values: dict[str, str]) -> RunConfig:
    used: set[str] = set()
    K = _coerce("K", "K", values["K"], 8) if "K" in values else PipelineConfig.K
    feat_values = dict(values)
    feat_values.setdefault("features.K_feat", str(K))
    features = _build(ExtractorConfig, "features.", feat_values, used)
    inlier = _build(InlierConfig, "inlier.", values, used)
    pipeline = _build(PipelineConfig, "", values, used, features=features, inlier=inlier)
    train = _build(TrainConfig, "train.", values, used)
    pair = _build(PairSpec, "data.", values, used)
    shapes = RunConfig.shapes
    if "data.shapes" in values:
        shapes = tuple(s.strip() for s in values["data.shapes"].split(",") if s.strip())
        unknown = [s for s in shapes if s not in SHAPES]
        if unknown or not shapes:
            raise ConfigError(f"data.shapes: unknown shape(s) {unknown}; choose from {', '.join(SHAPES)}")
        used.add("data.shapes")
    pairs = RunConfig.pairs
    if "data.pairs" in values:
        pairs = _coerce("data.pairs", "pairs", values["data.pairs"], 0)
        if pairs < 1:
            raise ConfigError("data.pairs must be positive")
        used.add("data.pairs")
    used.add("features.K_feat")
    unknown = sorted(set(values) - used)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return RunConfig(pipeline, train, pair, shapes, pairs)


def load_config(path=None, overrides=None, base: dict[str, str] | None = None) -> RunConfig:
    """File values (if any), then ``base`` defaults underneath, then overrides on top."""
    values = dict(base or {})
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(path)))
    values.update(parse_overrides(overrides))
    return build_run_config(values)
