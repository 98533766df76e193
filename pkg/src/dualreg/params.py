"""Named parameter tensors, seeded initialisation and the checkpoint format.

Checkpoint grammar (UTF-8 text, one record per line)::

    dualreg-params 1
    meta <key> <value>              # zero or more, e.g. "meta K_feat 8"
    tensor <name> <d0>x<d1>...      # shape; scalars use "scalar"
    <float>                         # prod(shape) lines, row-major, repr() form
    ...
    end

Floats are written with ``repr``, which round-trips float64 exactly, so a
save/load cycle is bit-identical.  Lines starting with '#' are ignored.
"""
from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = "dualreg-params 1"


class ConfigError(ValueError):
    """Raised when parameters or configuration do not fit together."""


class ParamSet:
    """Ordered mapping name -> float64 array, with a flat-vector view."""

    def __init__(self, tensors=None, meta=None):
        self.tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in (tensors or {}).items():
            self.tensors[name] = np.array(arr, dtype=np.float64)
        self.meta: dict[str, str] = dict(meta or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.tensors.items()]

    @property
    def n_scalars(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def flat(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def with_flat(self, vec) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_scalars:
            raise ConfigError(f"flat vector has {vec.size} entries, layout needs {self.n_scalars}")
        out, pos = OrderedDict(), 0
        for k, v in self.tensors.items():
            out[k] = vec[pos:pos + v.size].reshape(v.shape).copy()
            pos += v.size
        return ParamSet(out, self.meta)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()}, self.meta)

    def merged(self, other: "ParamSet") -> "ParamSet":
        clash = set(self.tensors) & set(other.tensors)
        if clash:
            raise ConfigError(f"duplicate parameter names: {sorted(clash)}")
        out = ParamSet(self.tensors, {**self.meta, **other.meta})
        out.tensors.update({k: v.copy() for k, v in other.tensors.items()})
        return out

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet({k: v for k, v in self.tensors.items() if k.startswith(prefix)}, self.meta)

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self.tensors.items()}, self.meta)

    def check_layout(self, layout) -> None:
        want = [(k, tuple(s)) for k, s in layout]
        if self.layout != want:
            raise ConfigError(f"parameter layout mismatch: expected {want}, got {self.layout}")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def mlp_layout(prefix: str, widths: list[int], bias: bool = True) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        out.append((f"{prefix}.{i}.weight", (a, b)))
        if bias:
            out.append((f"{prefix}.{i}.bias", (b,)))
    return out


def init_layout(layout, rng: np.random.Generator) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for name, shape in layout:
        if len(shape) == 1:
            out[name] = np.zeros(shape)
        else:
            out[name] = glorot_uniform(rng, shape[0], shape[1])
    return out


def save_params(params: ParamSet, path) -> None:
    lines = [MAGIC]
    for k, v in sorted(params.meta.items()):
        lines.append(f"meta {k} {v}")
    for name, arr in params.items():
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"tensor {name} {shape}")
        lines.extend(repr(float(x)) for x in arr.ravel())
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


class CheckpointError(ValueError):
    pass


def load_params(path) -> ParamSet:
    raw = Path(path).read_text().splitlines()
    lines = [(n + 1, ln.strip()) for n, ln in enumerate(raw)
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines or lines[0][1] != MAGIC:
        raise CheckpointError(f"{path}: line 1: expected header {MAGIC!r}")
    tensors, meta = OrderedDict(), {}
    pos, ended = 1, False
    while pos < len(lines):
        lineno, text = lines[pos]
        head = text.split()
        if head[0] == "end":
            ended = True
            break
        if head[0] == "meta" and len(head) >= 3:
            meta[head[1]] = " ".join(head[2:])
            pos += 1
        elif head[0] == "tensor" and len(head) == 3:
            shape = () if head[2] == "scalar" else tuple(int(d) for d in head[2].split("x"))
            n = int(np.prod(shape)) if shape else 1
            body = lines[pos + 1:pos + 1 + n]
            if len(body) < n:
                raise CheckpointError(f"{path}: line {lineno}: tensor {head[1]} truncated")
            try:
                vals = np.array([float(t) for _, t in body])
            except ValueError as exc:
                raise CheckpointError(f"{path}: line {body[0][0]}: bad float ({exc})") from None
            tensors[head[1]] = vals.reshape(shape)
            pos += 1 + n
        else:
            raise CheckpointError(f"{path}: line {lineno}: unexpected record {text!r}")
    if not ended:
        raise CheckpointError(f"{path}: missing 'end' record")
    return ParamSet(tensors, meta)
