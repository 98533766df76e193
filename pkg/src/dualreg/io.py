"""Point-cloud and transform files.

xyz-text
    One point per line, ``x y z`` or ``x y z nx ny nz``, whitespace separated.
    Blank lines and lines starting with ``#`` are skipped.  Values are
    written with 17 significant digits, so a write/read cycle is bit exact.

ply-ascii
    ``ply`` / ``format ascii 1.0`` / optional ``comment`` and ``obj_info``
    lines / ``element vertex N`` followed by scalar ``property`` lines that
    must include x, y and z (nx, ny, nz are picked up when present, other
    scalar properties are read and dropped) / ``end_header`` / N data rows.
    Binary formats, list properties and non-empty elements other than
    ``vertex`` are rejected as unsupported.

transform
    Four lines of four numbers: the row-major homogeneous 4x4 matrix.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud, RigidTransform

FORMATS = ("xyz-text", "ply-ascii")
_PLY_SCALARS = {"char", "uchar", "short", "ushort", "int", "uint", "float", "double",
                "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64"}


class ParseError(ValueError):
    """Malformed file; ``line`` is 1-based or None when not tied to a line."""

    def __init__(self, msg: str, path=None, line: int | None = None):
        where = f"{path}:" if path is not None else ""
        where += f"{line}: " if line is not None else (" " if where else "")
        super().__init__(f"{where}{msg}")
        self.path = path
        self.line = line


class UnsupportedFeatureError(ParseError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def guess_format(path) -> str:
    suffix = Path(path).suffix.lower()
    return "ply-ascii" if suffix == ".ply" else "xyz-text"


# ------------------------------------------------------------------ xyz-text

def parse_xyz(text: str, path=None) -> PointCloud:
    rows, width = [], None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 6):
            raise ParseError(f"expected 3 or 6 values, found {len(parts)}", path, lineno)
        if width is not None and len(parts) != width:
            raise ParseError(f"row has {len(parts)} values, earlier rows have {width}", path, lineno)
        width = len(parts)
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(f"not a number: {exc}", path, lineno) from None
    if not rows:
        raise ParseError("no points", path)
    arr = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ParseError("non-finite coordinate", path)
    return PointCloud(arr[:, :3], arr[:, 3:] if width == 6 else None)


def format_xyz(cloud: PointCloud) -> str:
    pts = cloud.points
    cols = pts if cloud.normals is None else np.hstack([pts, cloud.normals])
    return "".join(" ".join(_fmt(v) for v in row) + "\n" for row in cols)


# ----------------------------------------------------------------- ply-ascii

def parse_ply(text: str, path=None) -> PointCloud:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("no points", path, None if not lines else 1)
    if lines[0].strip() != "ply":
        raise ParseError("first line must be 'ply'", path, 1)
    elements = []          # [name, count, header line, [property names]]
    fmt_seen = False
    body_start = None
    for i in range(1, len(lines)):
        lineno = i + 1
        parts = lines[i].split()
        if not parts:
            continue
        key = parts[0]
        if key in ("comment", "obj_info"):
            continue
        if key == "format":
            if len(parts) != 3:
                raise ParseError("format line needs a type and a version", path, lineno)
            if parts[1] != "ascii":
                raise UnsupportedFeatureError(f"PLY format {parts[1]!r} is not supported", path, lineno)
            if parts[2] != "1.0":
                raise ParseError(f"unknown PLY version {parts[2]!r}", path, lineno)
            fmt_seen = True
        elif key == "element":
            if len(parts) != 3:
                raise ParseError("element line needs a name and a count", path, lineno)
            try:
                count = int(parts[2])
            except ValueError:
                raise ParseError(f"element count {parts[2]!r} is not an integer", path, lineno) from None
            if count < 0:
                raise ParseError("element count is negative", path, lineno)
            elements.append([parts[1], count, lineno, []])
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", path, lineno)
            if len(parts) >= 2 and parts[1] == "list":
                raise UnsupportedFeatureError("list properties are not supported", path, lineno)
            if len(parts) != 3 or parts[1] not in _PLY_SCALARS:
                raise ParseError(f"bad property line {lines[i].strip()!r}", path, lineno)
            elements[-1][3].append(parts[2])
        elif key == "end_header":
            body_start = i + 1
            break
        else:
            raise ParseError(f"unexpected header keyword {key!r}", path, lineno)
    if body_start is None:
        raise ParseError("header has no end_header", path, len(lines))
    if not fmt_seen:
        raise ParseError("header has no format line", path, 2)
    vertex = None
    for name, count, lineno, props in elements:
        if name == "vertex":
            vertex = (count, lineno, props)
        elif count > 0:
            raise UnsupportedFeatureError(f"element {name!r} is not supported", path, lineno)
    if vertex is None:
        raise ParseError("no vertex element", path)
    count, v_line, props = vertex
    missing = [c for c in "xyz" if c not in props]
    if missing:
        raise ParseError(f"vertex element lacks {', '.join(missing)}", path, v_line)

    data = [(k + 1, l) for k, l in enumerate(lines[body_start:], body_start) if l.strip()]
    if len(data) != count:
        raise ParseError(f"header declares {count} vertices but the body has {len(data)} rows",
                         path, v_line)
    if count == 0:
        raise ParseError("no points", path, v_line)
    arr = np.empty((count, len(props)))
    for r, (lineno, l) in enumerate(data):
        parts = l.split()
        if len(parts) != len(props):
            raise ParseError(f"expected {len(props)} values, found {len(parts)}", path, lineno)
        try:
            arr[r] = [float(p) for p in parts]
        except ValueError as exc:
            raise ParseError(f"not a number: {exc}", path, lineno) from None
    if not np.all(np.isfinite(arr)):
        raise ParseError("non-finite coordinate", path)
    col = {name: k for k, name in enumerate(props)}
    pts = arr[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if all(c in col for c in ("nx", "ny", "nz")):
        normals = arr[:, [col["nx"], col["ny"], col["nz"]]]
    return PointCloud(pts, normals)


def format_ply(cloud: PointCloud) -> str:
    names = ["x", "y", "z"]
    cols = cloud.points
    if cloud.normals is not None:
        names += ["nx", "ny", "nz"]
        cols = np.hstack([cols, cloud.normals])
    head = ["ply", "format ascii 1.0", f"element vertex {cloud.size}"]
    head += [f"property double {n}" for n in names]
    head.append("end_header")
    body = [" ".join(_fmt(v) for v in row) for row in cols]
    return "\n".join(head + body) + "\n"


# ---------------------------------------------------------------- file level

def read_point_cloud(path, format: str | None = None) -> PointCloud:
    format = format or guess_format(path)
    if format not in FORMATS:
        raise ValueError(f"unknown point-cloud format {format!r}")
    text = Path(path).read_text()
    return parse_ply(text, path) if format == "ply-ascii" else parse_xyz(text, path)


def write_point_cloud(path, cloud: PointCloud, format: str | None = None) -> None:
    format = format or guess_format(path)
    if format not in FORMATS:
        raise ValueError(f"unknown point-cloud format {format!r}")
    text = format_ply(cloud) if format == "ply-ascii" else format_xyz(cloud)
    Path(path).write_text(text)


def format_transform(T: RigidTransform) -> str:
    return "".join(" ".join(_fmt(v) for v in row) + "\n" for row in T.matrix())


def parse_transform(text: str, path=None) -> RigidTransform:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"expected 4 values, found {len(parts)}", path, lineno)
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(f"not a number: {exc}", path, lineno) from None
    if len(rows) != 4:
        raise ParseError(f"expected 4 rows, found {len(rows)}", path)
    try:
        return RigidTransform.from_matrix(np.array(rows))
    except ValueError as exc:
        raise ParseError(str(exc), path) from None


def read_transform(path) -> RigidTransform:
    return parse_transform(Path(path).read_text(), path)


def write_transform(path, T: RigidTransform) -> None:
    Path(path).write_text(format_transform(T))
