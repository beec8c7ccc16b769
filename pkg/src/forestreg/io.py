"""Readers and writers for point clouds, transforms and small tabular artifacts.

Supported cloud formats:

* ``xyz``: one point per line, ``x y z`` or ``x y z intensity``; ``#`` starts a comment line.
* ``ply-ascii`` / ``ply-binary-le``: PLY 1.0 with a ``vertex`` element holding
  ``x, y, z`` and optionally ``intensity`` and ``red, green, blue``.  Other
  elements are skipped with a warning.  Binary files store coordinates as
  float32, so writing loses precision beyond ~7 significant digits.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import PointCloud, RigidTransform, ORTHO_TOL
from .errors import ParseError, SpecError, ValidationError

logger = logging.getLogger(__name__)

FORMATS = ("xyz", "ply-ascii", "ply-binary-le")

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def guess_format(path, for_write: bool = False) -> str:
    """Format from the file extension; for reading PLY, the header decides ascii vs binary."""
    suffix = Path(path).suffix.lower()
    if suffix in (".xyz", ".txt", ".asc", ".pts"):
        return "xyz"
    if suffix == ".ply":
        if for_write:
            return "ply-binary-le"
        with open(path, "rb") as fh:
            fh.readline()
            fmt = fh.readline().split()
        if len(fmt) >= 2 and fmt[1] == b"ascii":
            return "ply-ascii"
        return "ply-binary-le"
    raise ValidationError(f"cannot infer cloud format from extension {suffix!r}")


def _fmt_exact(x: float) -> str:
    return np.format_float_positional(float(x), unique=True, trim="-")


# ---------------------------------------------------------------------------
# clouds
# ---------------------------------------------------------------------------

def read_cloud(path, format: Optional[str] = None) -> PointCloud:
    fmt = format or guess_format(path)
    if fmt == "xyz":
        return _read_xyz(path)
    if fmt in ("ply-ascii", "ply-binary-le", "ply"):
        return _read_ply(path, fmt)
    raise ValidationError(f"unknown cloud format {fmt!r}; expected one of {FORMATS}")


def write_cloud(cloud: PointCloud, path, format: Optional[str] = None) -> None:
    if cloud.is_empty:
        raise ValidationError("refusing to write an empty cloud")
    fmt = format or guess_format(path, for_write=True)
    if fmt == "xyz":
        _write_xyz(cloud, path)
    elif fmt in ("ply-ascii", "ply-binary-le"):
        _write_ply(cloud, path, binary=(fmt == "ply-binary-le"))
    else:
        raise ValidationError(f"unknown cloud format {fmt!r}; expected one of {FORMATS}")


def _read_xyz(path) -> PointCloud:
    rows = []
    ncols = None
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) not in (3, 4):
                raise ParseError(f"{path}: line {lineno}: expected 3 or 4 columns, got {len(parts)}")
            if ncols is None:
                ncols = len(parts)
            elif len(parts) != ncols:
                raise ParseError(f"{path}: line {lineno}: column count changed from {ncols} to {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: not a number") from None
            if not all(np.isfinite(vals)):
                raise ParseError(f"{path}: line {lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        return PointCloud(np.empty((0, 3)))
    arr = np.array(rows, dtype=np.float64)
    return PointCloud(arr[:, :3], arr[:, 3] if ncols == 4 else None)


def _write_xyz(cloud: PointCloud, path) -> None:
    data = cloud.points
    fmt = "%.6f %.6f %.6f"
    if cloud.intensity is not None:
        data = np.column_stack([data, cloud.intensity])
        fmt += " %.6f"
    np.savetxt(path, data, fmt=fmt)


def _parse_ply_header(fh, path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise ParseError(f"{path}: byte 0: missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype) or (prop_name, ('list', count_t, item_t))])
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ParseError(f"{path}: line {lineno}: header ended without end_header")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "format":
            if len(parts) != 3 or parts[2] != "1.0":
                raise ParseError(f"{path}: line {lineno}: bad format line")
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"{path}: line {lineno}: unsupported PLY format {parts[1]!r}")
            fmt = parts[1]
        elif key == "element":
            if len(parts) != 3:
                raise ParseError(f"{path}: line {lineno}: bad element line")
            try:
                count = int(parts[2])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: bad element count") from None
            elements.append((parts[1], count, []))
        elif key == "property":
            if not elements:
                raise ParseError(f"{path}: line {lineno}: property before any element")
            if parts[1] == "list":
                if len(parts) != 5 or parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise ParseError(f"{path}: line {lineno}: bad list property")
                elements[-1][2].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise ParseError(f"{path}: line {lineno}: bad property line")
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        elif key == "end_header":
            break
        else:
            raise ParseError(f"{path}: line {lineno}: unexpected header keyword {key!r}")
    if fmt is None:
        raise ParseError(f"{path}: header has no format line")
    return fmt, elements, lineno


def _vertex_cloud(path, table: dict, where: str) -> PointCloud:
    for name in ("x", "y", "z"):
        if name not in table:
            raise ParseError(f"{path}: vertex element lacks property {name!r}")
    pts = np.column_stack([table["x"], table["y"], table["z"]]).astype(np.float64)
    finite = np.isfinite(pts).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise ParseError(f"{path}: {where(bad)}: non-finite coordinate in vertex {bad}")
    intensity = table.get("intensity")
    color = None
    if all(c in table for c in ("red", "green", "blue")):
        color = np.column_stack([table["red"], table["green"], table["blue"]])
    return PointCloud(pts, intensity, color)


def _read_ply(path, declared: str) -> PointCloud:
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _parse_ply_header(fh, path)
        if declared == "ply-ascii" and fmt != "ascii" or declared == "ply-binary-le" and fmt != "binary_little_endian":
            raise ParseError(f"{path}: declared {declared} but header says {fmt}")
        if not any(e[0] == "vertex" for e in elements):
            raise ParseError(f"{path}: no vertex element")
        if fmt == "ascii":
            return _read_ply_ascii(fh, path, elements, header_lines)
        return _read_ply_binary(fh, path, elements)


def _read_ply_ascii(fh, path, elements, header_lines) -> PointCloud:
    lineno = header_lines
    cloud = None
    for name, count, _ in elements:
        if name != "vertex":
            logger.warning("%s: skipping PLY element %r (%d entries)", path, name, count)
    for name, count, props in elements:
        rows = []
        first_line = lineno + 1
        for i in range(count):
            raw = fh.readline()
            lineno += 1
            if not raw:
                raise ParseError(f"{path}: line {lineno}: file ends after {i} of {count} {name} entries")
            if name != "vertex":
                continue
            parts = raw.split()
            if len(parts) != len(props) or any(isinstance(p[1], tuple) for p in props):
                raise ParseError(f"{path}: line {lineno}: expected {len(props)} scalar values")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: not a number") from None
        if name == "vertex":
            arr = np.array(rows, dtype=np.float64).reshape(count, len(props))
            table = {p[0]: arr[:, k] for k, p in enumerate(props)}
            cloud = _vertex_cloud(path, table, lambda i: f"line {first_line + i}")
            break
    return cloud


def _read_ply_binary(fh, path, elements) -> PointCloud:
    for name, count, _ in elements:
        if name != "vertex":
            logger.warning("%s: skipping PLY element %r (%d entries)", path, name, count)
    for name, count, props in elements:
        has_list = any(isinstance(p[1], tuple) for p in props)
        offset = fh.tell()
        if name == "vertex":
            if has_list:
                raise ParseError(f"{path}: list properties on vertex element are not supported")
            dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
            nbytes = dtype.itemsize * count
            buf = fh.read(nbytes)
            if len(buf) < nbytes:
                raise ParseError(
                    f"{path}: byte {offset + len(buf)}: truncated vertex payload "
                    f"({len(buf)} of {nbytes} bytes, {len(buf) // dtype.itemsize} of {count} vertices)"
                )
            data = np.frombuffer(buf, dtype=dtype)
            table = {p[0]: data[p[0]] for p in props}
            return _vertex_cloud(path, table, lambda i: f"byte {offset + i * dtype.itemsize}")
        if not has_list:
            size = sum(np.dtype(p[1]).itemsize for p in props) * count
            if len(fh.read(size)) < size:
                raise ParseError(f"{path}: byte {offset}: truncated {name!r} element")
            continue
        for _ in range(count):
            for _, t in props:
                if isinstance(t, tuple):
                    cnt_t, item_t = np.dtype("<" + t[1]), np.dtype("<" + t[2])
                    raw = fh.read(cnt_t.itemsize)
                    if len(raw) < cnt_t.itemsize:
                        raise ParseError(f"{path}: byte {fh.tell()}: truncated {name!r} element")
                    n = int(np.frombuffer(raw, cnt_t)[0])
                    skip = n * item_t.itemsize
                else:
                    skip = np.dtype(t).itemsize
                if len(fh.read(skip)) < skip:
                    raise ParseError(f"{path}: byte {fh.tell()}: truncated {name!r} element")
    raise ParseError(f"{path}: no vertex element")


def _write_ply(cloud: PointCloud, path, binary: bool) -> None:
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    decl = ["property float x", "property float y", "property float z"]
    if cloud.intensity is not None:
        fields.append(("intensity", "<f4"))
        decl.append("property float intensity")
    if cloud.color is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        decl += ["property uchar red", "property uchar green", "property uchar blue"]
    n = len(cloud)
    header = "\n".join(
        ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
         f"element vertex {n}", *decl, "end_header"]
    ) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            data = np.empty(n, dtype=np.dtype(fields))
            data["x"], data["y"], data["z"] = cloud.points.T
            if cloud.intensity is not None:
                data["intensity"] = cloud.intensity
            if cloud.color is not None:
                data["red"], data["green"], data["blue"] = cloud.color.T
            fh.write(data.tobytes())
        else:
            cols = [cloud.points]
            fmt = ["%.6f"] * 3
            if cloud.intensity is not None:
                cols.append(cloud.intensity[:, None])
                fmt.append("%.6f")
            if cloud.color is not None:
                cols.append(cloud.color.astype(np.int64))
                fmt += ["%d"] * 3
            np.savetxt(fh, np.column_stack(cols), fmt=" ".join(fmt))


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def read_transform(path) -> RigidTransform:
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                vals = [float(v) for v in s.split()]
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: not a number") from None
            if len(vals) != 4:
                raise ParseError(f"{path}: line {lineno}: expected 4 numbers, got {len(vals)}")
            rows.append(vals)
    if len(rows) != 4:
        raise ParseError(f"{path}: expected 4 rows, got {len(rows)}")
    M = np.array(rows)
    if not np.all(np.isfinite(M)):
        raise ParseError(f"{path}: non-finite matrix entry")
    if np.max(np.abs(M[3] - [0, 0, 0, 1])) > ORTHO_TOL:
        raise ValidationError(f"{path}: bottom row must be 0 0 0 1")
    return RigidTransform.from_matrix(M)


def format_transform(T: RigidTransform) -> str:
    return "".join(" ".join(_fmt_exact(v) for v in row) + "\n" for row in T.matrix)


def write_transform(T: RigidTransform, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_transform(T))


# ---------------------------------------------------------------------------
# stem maps, correspondences, key=value text
# ---------------------------------------------------------------------------

def write_positions(positions: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        for p in np.asarray(positions, dtype=np.float64).reshape(-1, 3):
            fh.write(" ".join(_fmt_exact(v) for v in p) + "\n")


def read_positions(path) -> np.ndarray:
    cloud = _read_xyz(path)
    return np.array(cloud.points)


def write_pairs(pairs: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        for a, b in np.asarray(pairs, dtype=np.int64).reshape(-1, 2):
            fh.write(f"{a} {b}\n")


def read_pairs(path) -> np.ndarray:
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 2:
                raise ParseError(f"{path}: line {lineno}: expected 'src_index tgt_index'")
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: indices must be integers") from None
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def format_kv(items: Iterable[tuple[str, object]]) -> str:
    out = []
    for k, v in items:
        if isinstance(v, float):
            v = _fmt_exact(v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        out.append(f"{k}={v}\n")
    return "".join(out)


def parse_kv(text: str, source: str = "<text>") -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    bad = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            bad.append(f"line {lineno}: {s!r} is not key=value")
            continue
        k, v = s.split("=", 1)
        k = k.strip().replace("-", "_")
        if not k:
            bad.append(f"line {lineno}: empty key")
            continue
        if k in out:
            bad.append(f"line {lineno}: duplicate key {k!r}")
            continue
        out[k] = v.strip()
    if bad:
        raise SpecError(f"{source}: " + "; ".join(bad))
    return out


def read_kv(path) -> dict[str, str]:
    with open(path, "r") as fh:
        return parse_kv(fh.read(), os.fspath(path))
