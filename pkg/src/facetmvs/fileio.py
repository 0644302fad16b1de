"""Readers and writers for meshes, cameras, point clouds, images and CSV.

Formats
-------
PLY
    ``ascii`` or ``binary_little_endian``; vertices as ``double x y z``,
    facets as ``list uchar int vertex_indices``. The reader also accepts
    ``float`` coordinates, big-endian files and other integer list types.
Camera text
    One camera per line: ``id``, 9 intrinsic entries (row-major), 9
    rotation entries (world to camera), 3 center entries, ``width``,
    ``height``. ``#`` starts a comment. Values are written with 17
    significant digits.
Camera binary
    ``FMCAM1`` magic, uint32 count, then per camera int32 id, 21 float64,
    int32 width, int32 height (little-endian).
Points binary
    ``FMPTS1`` magic, uint64 count, then per point 3 float64 followed by a
    varint camera count and that many varint camera ids.
Points text
    ``x y z n id_1 ... id_n`` per line, ``#`` comments.
Images
    PGM/PPM (P2, P3, P5, P6; 8 or 16 bit), PNG through Pillow and PFM
    (32-bit float, grayscale or color). Intensities are floats in [0, 1];
    color is averaged to one channel on load.
"""
from __future__ import annotations

import csv
import io
import json
import re
import struct
from pathlib import Path

import numpy as np

from .geometry import Camera, Image, PointSample
from .mesh import SurfaceMesh


class ParseError(ValueError):
    """Malformed input; carries the file, 1-based line and/or byte offset."""

    def __init__(self, message, path=None, line=None, offset=None):
        self.path = None if path is None else str(path)
        self.line = line
        self.offset = offset
        where = []
        if self.path:
            where.append(self.path)
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{': '.join([', '.join(where)] if where else [])}{': ' if where else ''}{message}")


def _read_text(path) -> str:
    data = Path(path).read_bytes()
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        line = data.count(b"\n", 0, e.start) + 1
        raise ParseError("invalid UTF-8 text", path, line=line, offset=e.start) from None


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, mesh: SurfaceMesh, binary: bool = True, provenance: bool = False) -> None:
    """Write positions and triangles; ``provenance`` adds the vertex
    ``source_id`` (triangulation vertex) and facet ``source_cell`` columns."""
    V = np.ascontiguousarray(mesh.vertices, dtype="<f8")
    F = np.ascontiguousarray(mesh.faces, dtype="<i4")
    fmt = "binary_little_endian" if binary else "ascii"
    vprops = "property double x\nproperty double y\nproperty double z\n"
    fprops = "property list uchar int vertex_indices\n"
    if provenance:
        vprops += "property int source_id\n"
        fprops += "property int source_cell\n"
    header = (f"ply\nformat {fmt} 1.0\ncomment facetmvs\n"
              f"element vertex {len(V)}\n{vprops}element face {len(F)}\n{fprops}end_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            vdt = [("p", "<f8", (3,))] + ([("id", "<i4")] if provenance else [])
            vrec = np.zeros(len(V), dtype=vdt)
            vrec["p"] = V
            fdt = [("n", "u1"), ("idx", "<i4", (3,))] + ([("src", "<i4")] if provenance else [])
            frec = np.zeros(len(F), dtype=fdt)
            frec["n"] = 3
            frec["idx"] = F
            if provenance:
                vrec["id"] = mesh.vertex_ids
                frec["src"] = mesh.source_cells
            fh.write(vrec.tobytes())
            fh.write(frec.tobytes())
        else:
            lines = []
            for k, v in enumerate(V):
                row = " ".join(repr(float(x)) for x in v)
                lines.append(row + (f" {int(mesh.vertex_ids[k])}" if provenance else ""))
            for k, f in enumerate(F):
                row = "3 " + " ".join(str(int(i)) for i in f)
                lines.append(row + (f" {int(mesh.source_cells[k])}" if provenance else ""))
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def _ply_header(data: bytes, path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply"):
        raise ParseError("missing 'ply' magic", path, line=1, offset=0)
    if end < 0:
        raise ParseError("missing end_header", path, offset=len(data))
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    text = data[:end].decode("ascii", errors="replace").split("\n")
    fmt = None
    elements = []
    for ln, raw in enumerate(text, start=1):
        tok = raw.strip().split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian") \
                    or tok[2] != "1.0":
                raise ParseError(f"unsupported format line {raw.strip()!r}", path, line=ln)
            if fmt is not None:
                raise ParseError("repeated format line", path, line=ln)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError(f"bad element line {raw.strip()!r}", path, line=ln)
            elements.append([tok[1], int(tok[2]), [], ln])
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", path, line=ln)
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise ParseError(f"unknown list type in {raw.strip()!r}", path, line=ln)
                elements[-1][2].append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]], None))
            else:
                raise ParseError(f"bad property line {raw.strip()!r}", path, line=ln)
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", path, line=ln)
    if fmt is None:
        raise ParseError("missing format line", path, line=2)
    return fmt, elements, body_start, len(text) + 1


def read_ply(path) -> SurfaceMesh:
    """Read the vertex positions and triangles of a PLY file."""
    data = Path(path).read_bytes()
    fmt, elements, pos, header_lines = _ply_header(data, path)
    verts = None
    faces = None
    vids = fsrc = None
    # position of every facet record, for range errors
    face_at = None
    if fmt == "ascii":
        lines = data[pos:].decode("ascii", errors="replace").split("\n")
        ln = 0

        def next_tokens():
            nonlocal ln
            while ln < len(lines):
                ln += 1
                tok = lines[ln - 1].split()
                if tok:
                    return tok, header_lines + ln
            raise ParseError("unexpected end of file", path, line=header_lines + ln)

        for name, count, props, hline in elements:
            rows = []
            where = []
            for _ in range(count):
                tok, lno = next_tokens()
                where.append({"line": lno})
                vals = []
                k = 0
                try:
                    for pname, t, it in props:
                        if it is None:
                            vals.append(float(tok[k]))
                            k += 1
                        else:
                            n = int(tok[k])
                            vals.append([int(x) for x in tok[k + 1:k + 1 + n]])
                            if len(vals[-1]) != n:
                                raise IndexError
                            k += 1 + n
                except (IndexError, ValueError):
                    raise ParseError(f"malformed {name} record", path, line=lno) from None
                if k != len(tok):
                    raise ParseError(f"trailing values in {name} record", path, line=lno)
                rows.append(vals)
            if name == "vertex":
                verts = _vertex_columns(props, rows, path, hline)
                vids = _scalar_column(props, rows, "source_id")
            elif name == "face":
                faces = _face_lists(props, rows, path, where, hline)
                fsrc = _scalar_column(props, rows, "source_cell")
                face_at = where
    else:
        order = "<" if fmt == "binary_little_endian" else ">"
        for name, count, props, hline in elements:
            if all(it is None for _, _, it in props):
                dt = np.dtype([(p, order + t) for p, t, _ in props])
                need = dt.itemsize * count
                if pos + need > len(data):
                    raise ParseError(f"truncated {name} block", path, offset=len(data))
                arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
                pos += need
                if name == "vertex":
                    verts = _vertex_columns(props, None, path, hline, arr)
                    if "source_id" in arr.dtype.names:
                        vids = arr["source_id"].astype(np.int64)
            elif len(props) == 1 and _fixed_triangles(data, pos, count, order, props[0]):
                _, t, it = props[0]
                dt = np.dtype([("n", order + t), ("idx", order + it, (3,))])
                arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
                if name == "face":
                    faces = arr["idx"].astype(np.int64)
                    face_at = [{"offset": pos + f * dt.itemsize} for f in range(count)]
                pos += dt.itemsize * count
            else:
                rows = []
                where = []
                for _ in range(count):
                    vals = []
                    where.append({"offset": pos})
                    for pname, t, it in props:
                        if it is None:
                            size = np.dtype(t).itemsize
                            if pos + size > len(data):
                                raise ParseError(f"truncated {name} record", path, offset=pos)
                            vals.append(np.frombuffer(data, order + t, 1, pos)[0])
                            pos += size
                        else:
                            cs = np.dtype(t).itemsize
                            if pos + cs > len(data):
                                raise ParseError(f"truncated {name} record", path, offset=pos)
                            n = int(np.frombuffer(data, order + t, 1, pos)[0])
                            pos += cs
                            isz = np.dtype(it).itemsize
                            if pos + n * isz > len(data):
                                raise ParseError(f"truncated {name} list", path, offset=pos)
                            vals.append(np.frombuffer(data, order + it, n, pos).astype(np.int64).tolist())
                            pos += n * isz
                    rows.append(vals)
                if name == "face":
                    faces = _face_lists(props, rows, path, where, hline)
                    fsrc = _scalar_column(props, rows, "source_cell")
                    face_at = where
        if pos != len(data):
            raise ParseError("trailing bytes after last element", path, offset=pos)
    if verts is None:
        raise ParseError("no vertex element", path, line=header_lines)
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    bad = np.flatnonzero(np.any((faces < 0) | (faces >= len(verts)), axis=1))
    if len(bad):
        raise ParseError(f"facet {bad[0]} index out of range", path, **face_at[bad[0]])
    return SurfaceMesh(verts, faces, fsrc, vids)


def _scalar_column(props, rows, name):
    names = [p for p, _, _ in props]
    if name not in names:
        return None
    k = names.index(name)
    return np.array([int(r[k]) for r in rows], dtype=np.int64)


def _fixed_triangles(data, pos, count, order, prop) -> bool:
    """True when a list element holds ``count`` records of exactly 3 entries."""
    _, t, it = prop
    if it is None:
        return False
    dt = np.dtype([("n", order + t), ("idx", order + it, (3,))])
    if pos + dt.itemsize * count > len(data):
        return False
    arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
    return bool(np.all(arr["n"] == 3))


def _vertex_columns(props, rows, path, line, arr=None):
    names = [p for p, _, _ in props]
    for c in "xyz":
        if c not in names:
            raise ParseError(f"vertex element lacks property {c!r}", path, line=line)
    if arr is not None:
        return np.column_stack([arr[c].astype(np.float64) for c in "xyz"])
    idx = [names.index(c) for c in "xyz"]
    return np.array([[r[i] for i in idx] for r in rows], dtype=np.float64).reshape(-1, 3)


def _face_lists(props, rows, path, where, line):
    k = next((i for i, (_, _, it) in enumerate(props) if it is not None), None)
    if k is None:
        raise ParseError("face element has no index list", path, line=line)
    out = []
    for f, r in enumerate(rows):
        if len(r[k]) != 3:
            raise ParseError(f"facet {f} is not a triangle", path, **where[f])
        out.append(r[k])
    return np.array(out, dtype=np.int64).reshape(-1, 3)


# ------------------------------------------------------------ cameras

def format_camera(cam: Camera) -> str:
    vals = list(cam.intrinsics.ravel()) + list(cam.rotation.ravel()) + list(cam.center)
    nums = " ".join(f"{float(v):.17g}" for v in vals)
    return f"{cam.id} {nums} {cam.width} {cam.height}"


def write_cameras(path, cameras) -> None:
    lines = ["# id K(9, row-major) R(9, world to camera) C(3) width height"]
    lines += [format_camera(c) for c in cameras]
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path) -> list[Camera]:
    cams = []
    seen = set()
    for ln, raw in enumerate(_read_text(path).split("\n"), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        tok = text.split()
        if len(tok) != 24:
            raise ParseError(f"expected 24 fields, found {len(tok)}", path, line=ln)
        try:
            cid = int(tok[0])
            nums = [float(x) for x in tok[1:22]]
            w, h = int(tok[22]), int(tok[23])
        except ValueError as e:
            raise ParseError(str(e), path, line=ln) from None
        if w <= 0 or h <= 0:
            raise ParseError("image size must be positive", path, line=ln)
        if cid in seen:
            raise ParseError(f"duplicate camera id {cid}", path, line=ln)
        seen.add(cid)
        try:
            cams.append(Camera(np.reshape(nums[:9], (3, 3)), np.reshape(nums[9:18], (3, 3)),
                               nums[18:21], (w, h), cid))
        except ValueError as e:
            raise ParseError(str(e), path, line=ln) from None
    return cams


_CAM_REC = struct.Struct("<i21dii")


def write_cameras_binary(path, cameras) -> None:
    with open(path, "wb") as fh:
        fh.write(b"FMCAM1")
        fh.write(struct.pack("<I", len(cameras)))
        for c in cameras:
            vals = list(c.intrinsics.ravel()) + list(c.rotation.ravel()) + list(c.center)
            fh.write(_CAM_REC.pack(c.id, *vals, c.width, c.height))


def read_cameras_binary(path) -> list[Camera]:
    data = Path(path).read_bytes()
    if not data.startswith(b"FMCAM1"):
        raise ParseError("missing FMCAM1 magic", path, offset=0)
    if len(data) < 10:
        raise ParseError("truncated header", path, offset=len(data))
    (n,) = struct.unpack_from("<I", data, 6)
    pos = 10
    cams = []
    for k in range(n):
        if pos + _CAM_REC.size > len(data):
            raise ParseError(f"truncated camera record {k}", path, offset=pos)
        rec = _CAM_REC.unpack_from(data, pos)
        try:
            cams.append(Camera(np.reshape(rec[1:10], (3, 3)), np.reshape(rec[10:19], (3, 3)),
                               rec[19:22], (rec[22], rec[23]), rec[0]))
        except ValueError as e:
            raise ParseError(str(e), path, offset=pos) from None
        pos += _CAM_REC.size
    if pos != len(data):
        raise ParseError("trailing bytes", path, offset=pos)
    return cams


def quaternion_to_rotation(qw, qx, qy, qz) -> np.ndarray:
    q = np.array([qw, qx, qy, qz], dtype=float)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def read_colmap_text(cameras_txt, images_txt) -> list[Camera]:
    """Cameras from COLMAP ``cameras.txt`` + ``images.txt``.

    Mapping: PINHOLE ``fx fy cx cy`` and SIMPLE_PINHOLE ``f cx cy`` give
    ``K``; the image quaternion/translation give ``R`` and ``C = -R^T t``.
    The camera id is the COLMAP image id. Distortion models are rejected.
    COLMAP puts the center of the top-left pixel at (0.5, 0.5), which is
    also the convention here.
    """
    intr = {}
    for ln, raw in enumerate(_read_text(cameras_txt).split("\n"), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        tok = text.split()
        try:
            cid, model, w, h = int(tok[0]), tok[1], int(tok[2]), int(tok[3])
            p = [float(x) for x in tok[4:]]
        except (IndexError, ValueError):
            raise ParseError("malformed camera line", cameras_txt, line=ln) from None
        if model == "PINHOLE" and len(p) == 4:
            K = [[p[0], 0, p[2]], [0, p[1], p[3]], [0, 0, 1]]
        elif model == "SIMPLE_PINHOLE" and len(p) == 3:
            K = [[p[0], 0, p[1]], [0, p[0], p[2]], [0, 0, 1]]
        else:
            raise ParseError(f"unsupported camera model {model} with {len(p)} parameters",
                             cameras_txt, line=ln)
        intr[cid] = (np.array(K, float), (w, h))
    cams = []
    pose_line = True
    for ln, raw in enumerate(_read_text(images_txt).split("\n"), start=1):
        text = raw.strip()
        if text.startswith("#"):
            continue
        if not pose_line:
            # the 2-D observation line that follows every pose line
            pose_line = True
            continue
        if not text:
            continue
        tok = text.split()
        try:
            iid = int(tok[0])
            q = [float(x) for x in tok[1:5]]
            t = np.array([float(x) for x in tok[5:8]])
            cam_id = int(tok[8])
        except (IndexError, ValueError):
            raise ParseError("malformed image line", images_txt, line=ln) from None
        if cam_id not in intr:
            raise ParseError(f"unknown camera id {cam_id}", images_txt, line=ln)
        R = quaternion_to_rotation(*q)
        K, size = intr[cam_id]
        cams.append(Camera(K, R, -R.T @ t, size, iid))
        pose_line = False
    return cams


# ------------------------------------------------------------- points

def _varint(n: int) -> bytes:
    if n < 0:
        raise ValueError("varints are unsigned")
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _read_varint(data: bytes, pos: int, path):
    shift = 0
    value = 0
    start = pos
    while True:
        if pos >= len(data):
            raise ParseError("truncated varint", path, offset=start)
        b = data[pos]
        pos += 1
        value |= (b & 0x7F) << shift
        if not b & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise ParseError("varint too long", path, offset=start)


def write_points(path, samples) -> None:
    parts = [b"FMPTS1", struct.pack("<Q", len(samples))]
    for s in samples:
        parts.append(struct.pack("<3d", *s.position))
        ids = sorted(s.visibility)
        parts.append(_varint(len(ids)))
        parts.extend(_varint(i) for i in ids)
    Path(path).write_bytes(b"".join(parts))


def read_points(path) -> list[PointSample]:
    data = Path(path).read_bytes()
    if not data.startswith(b"FMPTS1"):
        raise ParseError("missing FMPTS1 magic", path, offset=0)
    if len(data) < 14:
        raise ParseError("truncated header", path, offset=len(data))
    (n,) = struct.unpack_from("<Q", data, 6)
    pos = 14
    out = []
    for k in range(n):
        if pos + 24 > len(data):
            raise ParseError(f"truncated point {k}", path, offset=pos)
        xyz = struct.unpack_from("<3d", data, pos)
        rec = pos
        pos += 24
        m, pos = _read_varint(data, pos, path)
        ids = []
        for _ in range(m):
            i, pos = _read_varint(data, pos, path)
            ids.append(i)
        try:
            out.append(PointSample(xyz, frozenset(ids)))
        except ValueError as e:
            raise ParseError(str(e), path, offset=rec) from None
    if pos != len(data):
        raise ParseError("trailing bytes", path, offset=pos)
    return out


def write_points_text(path, samples) -> None:
    lines = ["# x y z n id_1 ... id_n"]
    for s in samples:
        ids = sorted(s.visibility)
        lines.append(" ".join(f"{v:.17g}" for v in s.position) + f" {len(ids)} " + " ".join(map(str, ids)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_points_text(path) -> list[PointSample]:
    out = []
    for ln, raw in enumerate(_read_text(path).split("\n"), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        tok = text.split()
        try:
            xyz = [float(x) for x in tok[:3]]
            n = int(tok[3])
            ids = [int(x) for x in tok[4:]]
        except (IndexError, ValueError):
            raise ParseError("malformed point line", path, line=ln) from None
        if len(xyz) != 3 or len(ids) != n:
            raise ParseError(f"expected {n} camera ids, found {len(ids)}", path, line=ln)
        if any(i < 0 for i in ids):
            raise ParseError("negative camera id", path, line=ln)
        try:
            out.append(PointSample(xyz, frozenset(ids)))
        except ValueError as e:
            raise ParseError(str(e), path, line=ln) from None
    return out


# ------------------------------------------------------------- images

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
_SAMPLE = re.compile(rb"\S+")


def _pnm_header(data, path, n_fields):
    pos = 2
    vals = []
    for _ in range(n_fields):
        m = _TOKEN.match(data, pos)
        if not m:
            raise ParseError("truncated header", path, offset=pos)
        try:
            vals.append(int(m.group(1)))
        except ValueError:
            raise ParseError(f"non-integer header field {m.group(1)!r}", path, offset=m.start(1)) from None
        pos = m.end()
    return vals, pos


def read_pnm(path) -> np.ndarray:
    """PGM/PPM as float array in [0, 1] ((H, W) or (H, W, 3))."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ParseError("not a PGM/PPM file", path, offset=0)
    (w, h, maxval), pos = _pnm_header(data, path, 3)
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ParseError("invalid size or maxval", path, offset=2)
    ch = 3 if magic in (b"P3", b"P6") else 1
    n = w * h * ch
    if magic in (b"P2", b"P3"):
        found = [m for _, m in zip(range(n), _SAMPLE.finditer(data, pos))]
        if len(found) < n:
            raise ParseError(f"expected {n} samples, found {len(found)}", path, offset=len(data))
        starts = [m.start() for m in found]
        try:
            arr = np.array([int(m.group()) for m in found], dtype=np.float64)
        except ValueError:
            k = next(i for i, m in enumerate(found) if not m.group().isdigit())
            raise ParseError("non-integer sample", path, offset=starts[k]) from None
    else:
        pos += 1  # single whitespace byte after maxval
        dt = ">u2" if maxval > 255 else "u1"
        need = n * np.dtype(dt).itemsize
        if pos + need > len(data):
            raise ParseError("truncated raster", path, offset=len(data))
        arr = np.frombuffer(data, dt, n, pos).astype(np.float64)
        starts = pos + np.dtype(dt).itemsize * np.arange(n)
    over = np.flatnonzero(arr > maxval)
    if len(over):
        raise ParseError(f"sample {over[0]} exceeds maxval", path, offset=int(starts[over[0]]))
    arr = arr / maxval
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def write_pnm(path, values, binary: bool = True, maxval: int = 255) -> None:
    v = np.asarray(values, float)
    ch = 3 if v.ndim == 3 else 1
    h, w = v.shape[:2]
    q = np.rint(np.clip(v, 0.0, 1.0) * maxval).astype(np.int64)
    magic = {(1, False): "P2", (3, False): "P3", (1, True): "P5", (3, True): "P6"}[(ch, binary)]
    head = f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii")
    if binary:
        body = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    else:
        body = ("\n".join(" ".join(map(str, row)) for row in q.reshape(h, -1)) + "\n").encode("ascii")
    Path(path).write_bytes(head + body)


def read_pfm(path) -> np.ndarray:
    """PFM as float64 array, rows top to bottom."""
    data = Path(path).read_bytes()
    lines = data.split(b"\n", 3)
    if len(lines) < 4 or lines[0].strip() not in (b"Pf", b"PF"):
        raise ParseError("not a PFM file", path, line=1, offset=0)
    ch = 3 if lines[0].strip() == b"PF" else 1
    try:
        w, h = (int(x) for x in lines[1].split())
        scale = float(lines[2])
    except ValueError:
        raise ParseError("bad PFM size or scale line", path, line=2) from None
    if w <= 0 or h <= 0 or scale == 0:
        raise ParseError("invalid PFM header values", path, line=2)
    order = "<" if scale < 0 else ">"
    pos = len(lines[0]) + len(lines[1]) + len(lines[2]) + 3
    n = w * h * ch
    if len(data) - pos != 4 * n:
        raise ParseError(f"expected {4 * n} raster bytes, found {len(data) - pos}", path, offset=pos)
    arr = np.frombuffer(data, order + "f4", n, pos).astype(np.float64)
    arr = arr.reshape(h, w, ch) if ch == 3 else arr.reshape(h, w)
    return arr[::-1].copy()


def write_pfm(path, values) -> None:
    v = np.asarray(values, dtype="<f4")
    ch = "PF" if v.ndim == 3 else "Pf"
    h, w = v.shape[:2]
    head = f"{ch}\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(head + np.ascontiguousarray(v[::-1]).tobytes())


def read_png(path) -> np.ndarray:
    from PIL import Image as PILImage

    with open(path, "rb") as fh:
        if fh.read(8) != b"\x89PNG\r\n\x1a\n":
            raise ParseError("missing PNG signature", path, offset=0)
    try:
        with PILImage.open(path, formats=["PNG"]) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, ValueError, SyntaxError) as e:
        raise ParseError(f"unreadable PNG: {e}", path, offset=8) from None
    if mode in ("I;16", "I;16B", "I"):
        return arr.astype(np.float64) / 65535.0
    arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    return arr


def write_png(path, values) -> None:
    from PIL import Image as PILImage

    v = np.rint(np.clip(np.asarray(values, float), 0.0, 1.0) * 255).astype(np.uint8)
    PILImage.fromarray(v).save(path, format="PNG")


def read_image(path) -> Image:
    """Load any supported image as a single-channel :class:`Image`."""
    suffix = Path(path).suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        arr = read_pnm(path)
    elif suffix == ".pfm":
        arr = read_pfm(path)
    elif suffix == ".png":
        arr = read_png(path)
    else:
        raise ParseError(f"unknown image extension {suffix!r}", path)
    return Image(arr)


def write_image(path, img) -> None:
    values = img.values if isinstance(img, Image) else np.asarray(img, float)
    suffix = Path(path).suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        write_pnm(path, values)
    elif suffix == ".pfm":
        write_pfm(path, values)
    elif suffix == ".png":
        write_png(path, values)
    else:
        raise ValueError(f"unknown image extension {suffix!r}")


# ---------------------------------------------------------------- CSV

def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def read_csv(path):
    """``(header, rows)`` with all fields as strings."""
    reader = csv.reader(io.StringIO(_read_text(path), newline=""))
    try:
        rows = list(reader)
    except csv.Error as e:
        raise ParseError(str(e), path, line=reader.line_num) from None
    if not rows:
        raise ParseError("empty CSV file", path, line=1)
    header = rows[0]
    for k, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(r)}", path, line=k)
    return header, rows[1:]


def write_text(path, text: str) -> None:
    Path(path).write_text(text)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
