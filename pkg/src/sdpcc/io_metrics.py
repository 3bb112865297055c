"""PLY input/output, voxelization, and rate/distortion metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sparse_tensor import SparseTensor3, canonicalize, morton_encode, unique_coords

PSNR_CAP = 100.0


class PlyError(ValueError):
    pass


class EmptyCloudError(ValueError):
    pass


class OverlapError(ValueError):
    pass


@dataclass
class RawCloud:
    points: np.ndarray  # (n, 3) float64
    comments: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("cloud has non-finite coordinates")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class RdPoint:
    rate: float
    quality: float


# -- PLY --------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) or (name, (count_dtype, item_dtype))


def _parse_header(data: bytes) -> tuple[str, list[_Element], int, list[str]]:
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError("missing 'ply' magic or 'end_header'")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements: list[_Element] = []
    comments = []
    for raw in data[:end].decode("ascii", errors="replace").splitlines()[1:]:
        tok = raw.split()
        if tok and tok[0] == "comment":
            comments.append(raw.strip()[len("comment"):].strip())
            continue
        if not tok or tok[0] == "obj_info":
            continue
        try:
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append(_Element(tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                if not elements:
                    raise PlyError("property before any element")
                if tok[1] == "list":
                    elements[-1].props.append((tok[4], (_PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
                else:
                    elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise PlyError(f"unexpected header line {raw!r}")
        except (IndexError, KeyError, ValueError) as e:
            if isinstance(e, PlyError):
                raise
            raise PlyError(f"malformed header line {raw!r}") from None
    if fmt == "binary_big_endian":
        raise PlyError("big-endian PLY is not supported")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unknown PLY format {fmt!r}")
    return fmt, elements, body_start, comments


def _xyz(names) -> list[int]:
    try:
        return [names.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise PlyError("vertex element lacks x, y or z") from None


def _read_ascii(body: bytes, elements: list[_Element]) -> np.ndarray:
    lines = iter(body.decode("ascii", errors="replace").splitlines())
    out = None
    for el in elements:
        rows = []
        for _ in range(el.count):
            line = next(lines, None)
            while line is not None and not line.strip():
                line = next(lines, None)
            if line is None:
                raise PlyError(f"truncated body in element {el.name!r}")
            rows.append(line.split())
        if el.name == "vertex":
            if any(isinstance(t, tuple) for _, t in el.props):
                raise PlyError("list properties on vertices are not supported")
            idx = _xyz([n for n, _ in el.props])
            try:
                out = np.array([[float(r[i]) for i in idx] for r in rows], dtype=np.float64).reshape(-1, 3)
            except (IndexError, ValueError):
                raise PlyError("malformed vertex row") from None
    return out


def _read_binary(body: bytes, elements: list[_Element]) -> np.ndarray:
    pos = 0
    out = None
    for el in elements:
        has_list = any(isinstance(t, tuple) for _, t in el.props)
        if not has_list:
            dt = np.dtype([(n, "<" + t) for n, t in el.props])
            size = dt.itemsize * el.count
            if pos + size > len(body):
                raise PlyError(f"truncated body in element {el.name!r}")
            arr = np.frombuffer(body, dtype=dt, count=el.count, offset=pos)
            pos += size
            if el.name == "vertex":
                _xyz(list(dt.names))
                out = np.stack([arr[a].astype(np.float64) for a in ("x", "y", "z")], axis=1)
            continue
        if el.name == "vertex":
            raise PlyError("list properties on vertices are not supported")
        for _ in range(el.count):
            for _, t in el.props:
                if isinstance(t, tuple):
                    cdt, idt = np.dtype("<" + t[0]), np.dtype("<" + t[1])
                    if pos + cdt.itemsize > len(body):
                        raise PlyError("truncated list property")
                    n = int(np.frombuffer(body, cdt, 1, pos)[0])
                    pos += cdt.itemsize + n * idt.itemsize
                else:
                    pos += np.dtype(t).itemsize
            if pos > len(body):
                raise PlyError(f"truncated body in element {el.name!r}")
    return out


def read_ply(path) -> RawCloud:
    data = Path(path).read_bytes()
    fmt, elements, start, comments = _parse_header(data)
    if not any(e.name == "vertex" for e in elements):
        raise PlyError("no vertex element")
    body = data[start:]
    pts = _read_ascii(body, elements) if fmt == "ascii" else _read_binary(body, elements)
    return RawCloud(pts, comments)


def write_ply(cloud, path, format: str = "binary_little_endian", dtype: str = "float", comments=()) -> None:
    """Write x, y, z only. ``dtype`` is the PLY scalar type (float, double or int)."""
    if isinstance(cloud, RawCloud) and not comments:
        comments = cloud.comments
    pts = cloud.points if isinstance(cloud, RawCloud) else np.asarray(
        cloud.coords if isinstance(cloud, SparseTensor3) else cloud)
    pts = np.asarray(pts).reshape(-1, 3)
    np_t = {"float": "<f4", "double": "<f8", "int": "<i4"}[dtype]
    if format not in ("ascii", "binary_little_endian"):
        raise PlyError(f"cannot write PLY format {format!r}")
    header = (
        f"ply\nformat {format} 1.0\n"
        + "".join(f"comment {c}\n" for c in comments)
        + f"element vertex {len(pts)}\n"
        f"property {dtype} x\nproperty {dtype} y\nproperty {dtype} z\nend_header\n"
    ).encode("ascii")
    arr = pts.astype(np_t)
    if format == "ascii":
        if dtype == "int":
            body = "".join(f"{a} {b} {c}\n" for a, b, c in arr.tolist())
        else:
            body = "".join(f"{a!r} {b!r} {c!r}\n" for a, b, c in arr.tolist())
        Path(path).write_bytes(header + body.encode("ascii"))
    else:
        Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


# -- voxelization ------------------------------------------------------------------


@dataclass(frozen=True)
class VoxelTransform:
    """world = voxel / scale + shift."""

    shift: np.ndarray
    scale: float

    def to_world(self, coords) -> np.ndarray:
        return np.asarray(coords, dtype=np.float64) / self.scale + self.shift

    def to_grid(self, points) -> np.ndarray:
        return np.floor((np.asarray(points, dtype=np.float64) - self.shift) * self.scale + 0.5).astype(np.int64)


def fit_transform(points, bit_depth: int) -> VoxelTransform:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloudError("cannot voxelize an empty cloud")
    lo = pts.min(axis=0)
    edge = float((pts.max(axis=0) - lo).max())
    scale = ((1 << bit_depth) - 1) / edge if edge > 0 else 1.0
    return VoxelTransform(lo, scale)


def voxelize(cloud, bit_depth: int, transform: VoxelTransform | None = None, return_transform: bool = False):
    """Quantize onto a ``2^N`` grid; duplicates merge into one voxel.

    The transform is fitted to the cloud (min corner to the origin, longest
    edge to ``2^N - 1``) unless one is given, which lets a whole sequence
    share a grid.
    """
    if not 1 <= bit_depth <= 16:
        raise ValueError("bit depth must be in 1..16")
    pts = cloud.points if isinstance(cloud, RawCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloudError("cannot voxelize an empty cloud")
    tf = transform or fit_transform(pts, bit_depth)
    q = np.clip(tf.to_grid(pts), 0, (1 << bit_depth) - 1)
    t = canonicalize(unique_coords(q), None, bit_depth)
    return (t, tf) if return_transform else t


# -- metrics -----------------------------------------------------------------------


class _GridIndex:
    """Exact nearest neighbour over integer points bucketed into cubic cells."""

    def __init__(self, coords: np.ndarray, cell: int):
        self.cell = cell
        self.points = np.asarray(coords, dtype=np.int64)
        cells = self.points // cell
        keys = morton_encode(cells)
        order = np.argsort(keys, kind="stable")
        self.keys = keys[order]
        self.points = self.points[order]
        self.max_cell = cells.max(axis=0) if len(cells) else np.zeros(3, np.int64)

    def _shell(self, r: int) -> np.ndarray:
        g = np.arange(-r, r + 1)
        o = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
        return o[np.abs(o).max(axis=1) == r]

    def nearest_sq(self, queries: np.ndarray) -> np.ndarray:
        q = np.asarray(queries, dtype=np.int64)
        best = np.full(len(q), np.iinfo(np.int64).max)
        qcell = q // self.cell
        todo = np.arange(len(q))
        r = 0
        limit = int(np.abs(qcell).max(initial=0) + self.max_cell.max(initial=0)) + 2
        while len(todo) and r <= limit:
            shell = self._shell(r)
            if len(shell) > len(self.points):
                # sparse index: scanning every point is cheaper than the shell
                self._brute(q, todo, best)
                break
            for off in shell:
                c = qcell[todo] + off
                ok = np.all(c >= 0, axis=1)
                if not ok.any():
                    continue
                sel = todo[ok]
                k = morton_encode(c[ok])
                lo = np.searchsorted(self.keys, k, "left")
                hi = np.searchsorted(self.keys, k, "right")
                n = hi - lo
                has = n > 0
                if not has.any():
                    continue
                sel, lo, n = sel[has], lo[has], n[has]
                owner = np.repeat(np.arange(len(sel)), n)
                idx = np.repeat(lo - np.cumsum(n) + n, n) + np.arange(n.sum())
                d = ((self.points[idx] - q[sel[owner]]) ** 2).sum(axis=1)
                m = np.full(len(sel), np.iinfo(np.int64).max)
                np.minimum.at(m, owner, d)
                best[sel] = np.minimum(best[sel], m)
            # anything outside the shells seen so far lies at least r*cell away
            reach = (r * self.cell) ** 2
            todo = todo[best[todo] > reach]
            r += 1
        return best

    def _brute(self, q: np.ndarray, todo: np.ndarray, best: np.ndarray, chunk: int = 1 << 20) -> None:
        step = max(1, chunk // max(len(self.points), 1))
        for i in range(0, len(todo), step):
            sel = todo[i:i + step]
            d = ((q[sel, None, :] - self.points[None, :, :]) ** 2).sum(axis=2).min(axis=1)
            best[sel] = np.minimum(best[sel], d)


def _coords(x) -> np.ndarray:
    if isinstance(x, SparseTensor3):
        return x.coords
    return np.asarray(x, dtype=np.int64).reshape(-1, 3)


def nearest_sq_dist(queries, points, cell: int | None = None) -> np.ndarray:
    """Exact squared distance from each query to its nearest point."""
    pts = _coords(points)
    if len(pts) == 0:
        raise EmptyCloudError("nearest neighbour search over an empty cloud")
    q = _coords(queries)
    both = np.concatenate([pts, q])
    origin = both.min(axis=0)
    pts, q = pts - origin, q - origin
    if cell is None:
        extent = int((both.max(axis=0) - both.min(axis=0)).max()) + 1
        cell = max(1, int(math.ceil(extent / len(pts) ** (1 / 3))))
    return _GridIndex(pts, cell).nearest_sq(q)


def d1_mse(ref, test) -> float:
    a, b = _coords(ref), _coords(test)
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloudError("D1 needs two non-empty clouds")
    return max(float(nearest_sq_dist(a, b).mean()), float(nearest_sq_dist(b, a).mean()))


def d1_psnr(ref, test, bit_depth: int, peak_factor: float = 3.0, cap: float = PSNR_CAP) -> float:
    """Symmetric point-to-point PSNR with peak ``peak_factor * (2^N - 1)^2``."""
    mse = d1_mse(ref, test)
    if mse == 0:
        return cap
    peak = peak_factor * ((1 << bit_depth) - 1) ** 2
    return min(cap, 10 * math.log10(peak / mse))


def bpp(stream_bytes: int, point_count: int) -> float:
    if point_count <= 0:
        raise ValueError("point count must be positive")
    return 8.0 * stream_bytes / point_count


def _check_curve(curve) -> tuple[np.ndarray, np.ndarray]:
    pts = [p if isinstance(p, RdPoint) else RdPoint(*p) for p in curve]
    if len(pts) < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    r = np.array([p.rate for p in pts], dtype=np.float64)
    q = np.array([p.quality for p in pts], dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("rates must be positive")
    if np.any(np.diff(r) <= 0):
        raise ValueError("rates must be strictly increasing")
    return np.log10(r), q


def bd_rate(curve_a, curve_b) -> float:
    """Average rate difference of ``curve_b`` relative to ``curve_a`` in percent."""
    la, qa = _check_curve(curve_a)
    lb, qb = _check_curve(curve_b)
    lo, hi = max(qa.min(), qb.min()), min(qa.max(), qb.max())
    if not hi > lo:
        raise OverlapError("quality ranges of the two curves do not overlap")
    pa = np.polyint(np.polyfit(qa, la, 3))
    pb = np.polyint(np.polyfit(qb, lb, 3))
    ia = np.polyval(pa, hi) - np.polyval(pa, lo)
    ib = np.polyval(pb, hi) - np.polyval(pb, lo)
    return (10 ** ((ib - ia) / (hi - lo)) - 1) * 100


# -- reports -------------------------------------------------------------------------

REPORT_COLUMNS = ("frame", "type", "bytes", "bpp", "d1_psnr")


def write_report(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in REPORT_COLUMNS})


def read_report(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if rows and set(REPORT_COLUMNS) - set(rows[0]):
        raise ValueError("report lacks required columns")
    return rows


def summary_row(frames: list[dict]) -> dict:
    """Sequence totals: bytes summed, bpp over all input points, PSNR averaged per frame."""
    total_bytes = sum(int(r["bytes"]) for r in frames)
    points = sum(int(r["points"]) for r in frames)
    return {
        "frame": "summary",
        "type": "-",
        "bytes": total_bytes,
        "bpp": bpp(total_bytes, points),
        "d1_psnr": float(np.mean([float(r["d1_psnr"]) for r in frames])),
    }


def report_curve(rows: list[dict]) -> list[RdPoint]:
    """R-D points of a report: one per summary row, ordered by rate."""
    pts = [RdPoint(float(r["bpp"]), float(r["d1_psnr"])) for r in rows if r["frame"] == "summary"]
    return sorted(pts, key=lambda p: p.rate)
