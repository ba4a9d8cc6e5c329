"""4D dynamic volumes, 3D masks, ROI polylines and their DVOL/CSV I/O.

A DVOL file is a pair ``name.json`` (header) + ``name.raw`` (payload). The
payload is little-endian, indexed x fastest, then y, z and t slowest, which
is Fortran order for arrays shaped ``(nx, ny, nz, nt)``.
"""
import csv
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (ArgumentError, DataError, EmptySelectionError,
                         FormatError, GeometryError, SizeError)

__all__ = [
    "DynamicVolume", "Mask3D", "RoiPolyline", "VoxelMatrix",
    "load_volume", "write_volume", "load_mask", "write_mask",
    "flatten", "scatter", "bresenham_line", "rasterize_roi",
    "downsample_mask", "read_roi_csv", "write_roi_csv",
]

_DTYPES = {"f32le": "<f4", "u8": "u1"}


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DynamicVolume:
    """Scalar field sampled on (x, y, z, t).

    Parameters
    ----------
    data : ndarray of shape (nx, ny, nz, nt)
        Intensities. Stored read-only as float64.
    spacing : tuple of float
        Voxel size in mm along x, y, z.
    dt : float
        Seconds between frames.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    dt: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[..., np.newaxis]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ArgumentError(f"volume data must be 4D and non-empty, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains non-finite intensities")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def dims(self):
        return self.data.shape[:3]

    @property
    def nt(self):
        return self.data.shape[3]

    def frame(self, t):
        return self.data[..., t]

    def with_data(self, data):
        return DynamicVolume(data, self.spacing, self.dt)


@dataclass(frozen=True)
class Mask3D:
    """Binary voxel label map (1 = selected / lesion)."""

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 4 and v.shape[3] == 1:
            v = v[..., 0]
        if v.ndim != 3:
            raise ArgumentError(f"mask must be 3D, got shape {v.shape}")
        if v.dtype != bool:
            if not np.all((v == 0) | (v == 1)):
                raise DataError("mask values must be 0 or 1")
            v = v.astype(bool)
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.values.shape

    def count(self):
        return int(self.values.sum())


@dataclass(frozen=True)
class RoiPolyline:
    """Per-slice closed polygons with vertices in mm.

    ``polygons`` maps a slice index along ``slice_axis`` to an array of
    in-plane vertices, shape (k, 2), ordered (first in-plane axis, second).
    For the default axial case these are (x_mm, y_mm).
    """

    polygons: dict = field(default_factory=dict)
    slice_axis: str = "z"
    closed: bool = True

    def __post_init__(self):
        if self.slice_axis not in ("x", "y", "z"):
            raise ArgumentError(f"unknown slice axis {self.slice_axis!r}")
        polys = {}
        for k, pts in self.polygons.items():
            pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
            if not np.all(np.isfinite(pts)):
                raise GeometryError(f"non-finite vertex on slice {k}")
            if self.closed and pts.shape[0] < 3:
                raise GeometryError(f"closed polygon on slice {k} needs >= 3 vertices")
            polys[int(k)] = _frozen(pts)
        object.__setattr__(self, "polygons", polys)


@dataclass(frozen=True)
class VoxelMatrix:
    """Time curves of selected voxels, one column per voxel.

    Attributes
    ----------
    values : ndarray of shape (n_time, n_voxels)
    index : ndarray of shape (n_voxels, 3)
        (x, y, z) of each column.
    """

    values: np.ndarray
    index: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(np.asarray(self.values, dtype=np.float64)))
        object.__setattr__(self, "index", _frozen(np.asarray(self.index, dtype=np.int64)))
        if self.values.shape[1] != self.index.shape[0]:
            raise ArgumentError("index length must equal the number of columns")
        if self.index.ndim != 2 or self.index.shape[1] != 3:
            raise ArgumentError("index must have shape (n_voxels, 3)")
        if np.unique(self.index, axis=0).shape[0] != self.index.shape[0]:
            raise ArgumentError("voxel index entries must be unique")

    @property
    def n_time(self):
        return self.values.shape[0]

    @property
    def n_voxels(self):
        return self.values.shape[1]

    @property
    def samples(self):
        """Curves as an (n_voxels, n_time) array, the estimator layout."""
        return self.values.T


# ---------------------------------------------------------------------------
# DVOL I/O


def _split_path(path):
    path = os.fspath(path)
    for ext in (".json", ".raw"):
        if path.endswith(ext):
            return path[: -len(ext)]
    return path


def _read_header(stem):
    try:
        with open(stem + ".json") as fh:
            header = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"missing header {stem}.json") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt header {stem}.json: {exc}") from exc
    try:
        dims = [int(d) for d in header["dims"]]
        nt = int(header["nt"])
        spacing = [float(s) for s in header["spacing_mm"]]
        dt = float(header.get("dt_s", 1.0))
        dtype = header["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"corrupt header {stem}.json: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3 or min(dims) < 1 or nt < 1:
        raise FormatError(f"corrupt header {stem}.json: bad dims/nt/spacing")
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    return dims, nt, spacing, dt, dtype


def _read_payload(stem, dims, nt, dtype):
    try:
        with open(stem + ".raw", "rb") as fh:
            raw = fh.read()
    except FileNotFoundError as exc:
        raise FormatError(f"missing payload {stem}.raw") from exc
    np_dtype = np.dtype(_DTYPES[dtype])
    expected = int(np.prod(dims)) * nt
    if len(raw) % np_dtype.itemsize or len(raw) // np_dtype.itemsize != expected:
        raise SizeError(
            f"{stem}.raw holds {len(raw) / np_dtype.itemsize:g} values, header declares {expected}")
    arr = np.frombuffer(raw, dtype=np_dtype)
    return arr.reshape((*dims, nt), order="F")


def _write_pair(stem, header, arr, np_dtype):
    d = os.path.dirname(stem)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(stem + ".json", "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(stem + ".raw", "wb") as fh:
        fh.write(np.asarray(arr, dtype=np_dtype).tobytes(order="F"))


def load_volume(path):
    """Read a DVOL volume (``path`` may omit or carry the .json/.raw suffix)."""
    stem = _split_path(path)
    dims, nt, spacing, dt, dtype = _read_header(stem)
    if dtype != "f32le":
        raise FormatError(f"volume payload must be f32le, got {dtype!r}")
    arr = _read_payload(stem, dims, nt, dtype)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{stem}.raw contains NaN or Inf")
    return DynamicVolume(arr, tuple(spacing), dt)


def write_volume(path, vol):
    stem = _split_path(path)
    header = {"dims": list(vol.dims), "nt": vol.nt, "spacing_mm": list(vol.spacing),
              "dt_s": vol.dt, "dtype": "f32le"}
    _write_pair(stem, header, vol.data, "<f4")
    return stem


def load_mask(path):
    stem = _split_path(path)
    dims, nt, spacing, _, dtype = _read_header(stem)
    if dtype != "u8" or nt != 1:
        raise FormatError("mask must have dtype u8 and nt 1")
    arr = _read_payload(stem, dims, 1, dtype)
    if arr.max(initial=0) > 1:
        raise DataError(f"{stem}.raw holds values other than 0/1")
    return Mask3D(arr[..., 0], tuple(spacing))


def write_mask(path, mask):
    stem = _split_path(path)
    header = {"dims": list(mask.dims), "nt": 1, "spacing_mm": list(mask.spacing),
              "dt_s": 0.0, "dtype": "u8"}
    _write_pair(stem, header, mask.values[..., np.newaxis], "u1")
    return stem


# ---------------------------------------------------------------------------
# voxel selection


def flatten(vol, keep):
    """Gather the time curves of the voxels selected by ``keep``.

    Columns are ordered x fastest, then y, then z.
    """
    keep = keep.values if isinstance(keep, Mask3D) else np.asarray(keep, dtype=bool)
    if keep.shape != tuple(vol.dims):
        raise ArgumentError(f"mask dims {keep.shape} != volume dims {vol.dims}")
    # transpose so C-order nonzero() walks z slowest, x fastest
    zyx = np.argwhere(keep.transpose(2, 1, 0))
    if zyx.shape[0] == 0:
        raise EmptySelectionError("keep mask selects no voxels")
    index = zyx[:, ::-1]
    values = vol.data[index[:, 0], index[:, 1], index[:, 2], :].T
    return VoxelMatrix(values, index)


def scatter(vm, dims, fill=0.0):
    """Inverse of :func:`flatten`: place columns back into a (nx, ny, nz, nt) array."""
    out = np.full((*dims, vm.n_time), fill, dtype=np.float64)
    ix = vm.index
    out[ix[:, 0], ix[:, 1], ix[:, 2], :] = vm.values.T
    return out


def scatter_values(values, index, dims, fill=0.0):
    """Scatter one value per indexed voxel into a 3D array."""
    values = np.asarray(values)
    out = np.full(tuple(dims), fill, dtype=np.result_type(values, fill))
    out[index[:, 0], index[:, 1], index[:, 2]] = values
    return out


# ---------------------------------------------------------------------------
# ROI rasterization


def bresenham_line(x0, y0, x1, y1):
    """Integer grid cells on the segment (x0, y0)-(x1, y1), endpoints included."""
    x0, y0, x1, y1 = int(x0), int(y0), int(x1), int(y1)
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    cells = []
    while True:
        cells.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return cells
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _parity_fill(poly, shape):
    """Scanline even-odd fill of voxel centres; poly in voxel units (u, v)."""
    nu, nv = shape
    out = np.zeros(shape, dtype=bool)
    u = poly[:, 0]
    v = poly[:, 1]
    u2 = np.roll(u, -1)
    v2 = np.roll(v, -1)
    lo = max(int(np.ceil(v.min())), 0)
    hi = min(int(np.floor(v.max())), nv - 1)
    for row in range(lo, hi + 1):
        # half-open rule so shared vertices are counted once
        hit = ((v <= row) & (v2 > row)) | ((v2 <= row) & (v > row))
        if not hit.any():
            continue
        xs = np.sort(u[hit] + (row - v[hit]) * (u2[hit] - u[hit]) / (v2[hit] - v[hit]))
        for a, b in zip(xs[0::2], xs[1::2]):
            c0 = max(int(np.ceil(a)), 0)
            c1 = min(int(np.floor(b)), nu - 1)
            if c1 >= c0:
                out[c0:c1 + 1, row] = True
    return out


def _plane_axes(slice_axis):
    return {"x": (1, 2), "y": (0, 2), "z": (0, 1)}[slice_axis]


def rasterize_roi(roi, dims, spacing):
    """Turn per-slice polygons (mm) into a solid binary mask.

    Edges are traced with Bresenham lines between vertices rounded to the
    nearest voxel; the interior is filled by scanline parity on voxel
    centres. Vertices and cells falling outside ``dims`` are clipped.
    """
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or min(dims) < 1 or min(spacing) <= 0:
        raise ArgumentError("dims and spacing must be positive 3-tuples")
    if not roi.closed:
        raise GeometryError("ROI polylines must be closed")
    ax_u, ax_v = _plane_axes(roi.slice_axis)
    slice_ax = "xyz".index(roi.slice_axis)
    nu, nv = dims[ax_u], dims[ax_v]
    out = np.zeros(dims, dtype=bool)
    for k, pts in sorted(roi.polygons.items()):
        distinct = np.unique(pts, axis=0)
        if len(distinct) < 3:
            raise GeometryError(f"slice {k}: polygon needs >= 3 distinct vertices")
        if not 0 <= k < dims[slice_ax]:
            continue
        poly = pts / np.array([spacing[ax_u], spacing[ax_v]])
        plane = _parity_fill(poly, (nu, nv))
        ends = np.rint(poly).astype(int)
        for (a0, b0), (a1, b1) in zip(ends, np.roll(ends, -1, axis=0)):
            for a, b in bresenham_line(a0, b0, a1, b1):
                if 0 <= a < nu and 0 <= b < nv:
                    plane[a, b] = True
        sl = [slice(None)] * 3
        sl[slice_ax] = k
        out[tuple(sl)] |= plane
    return Mask3D(out, spacing)


def read_roi_csv(path, slice_axis="z"):
    """Parse ``slice_index,x_mm,y_mm`` lines into a :class:`RoiPolyline`.

    A header line is tolerated. Vertex order within a slice follows file order.
    """
    polys = defaultdict(list)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                k, a, b = int(row[0]), float(row[1]), float(row[2])
            except (ValueError, IndexError) as exc:
                if lineno == 1:
                    continue
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            polys[k].append((a, b))
    return RoiPolyline(dict(polys), slice_axis=slice_axis)


def write_roi_csv(path, roi):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice_index", "x_mm", "y_mm"])
        for k, pts in sorted(roi.polygons.items()):
            for a, b in pts:
                w.writerow([k, repr(float(a)), repr(float(b))])


# ---------------------------------------------------------------------------
# decimation


def _block_edges(n, m):
    return (np.arange(m + 1) * n) // m


def downsample_mask(m, target_dims):
    """Block-vote decimation: an output voxel is 1 iff at least half of its
    source block is 1. Blocks partition each axis as evenly as possible."""
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise ArgumentError(f"target dims must be three positive ints, got {target_dims}")
    if any(t > s for t, s in zip(target_dims, m.dims)):
        raise ArgumentError(f"target dims {target_dims} exceed mask dims {m.dims}")
    v = m.values.astype(np.int64)
    sums = v
    counts = np.ones_like(v)
    for ax, (n, t) in enumerate(zip(m.dims, target_dims)):
        edges = _block_edges(n, t)
        sums = np.add.reduceat(sums, edges[:-1], axis=ax)
        counts = np.add.reduceat(counts, edges[:-1], axis=ax)
    factor = tuple(s / t for s, t in zip(m.dims, target_dims))
    spacing = tuple(sp * f for sp, f in zip(m.spacing, factor))
    return Mask3D(2 * sums >= counts, spacing)
