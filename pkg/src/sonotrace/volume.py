"""3-D scalar volumes with physical coordinates: storage, file IO, sampling.

A volume is a regular grid of voxel centers. ``data[ix, iy, iz]`` sits at the
world point ``origin + (ix*sx, iy*sy, iz*sz)`` (mm). Two file formats are
supported:

* RAW_JSON -- a ``<name>.json`` header (dims, spacing_mm, origin_mm, dtype,
  kind, data_file) next to a little-endian binary payload, row-major with x
  fastest.
* NIFTI1 -- minimal single-file uncompressed ``.nii``: int16/float32/float64
  payloads, spacing/translation honored, any rotational sform rejected. The
  ``kind`` tag rides in the header's intent_name field.

Volumes are immutable after construction and safe to share across workers.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, VolumeFormatError

#: Impedance of a water-like couplant, used for samples outside the volume.
DEFAULT_BACKGROUND_MRAYL = 1.48

#: Floor applied to impedance samples; keeps reflection coefficients < 1.
IMPEDANCE_FLOOR_MRAYL = 1e-4


class VolumeKind(Enum):
    HU = "HU"
    MRI_INTENSITY = "MRI_INTENSITY"
    IMPEDANCE_MRAYL = "IMPEDANCE_MRAYL"


class VolumeFormat(Enum):
    RAW_JSON = "RAW_JSON"
    NIFTI1 = "NIFTI1"


_DTYPE_TAGS = {"f32": np.float32, "f64": np.float64, "i16": np.int16}
_NIFTI_DTYPES = {4: np.int16, 16: np.float32, 64: np.float64}
_NIFTI_CODES = {np.dtype(np.int16): 4, np.dtype(np.float32): 16, np.dtype(np.float64): 64}


@dataclass(frozen=True)
class VolumeGrid:
    """Regular 3-D scalar field with voxel spacing and world origin (mm)."""

    dims: tuple
    spacing: tuple
    origin: tuple
    data: np.ndarray  # shape dims, float64, C order
    kind: VolumeKind

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ConfigError(f"dims must be three positive integers, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ConfigError(f"spacing must be strictly positive, got {spacing}")
        data = np.array(self.data, dtype=np.float64, order="C")  # private copy
        if data.size != dims[0] * dims[1] * dims[2]:
            raise VolumeFormatError(
                f"payload of {data.size} values does not match dims {dims} "
                f"({dims[0] * dims[1] * dims[2]} voxels)"
            )
        data = data.reshape(dims)
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("volume contains NaN or Inf values")
        if self.kind is VolumeKind.IMPEDANCE_MRAYL and np.any(data <= 0):
            raise VolumeFormatError("impedance volumes must be strictly positive")
        data.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "data", data)

    def with_data(self, data: np.ndarray, kind: VolumeKind | None = None) -> "VolumeGrid":
        """Same grid geometry, new values (used by pointwise maps)."""
        return VolumeGrid(self.dims, self.spacing, self.origin, data, kind or self.kind)

    def crop(self, lo, hi) -> "VolumeGrid":
        """Sub-volume over voxel index ranges [lo, hi) per axis; origin shifts."""
        lo = tuple(int(v) for v in lo)
        hi = tuple(int(v) for v in hi)
        if any(l < 0 or h > d or h <= l for l, h, d in zip(lo, hi, self.dims)):
            raise ConfigError(f"crop range {lo}..{hi} outside dims {self.dims}")
        data = self.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].copy()
        origin = tuple(o + l * s for o, l, s in zip(self.origin, lo, self.spacing))
        return VolumeGrid(data.shape, self.spacing, origin, data, self.kind)

    def voxel_center(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(idx) * np.asarray(self.spacing)


# ---------------------------------------------------------------------------
# sampling

def _to_points(p):
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if pts.shape[-1] != 3:
        raise ConfigError("points must have 3 components")
    return pts


def sample_trilinear(v: VolumeGrid, p, outside: float = DEFAULT_BACKGROUND_MRAYL):
    """Trilinear interpolation at world point(s) ``p`` (mm).

    Points beyond the convex hull of voxel centers return the constant
    ``outside`` value, so rays leaving the volume see a homogeneous couplant.
    Total function: never raises for finite inputs.
    """
    pts = _to_points(p)
    vals, _, _, _ = _trilinear_parts(v, pts, outside)
    return float(vals[0]) if np.ndim(p) == 1 else vals


def sample_nearest(v: VolumeGrid, p, outside: float = DEFAULT_BACKGROUND_MRAYL):
    """Nearest-neighbor sampling variant (kept for ablation experiments)."""
    pts = _to_points(p)
    u = (pts - np.asarray(v.origin)) / np.asarray(v.spacing)
    dims = np.asarray(v.dims)
    inside = np.all((u >= 0.0) & (u <= dims - 1.0), axis=1)
    idx = np.clip(np.rint(u).astype(np.int64), 0, dims - 1)
    vals = np.full(len(pts), float(outside))
    if np.any(inside):
        ii = idx[inside]
        vals[inside] = v.data[ii[:, 0], ii[:, 1], ii[:, 2]]
    return float(vals[0]) if np.ndim(p) == 1 else vals


def _trilinear_parts(v: VolumeGrid, pts: np.ndarray, outside: float):
    """Shared core: values, flat corner indices (M,8), weights (M,8), inside mask."""
    dims = np.asarray(v.dims)
    u = (pts - np.asarray(v.origin)) / np.asarray(v.spacing)
    inside = np.all((u >= 0.0) & (u <= dims - 1.0), axis=1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, np.maximum(dims - 2, 0))
    f = u - i0
    f = np.clip(f, 0.0, 1.0)
    nx, ny, nz = v.dims
    flat = v.data.reshape(-1)
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    # corner order: (dx, dy, dz) in binary order dz fastest
    offsets = np.array([((dx * ny + dy) * nz + dz)
                        for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64)
    # degenerate axes (dim == 1): offset 0 in that axis
    if nx == 1 or ny == 1 or nz == 1:
        offsets = np.array([(((dx if nx > 1 else 0) * ny + (dy if ny > 1 else 0)) * nz
                             + (dz if nz > 1 else 0))
                            for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64)
    idx8 = base[:, None] + offsets[None, :]
    wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
    wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
    wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
    w8 = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    vals = np.where(inside, np.einsum("mc,mc->m", flat[idx8], w8), float(outside))
    return vals, idx8, w8, inside


def sample_trilinear_with_weights(v: VolumeGrid, pts):
    """Values plus the 8-corner stencil (flat voxel indices and weights).

    Outside points report ``inside=False`` and must not contribute gradients.
    """
    pts = _to_points(pts)
    return _trilinear_parts(v, pts, DEFAULT_BACKGROUND_MRAYL)


def sample_trilinear_spatial_grad(v: VolumeGrid, pts, outside: float = DEFAULT_BACKGROUND_MRAYL):
    """Gradient of the trilinear field w.r.t. world position, (M, 3) in 1/mm.

    Zero outside the volume (the background is constant).
    """
    pts = _to_points(pts)
    dims = np.asarray(v.dims)
    u = (pts - np.asarray(v.origin)) / np.asarray(v.spacing)
    inside = np.all((u >= 0.0) & (u <= dims - 1.0), axis=1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, np.maximum(dims - 2, 0))
    f = np.clip(u - i0, 0.0, 1.0)
    nx, ny, nz = v.dims
    d = v.data

    def corner(dx, dy, dz):
        ix = np.minimum(i0[:, 0] + (dx if nx > 1 else 0), nx - 1)
        iy = np.minimum(i0[:, 1] + (dy if ny > 1 else 0), ny - 1)
        iz = np.minimum(i0[:, 2] + (dz if nz > 1 else 0), nz - 1)
        return d[ix, iy, iz]

    c = {(dx, dy, dz): corner(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)}
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx = np.zeros(len(pts))
    gy = np.zeros(len(pts))
    gz = np.zeros(len(pts))
    for dy in (0, 1):
        for dz in (0, 1):
            wyz = (fy if dy else 1 - fy) * (fz if dz else 1 - fz)
            gx += wyz * (c[(1, dy, dz)] - c[(0, dy, dz)])
    for dx in (0, 1):
        for dz in (0, 1):
            wxz = (fx if dx else 1 - fx) * (fz if dz else 1 - fz)
            gy += wxz * (c[(dx, 1, dz)] - c[(dx, 0, dz)])
    for dx in (0, 1):
        for dy in (0, 1):
            wxy = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            gz += wxy * (c[(dx, dy, 1)] - c[(dx, dy, 0)])
    g = np.stack([gx, gy, gz], axis=1) / np.asarray(v.spacing)
    g[~inside] = 0.0
    return g


# ---------------------------------------------------------------------------
# file IO

def save_volume(v: VolumeGrid, path, fmt: VolumeFormat, dtype: str = "f64") -> None:
    """Write ``v`` so that :func:`load_volume` reproduces it exactly.

    The default f64 payload keeps round-trips bit-exact.
    """
    path = Path(path)
    if fmt is VolumeFormat.RAW_JSON:
        _save_raw_json(v, path, dtype)
    elif fmt is VolumeFormat.NIFTI1:
        _save_nifti1(v, path, dtype)
    else:
        raise ConfigError(f"unknown format {fmt!r}")


def load_volume(path, fmt: VolumeFormat, kind: VolumeKind | None = None) -> VolumeGrid:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"volume file not found: {path}")
    if fmt is VolumeFormat.RAW_JSON:
        return _load_raw_json(path, kind)
    if fmt is VolumeFormat.NIFTI1:
        return _load_nifti1(path, kind)
    raise ConfigError(f"unknown format {fmt!r}")


def _x_fastest(data: np.ndarray) -> np.ndarray:
    # flat stream with x varying fastest == Fortran ravel of data[ix,iy,iz]
    return np.asfortranarray(data).ravel(order="F")


def _from_x_fastest(flat: np.ndarray, dims) -> np.ndarray:
    return np.ascontiguousarray(flat.reshape(dims, order="F"))


def _save_raw_json(v: VolumeGrid, path: Path, dtype: str) -> None:
    if dtype not in _DTYPE_TAGS:
        raise ConfigError(f"dtype must be one of {sorted(_DTYPE_TAGS)}, got {dtype!r}")
    data_name = path.with_suffix(".raw").name
    header = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing),
        "origin_mm": list(v.origin),
        "dtype": dtype,
        "kind": v.kind.value,
        "data_file": data_name,
    }
    payload = _x_fastest(v.data).astype(_DTYPE_TAGS[dtype])
    try:
        path.write_text(json.dumps(header, indent=2) + "\n")
        (path.parent / data_name).write_bytes(payload.astype(payload.dtype.newbyteorder("<")).tobytes())
    except OSError as exc:
        raise VolumeFormatError(f"cannot write volume to {path}: {exc}") from exc


def _load_raw_json(path: Path, kind: VolumeKind | None) -> VolumeGrid:
    try:
        header = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise VolumeFormatError(f"malformed RAW_JSON header {path}: {exc}") from exc
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        origin = tuple(float(o) for o in header["origin_mm"])
        dtype_tag = header["dtype"]
        file_kind = VolumeKind(header["kind"])
        data_file = header["data_file"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed RAW_JSON header {path}: {exc}") from exc
    if dtype_tag not in _DTYPE_TAGS:
        raise VolumeFormatError(f"unsupported dtype {dtype_tag!r} in {path}")
    raw = (path.parent / data_file).read_bytes()
    arr = np.frombuffer(raw, dtype=np.dtype(_DTYPE_TAGS[dtype_tag]).newbyteorder("<"))
    nvox = dims[0] * dims[1] * dims[2]
    if arr.size != nvox:
        raise VolumeFormatError(
            f"payload of {arr.size} values does not match dims {dims} ({nvox} voxels)")
    data = _from_x_fastest(arr.astype(np.float64), dims)
    return VolumeGrid(dims, spacing, origin, data, kind or file_kind)


_HDR_SIZE = 348


def _save_nifti1(v: VolumeGrid, path: Path, dtype: str) -> None:
    if dtype not in _DTYPE_TAGS:
        raise ConfigError(f"dtype must be one of {sorted(_DTYPE_TAGS)}, got {dtype!r}")
    np_dtype = np.dtype(_DTYPE_TAGS[dtype])
    code = _NIFTI_CODES[np_dtype]
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *v.dims, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, np_dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)    # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)    # scl_inter
    struct.pack_into("<h", hdr, 252, 0)      # qform_code
    struct.pack_into("<h", hdr, 254, 1)      # sform_code
    struct.pack_into("<4f", hdr, 280, v.spacing[0], 0.0, 0.0, v.origin[0])
    struct.pack_into("<4f", hdr, 296, 0.0, v.spacing[1], 0.0, v.origin[1])
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, v.spacing[2], v.origin[2])
    hdr[328:328 + 16] = v.kind.value.encode("ascii")[:16].ljust(16, b"\0")
    hdr[344:348] = b"n+1\0"
    payload = _x_fastest(v.data).astype(np_dtype.newbyteorder("<"))
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(hdr))
            fh.write(b"\0\0\0\0")  # pad to vox_offset 352
            fh.write(payload.tobytes())
    except OSError as exc:
        raise VolumeFormatError(f"cannot write volume to {path}: {exc}") from exc


def _load_nifti1(path: Path, kind: VolumeKind | None) -> VolumeGrid:
    blob = path.read_bytes()
    if len(blob) < _HDR_SIZE + 4:
        raise VolumeFormatError(f"{path} is too small for a NIfTI-1 header")
    (size,) = struct.unpack_from("<i", blob, 0)
    if size != _HDR_SIZE:
        raise VolumeFormatError(
            f"{path}: header size {size} != 348 (not little-endian NIfTI-1?)")
    magic = blob[344:348]
    if magic != b"n+1\0":
        raise VolumeFormatError(f"{path}: bad magic {magic!r}, expected single-file 'n+1'")
    dim = struct.unpack_from("<8h", blob, 40)
    if dim[0] != 3:
        raise VolumeFormatError(f"{path}: only 3-D volumes supported, got dim[0]={dim[0]}")
    dims = tuple(int(d) for d in dim[1:4])
    (datatype,) = struct.unpack_from("<h", blob, 70)
    if datatype not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", blob, 76)
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    (scl_slope,) = struct.unpack_from("<f", blob, 112)
    (scl_inter,) = struct.unpack_from("<f", blob, 116)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        raise VolumeFormatError(f"{path}: scl_slope/scl_inter rescaling not supported")
    (sform_code,) = struct.unpack_from("<h", blob, 254)
    spacing = tuple(float(s) for s in pixdim[1:4])
    origin = (0.0, 0.0, 0.0)
    if sform_code > 0:
        srow = np.array([
            struct.unpack_from("<4f", blob, 280),
            struct.unpack_from("<4f", blob, 296),
            struct.unpack_from("<4f", blob, 312),
        ])
        rot = srow[:, :3].copy()
        np.fill_diagonal(rot, 0.0)
        if np.any(np.abs(rot) > 1e-6 * max(1.0, np.abs(srow[:, :3]).max())):
            raise VolumeFormatError(
                f"{path}: rotational sform not supported (rendering applies its own pose)")
        spacing = tuple(float(srow[i, i]) for i in range(3))
        origin = tuple(float(srow[i, 3]) for i in range(3))
    np_dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    start = int(vox_offset)
    nvox = dims[0] * dims[1] * dims[2]
    need = start + nvox * np_dtype.itemsize
    if len(blob) < need:
        raise VolumeFormatError(
            f"{path}: payload truncated ({len(blob)} bytes, need {need})")
    arr = np.frombuffer(blob, dtype=np_dtype, count=nvox, offset=start)
    if not np.all(np.isfinite(arr.astype(np.float64))):
        raise VolumeFormatError(f"{path}: NaN in payload")
    data = _from_x_fastest(arr.astype(np.float64), dims)
    file_kind = kind
    if file_kind is None:
        tag = blob[328:344].rstrip(b"\0").decode("ascii", "ignore")
        try:
            file_kind = VolumeKind(tag)
        except ValueError:
            file_kind = VolumeKind.HU
    return VolumeGrid(dims, spacing, origin, data, file_kind)
