"""
Core data types and preprocessing for voxel time series.

A `Volume4D` is the raw acquisition (x, y, z, t). Preprocessing smooths it,
masks and thresholds it, and linearizes it into a `DataMatrix` Y of shape
(t, n): one row per time point, one column per retained voxel.
"""
import io
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import correlate1d

from artifact_io import canonical_json, write_bytes_atomic, write_text_atomic

logger = logging.getLogger(__name__)

# FWHM = 2*sqrt(2*ln 2) * sigma for a Gaussian kernel
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
KERNEL_TRUNCATE_SIGMAS = 4.0
MATRIX_BINARY_DTYPE = "<f8"


class DimensionMismatchError(ValueError):
    """Shapes of combined inputs disagree."""


class EmptySelectionError(ValueError):
    """A selection step left no voxel columns."""


@dataclass
class Volume4D:
    """
    A 4-D scalar field: 3-D voxel grid evolving over time.

    Attributes:
        values: float64 array of shape (nx, ny, nz, nt)
        spacing_mm: voxel edge lengths (sx, sy, sz) in millimetres
    """

    values: NDArray[np.float64]
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 3:
            values = values[..., np.newaxis]
        if values.ndim != 4:
            raise DimensionMismatchError(f"Volume4D needs 4 axes, got shape {values.shape}")
        if min(values.shape) < 1:
            raise DimensionMismatchError(f"all dims must be >= 1, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("Volume4D values must all be finite")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing_mm must be three positive reals, got {self.spacing_mm}")
        self.values = values
        self.spacing_mm = spacing

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def spatial_dims(self) -> Tuple[int, int, int]:
        return self.dims[:3]

    @property
    def nt(self) -> int:
        return self.dims[3]


@dataclass
class VoxelMask:
    """Boolean inclusion flag per voxel of a 3-D grid."""

    included: NDArray[np.bool_]

    def __post_init__(self):
        included = np.asarray(self.included).astype(bool)
        if included.ndim != 3:
            raise DimensionMismatchError(f"VoxelMask needs 3 axes, got shape {included.shape}")
        self.included = included

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.included.shape)

    @property
    def count(self) -> int:
        return int(self.included.sum())


@dataclass
class DataMatrix:
    """
    The linearized analysis matrix Y (t rows, n columns).

    `voxel_index` maps every column back to its (x, y, z) grid position.
    `grid_dims` and `spacing_mm` are kept when known so a matrix can be
    turned back into a volume (e.g. to smooth a simulated slice).
    `fwhm_mm` is the Gaussian smoothing already applied to the values.
    """

    values: NDArray[np.float64]
    voxel_index: NDArray[np.int64]
    grid_dims: Optional[Tuple[int, int, int]] = None
    spacing_mm: Optional[Tuple[float, float, float]] = None
    fwhm_mm: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DimensionMismatchError(f"DataMatrix needs 2 axes, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("DataMatrix values must all be finite")
        index = np.asarray(self.voxel_index, dtype=np.int64).reshape(-1, 3)
        if index.shape[0] != values.shape[1]:
            raise DimensionMismatchError(
                f"voxel_index has {index.shape[0]} entries for {values.shape[1]} columns"
            )
        if np.unique(index, axis=0).shape[0] != index.shape[0]:
            raise ValueError("voxel_index entries must be distinct")
        if index.size and index.min() < 0:
            raise ValueError("voxel_index entries must be non-negative")
        if self.grid_dims is not None:
            self.grid_dims = tuple(int(d) for d in self.grid_dims)
            if index.size and np.any(index.max(axis=0) >= np.asarray(self.grid_dims)):
                raise ValueError(f"voxel_index exceeds grid bounds {self.grid_dims}")
        if self.spacing_mm is not None:
            self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.fwhm_mm = float(self.fwhm_mm)
        if not self.fwhm_mm >= 0:
            raise ValueError(f"fwhm_mm must be non-negative, got {self.fwhm_mm}")
        self.values = values
        self.voxel_index = index

    @property
    def t(self) -> int:
        return int(self.values.shape[0])

    @property
    def n(self) -> int:
        return int(self.values.shape[1])

    def with_values(self, values: NDArray[np.float64]) -> "DataMatrix":
        """Same columns and grid, new values."""
        return DataMatrix(values, self.voxel_index.copy(), self.grid_dims, self.spacing_mm, self.fwhm_mm)


def _scan_order_coords(selected: NDArray[np.bool_]) -> NDArray[np.int64]:
    """Coordinates of True voxels, x fastest, then y, then z."""
    zyx = np.argwhere(selected.transpose(2, 1, 0))
    return zyx[:, ::-1].astype(np.int64)


def full_mask(v: Volume4D) -> VoxelMask:
    return VoxelMask(np.ones(v.spatial_dims, dtype=bool))


def mask_from_mean(v: Volume4D, fraction: float = 0.1) -> VoxelMask:
    """
    Intensity mask for datasets shipped without a brain mask.

    Keeps voxels whose temporal mean exceeds `fraction` of the largest
    temporal mean in the volume.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    mean = v.values.mean(axis=3)
    peak = mean.max()
    if peak <= 0:
        return VoxelMask(np.zeros(v.spatial_dims, dtype=bool))
    return VoxelMask(mean > fraction * peak)


def apply_mask_and_threshold(v: Volume4D, mask: VoxelMask, activity_threshold: float) -> DataMatrix:
    """
    Keep voxels inside the mask with non-negligible temporal activity.

    A voxel survives when its temporal standard deviation exceeds
    `activity_threshold` times the largest temporal standard deviation
    among mask-included voxels. Columns come out in scan order.

    Raises:
        DimensionMismatchError: mask grid differs from the volume grid
        EmptySelectionError: no voxel survives
    """
    if mask.dims != v.spatial_dims:
        raise DimensionMismatchError(f"mask dims {mask.dims} != volume spatial dims {v.spatial_dims}")
    if activity_threshold < 0:
        raise ValueError(f"activity_threshold must be >= 0, got {activity_threshold}")
    if mask.count == 0:
        raise EmptySelectionError("mask includes no voxel")

    activity = v.values.std(axis=3)
    peak = activity[mask.included].max()
    survivors = mask.included & (activity > activity_threshold * peak)
    if not survivors.any():
        raise EmptySelectionError(
            f"no voxel survives threshold {activity_threshold} (peak temporal std {peak:g})"
        )

    coords = _scan_order_coords(survivors)
    columns = v.values[coords[:, 0], coords[:, 1], coords[:, 2], :]
    logger.info("kept %d of %d masked voxels", coords.shape[0], mask.count)
    return DataMatrix(columns.T.copy(), coords, v.spatial_dims, v.spacing_mm)


def volume_to_matrix(v: Volume4D, mask: Optional[VoxelMask] = None) -> DataMatrix:
    """Linearize every mask-included voxel, without any activity filter."""
    mask = mask or full_mask(v)
    if mask.dims != v.spatial_dims:
        raise DimensionMismatchError(f"mask dims {mask.dims} != volume spatial dims {v.spatial_dims}")
    if mask.count == 0:
        raise EmptySelectionError("mask includes no voxel")
    coords = _scan_order_coords(mask.included)
    columns = v.values[coords[:, 0], coords[:, 1], coords[:, 2], :]
    return DataMatrix(columns.T.copy(), coords, v.spatial_dims, v.spacing_mm)


def matrix_to_volume(m: DataMatrix, fill: float = 0.0) -> Volume4D:
    """Scatter matrix columns back onto their grid; other voxels get `fill`."""
    if m.grid_dims is None:
        raise ValueError("DataMatrix carries no grid_dims; cannot rebuild a volume")
    values = np.full(m.grid_dims + (m.t,), fill, dtype=np.float64)
    idx = m.voxel_index
    values[idx[:, 0], idx[:, 1], idx[:, 2], :] = m.values.T
    return Volume4D(values, m.spacing_mm or (1.0, 1.0, 1.0))


def fwhm_to_sigma(fwhm_mm: float) -> float:
    if not fwhm_mm > 0:
        raise ValueError(f"fwhm_mm must be positive, got {fwhm_mm}")
    return fwhm_mm / FWHM_PER_SIGMA


def gaussian_kernel_1d(sigma_vox: float) -> NDArray[np.float64]:
    """Unit-sum Gaussian samples truncated at +-4 sigma."""
    radius = int(math.ceil(KERNEL_TRUNCATE_SIGMAS * sigma_vox))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma_vox) ** 2)
    return kernel / kernel.sum()


def gaussian_smooth(v: Volume4D, fwhm_mm: float, edge_mode: str = "renormalize") -> Volume4D:
    """
    Smooth every time frame with a separable 3-D Gaussian.

    Per-axis sigma in voxels is fwhm_to_sigma(fwhm_mm) / spacing. With
    edge_mode "renormalize" the kernel is renormalized over the in-bounds
    support; "wrap" treats the grid as periodic.
    """
    if fwhm_mm < 0:
        raise ValueError(f"fwhm_mm must be >= 0, got {fwhm_mm}")
    if edge_mode not in ("renormalize", "wrap"):
        raise ValueError(f"unknown edge_mode {edge_mode!r}")
    if fwhm_mm == 0:
        return v

    sigma_mm = fwhm_to_sigma(fwhm_mm)
    values = v.values
    for axis in range(3):
        kernel = gaussian_kernel_1d(sigma_mm / v.spacing_mm[axis])
        if kernel.size == 1:
            continue
        if edge_mode == "wrap":
            values = correlate1d(values, kernel, axis=axis, mode="grid-wrap")
            continue
        values = correlate1d(values, kernel, axis=axis, mode="constant", cval=0.0)
        # in-bounds kernel mass per position along this axis
        support = correlate1d(np.ones(values.shape[axis]), kernel, mode="constant", cval=0.0)
        shape = [1, 1, 1, 1]
        shape[axis] = -1
        values = values / support.reshape(shape)
    return Volume4D(values, v.spacing_mm)


def smooth_matrix(m: DataMatrix, fwhm_mm: float, edge_mode: str = "renormalize") -> DataMatrix:
    """Smooth a gridded matrix in voxel space and keep its original columns."""
    if fwhm_mm == 0:
        return m
    smoothed = gaussian_smooth(matrix_to_volume(m), fwhm_mm, edge_mode)
    idx = m.voxel_index
    result = m.with_values(smoothed.values[idx[:, 0], idx[:, 1], idx[:, 2], :].T.copy())
    # successive Gaussian kernels add in quadrature
    result.fwhm_mm = round(float(np.hypot(m.fwhm_mm, fwhm_mm)), 6)
    return result


def decimate(m: DataMatrix, spatial_stride: int) -> DataMatrix:
    """Keep columns whose (x, y, z) coordinates are all multiples of the stride."""
    if int(spatial_stride) != spatial_stride or spatial_stride < 1:
        raise ValueError(f"spatial_stride must be a positive integer, got {spatial_stride}")
    if spatial_stride == 1:
        return m
    keep = np.all(m.voxel_index % spatial_stride == 0, axis=1)
    if not keep.any():
        raise EmptySelectionError(f"decimation with stride {spatial_stride} leaves no column")
    return DataMatrix(m.values[:, keep].copy(), m.voxel_index[keep], m.grid_dims, m.spacing_mm, m.fwhm_mm)


def linearize_slice(maps: Sequence[NDArray], timecourses: Sequence[NDArray]) -> DataMatrix:
    """
    Mix 2-D spatial maps with their time courses into one (t, n) matrix.

    Each map is flattened row-major (column index fastest, stored as x;
    row index as y) and the result is the sum over maps of
    timecourse (column) times flattened map (row).
    """
    if len(maps) == 0 or len(maps) != len(timecourses):
        raise DimensionMismatchError(f"{len(maps)} maps for {len(timecourses)} timecourses")
    maps = [np.asarray(mp, dtype=np.float64) for mp in maps]
    timecourses = [np.asarray(tc, dtype=np.float64).ravel() for tc in timecourses]
    shape = maps[0].shape
    if len(shape) != 2 or any(mp.shape != shape for mp in maps):
        raise DimensionMismatchError(f"maps must share one 2-D shape, got {[mp.shape for mp in maps]}")
    t = timecourses[0].size
    if any(tc.size != t for tc in timecourses):
        raise DimensionMismatchError(f"timecourses differ in length: {[tc.size for tc in timecourses]}")

    values = np.zeros((t, shape[0] * shape[1]), dtype=np.float64)
    # fixed accumulation order keeps the sum bit-reproducible
    for mp, tc in zip(maps, timecourses):
        values += np.outer(tc, mp.ravel(order="C"))

    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    index = np.stack([cols.ravel(), rows.ravel(), np.zeros(cols.size, dtype=np.int64)], axis=1)
    return DataMatrix(values, index, (shape[1], shape[0], 1), None)


def write_matrix_csv(m: DataMatrix, path: Union[str, Path]) -> Path:
    """CSV export: header of voxel coordinates, then one line per time point."""
    buf = io.StringIO()
    header = ",".join(f"{x}:{y}:{z}" for x, y, z in m.voxel_index)
    np.savetxt(buf, m.values, delimiter=",", fmt="%.17g", header=header, comments="")
    return write_text_atomic(path, buf.getvalue())


def _matrix_header(m: DataMatrix) -> dict:
    return {
        "t": m.t,
        "n": m.n,
        "dtype": MATRIX_BINARY_DTYPE,
        "voxel_index": m.voxel_index,
        "grid_dims": m.grid_dims,
        "spacing_mm": m.spacing_mm,
        "fwhm_mm": m.fwhm_mm,
    }


def write_matrix_binary(m: DataMatrix, path: Union[str, Path]) -> Path:
    """
    Binary export: u64 little-endian header length, JSON header, float64 payload.

    The payload is row-major (time points outermost) little-endian float64.
    """
    header = canonical_json(_matrix_header(m)).encode("utf-8")
    payload = m.values.astype(MATRIX_BINARY_DTYPE).tobytes(order="C")
    return write_bytes_atomic(path, struct.pack("<Q", len(header)) + header + payload)


def read_matrix_header(path: Union[str, Path]) -> dict:
    """JSON header of a binary matrix file, without reading the payload."""
    with open(path, "rb") as f:
        prefix = f.read(8)
        if len(prefix) < 8:
            raise ValueError(f"{path}: truncated matrix file")
        (header_len,) = struct.unpack("<Q", prefix)
        return json.loads(f.read(header_len).decode("utf-8"))


def read_matrix_binary(path: Union[str, Path]) -> DataMatrix:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated matrix file")
    (header_len,) = struct.unpack_from("<Q", raw, 0)
    header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    t, n = int(header["t"]), int(header["n"])
    payload = raw[8 + header_len:]
    expected = t * n * np.dtype(MATRIX_BINARY_DTYPE).itemsize
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype=MATRIX_BINARY_DTYPE).reshape(t, n).astype(np.float64)
    index = np.asarray(header["voxel_index"], dtype=np.int64).reshape(-1, 3)
    grid = tuple(header["grid_dims"]) if header.get("grid_dims") else None
    spacing = tuple(header["spacing_mm"]) if header.get("spacing_mm") else None
    return DataMatrix(values, index, grid, spacing, float(header.get("fwhm_mm", 0.0)))
