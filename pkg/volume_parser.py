"""
Reader and writer for 4-D voxel volumes: single-file NIfTI-1 and raw float32.
"""
import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import yaml

from artifact_io import canonical_json, write_bytes_atomic, write_text_atomic
from datamodel import Volume4D, VoxelMask

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NIFTI1 = "nifti1"
RAW_F32 = "raw-f32-4d"
FORMATS = (NIFTI1, RAW_F32)

NIFTI1_HEADER_SIZE = 348
NIFTI1_SINGLE_FILE_MAGIC = b"n+1\x00"
NIFTI1_MIN_VOX_OFFSET = 352
GZIP_MAGIC = b"\x1f\x8b"

# (field, numpy type[, shape]); byte offsets follow the NIfTI-1 standard
NIFTI1_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),      # 0; must be 348
    ("data_type", "S10"),      # 4
    ("db_name", "S18"),        # 14
    ("extents", "i4"),         # 32
    ("session_error", "i2"),   # 36
    ("regular", "S1"),         # 38
    ("dim_info", "u1"),        # 39
    ("dim", "i2", (8,)),       # 40
    ("intent_p1", "f4"),       # 56
    ("intent_p2", "f4"),       # 60
    ("intent_p3", "f4"),       # 64
    ("intent_code", "i2"),     # 68
    ("datatype", "i2"),        # 70
    ("bitpix", "i2"),          # 72
    ("slice_start", "i2"),     # 74
    ("pixdim", "f4", (8,)),    # 76
    ("vox_offset", "f4"),      # 108
    ("scl_slope", "f4"),       # 112
    ("scl_inter", "f4"),       # 116
    ("slice_end", "i2"),       # 120
    ("slice_code", "u1"),      # 122
    ("xyzt_units", "u1"),      # 123
    ("cal_max", "f4"),         # 124
    ("cal_min", "f4"),         # 128
    ("slice_duration", "f4"),  # 132
    ("toffset", "f4"),         # 136
    ("glmax", "i4"),           # 140
    ("glmin", "i4"),           # 144
    ("descrip", "S80"),        # 148
    ("aux_file", "S24"),       # 228
    ("qform_code", "i2"),      # 252
    ("sform_code", "i2"),      # 254
    ("quatern_b", "f4"),       # 256
    ("quatern_c", "f4"),       # 260
    ("quatern_d", "f4"),       # 264
    ("qoffset_x", "f4"),       # 268
    ("qoffset_y", "f4"),       # 272
    ("qoffset_z", "f4"),       # 276
    ("srow_x", "f4", (4,)),    # 280
    ("srow_y", "f4", (4,)),    # 296
    ("srow_z", "f4", (4,)),    # 312
    ("intent_name", "S16"),    # 328
    ("magic", "S4"),           # 344
]
NIFTI1_HEADER_DTYPE = np.dtype(NIFTI1_HEADER_FIELDS)

OFFSET_DIM = 40
OFFSET_DATATYPE = 70
OFFSET_BITPIX = 72
OFFSET_PIXDIM = 76
OFFSET_VOX_OFFSET = 108
OFFSET_MAGIC = 344

# datatype code -> (numpy kind, bits)
NIFTI1_DATATYPES = {
    4: ("i2", 16),    # int16
    16: ("f4", 32),   # float32
    64: ("f8", 64),   # float64
}
NIFTI1_CODE_BY_NAME = {"int16": 4, "float32": 16, "float64": 64}

NIFTI_UNITS_MM = 2
NIFTI_UNITS_SEC = 8

SIDECAR_KEYS = ("nx", "ny", "nz", "nt", "sx", "sy", "sz")


class VolumeFormatError(ValueError):
    """A volume file does not parse under its declared format."""

    def __init__(self, path: PathLike, offset: int, message: str):
        self.path = str(path)
        self.offset = int(offset)
        super().__init__(f"{self.path} @ byte {self.offset}: {message}")


def sidecar_path(path: PathLike) -> Path:
    """Sidecar descriptor of a raw-f32-4d payload: `<payload>.json`."""
    path = Path(path)
    return path.with_name(path.name + ".json")


def detect_format(path: PathLike) -> str:
    name = Path(path).name.lower()
    if name.endswith(".nii.gz"):
        raise VolumeFormatError(path, 0, "compressed NIfTI is not supported; decompress to .nii first")
    if name.endswith(".nii"):
        return NIFTI1
    if name.endswith((".f32", ".raw", ".bin")):
        return RAW_F32
    raise VolumeFormatError(path, 0, "cannot infer format from file name; declare it explicitly")


class VolumeParser:
    """Parse voxel volumes from disk into `Volume4D` objects."""

    def parse_file(self, file_path: PathLike, fmt: str = "auto") -> Volume4D:
        """
        Load one volume.

        Args:
            file_path: Path to the volume file (for raw, the payload file)
            fmt: "nifti1", "raw-f32-4d" or "auto" (by file name)

        Returns:
            Volume4D with dims and spacing from the header or sidecar

        Raises:
            VolumeFormatError: malformed header, unsupported datatype or
                payload size mismatch, with byte offset context
        """
        file_path = Path(file_path)
        if fmt == "auto":
            fmt = detect_format(file_path)
        if fmt == NIFTI1:
            return self._parse_nifti1(file_path)
        if fmt == RAW_F32:
            return self._parse_raw(file_path)
        raise ValueError(f"unknown volume format {fmt!r}; expected one of {FORMATS}")

    def parse_directory(self, directory: PathLike, fmt: str = "auto") -> List[Tuple[Path, Volume4D]]:
        """
        Load every volume file in a directory (non-recursive, sorted by name).

        Args:
            directory: Directory containing .nii or raw payload files
            fmt: Format for every file, or "auto"

        Returns:
            List of (path, volume) pairs
        """
        return [(p, self.parse_file(p, fmt)) for p in self.volume_files(directory, fmt)]

    def volume_files(self, directory: PathLike, fmt: str = "auto") -> List[Path]:
        """Volume payload files of a directory, sorted by name."""
        directory = Path(directory)
        patterns = ("*.nii",) if fmt == NIFTI1 else ("*.f32", "*.raw", "*.bin") if fmt == RAW_F32 \
            else ("*.nii", "*.f32", "*.raw", "*.bin")
        return sorted({p for pattern in patterns for p in directory.glob(pattern)})

    def parse_mask(self, file_path: PathLike, fmt: str = "auto") -> VoxelMask:
        """Read a mask volume; voxels with value > 0 in the first frame are included."""
        volume = self.parse_file(file_path, fmt)
        return VoxelMask(volume.values[..., 0] > 0)

    def _parse_nifti1(self, path: Path) -> Volume4D:
        raw = path.read_bytes()
        if raw[:2] == GZIP_MAGIC:
            raise VolumeFormatError(path, 0, "gzip stream found; compressed NIfTI is not supported")
        if len(raw) < NIFTI1_HEADER_SIZE:
            raise VolumeFormatError(path, len(raw), f"file ends before the {NIFTI1_HEADER_SIZE}-byte header")

        endian = None
        for candidate in ("<", ">"):
            if int(np.frombuffer(raw, dtype=candidate + "i4", count=1)[0]) == NIFTI1_HEADER_SIZE:
                endian = candidate
                break
        if endian is None:
            raise VolumeFormatError(path, 0, "sizeof_hdr is not 348 in either byte order")

        hdr = np.frombuffer(raw, dtype=NIFTI1_HEADER_DTYPE.newbyteorder(endian), count=1)[0]

        magic = bytes(raw[OFFSET_MAGIC:OFFSET_MAGIC + 4])
        if magic != NIFTI1_SINGLE_FILE_MAGIC:
            raise VolumeFormatError(path, OFFSET_MAGIC, f"magic {magic!r} is not single-file NIfTI-1 'n+1'")

        dim = [int(d) for d in hdr["dim"]]
        ndim = dim[0]
        if not 1 <= ndim <= 7:
            raise VolumeFormatError(path, OFFSET_DIM, f"dim[0]={ndim} outside 1..7")
        if any(d > 1 for d in dim[5:ndim + 1]):
            raise VolumeFormatError(path, OFFSET_DIM + 10, f"dims beyond the 4th are not supported: {dim}")
        shape = [dim[i] if i <= ndim else 1 for i in range(1, 5)]
        if any(d < 1 for d in shape):
            raise VolumeFormatError(path, OFFSET_DIM + 2, f"non-positive dimension in {shape}")

        code = int(hdr["datatype"])
        if code not in NIFTI1_DATATYPES:
            raise VolumeFormatError(path, OFFSET_DATATYPE,
                                    f"unsupported datatype code {code}; supported: int16, float32, float64")
        kind, bits = NIFTI1_DATATYPES[code]
        if int(hdr["bitpix"]) != bits:
            raise VolumeFormatError(path, OFFSET_BITPIX, f"bitpix {int(hdr['bitpix'])} != {bits} for datatype {code}")

        spacing = []
        for axis in range(3):
            p = float(hdr["pixdim"][axis + 1])
            if axis >= ndim and not p > 0:
                p = 1.0
            if not (np.isfinite(p) and p > 0):
                raise VolumeFormatError(path, OFFSET_PIXDIM + 4 * (axis + 1), f"pixdim[{axis + 1}]={p} is not positive")
            spacing.append(p)
        spacing = tuple(spacing)

        vox_offset = float(hdr["vox_offset"])
        if not np.isfinite(vox_offset) or vox_offset < NIFTI1_MIN_VOX_OFFSET:
            raise VolumeFormatError(path, OFFSET_VOX_OFFSET, f"vox_offset {vox_offset} below {NIFTI1_MIN_VOX_OFFSET}")
        vox_offset = int(vox_offset)

        dtype = np.dtype(endian + kind)
        count = int(np.prod(shape))
        expected = count * dtype.itemsize
        available = len(raw) - vox_offset
        if available < expected:
            raise VolumeFormatError(path, len(raw),
                                    f"payload holds {max(available, 0)} bytes from offset {vox_offset}, "
                                    f"dims {tuple(shape)} need {expected}")
        if available > expected:
            logger.warning("%s: %d trailing bytes after the voxel payload", path, available - expected)

        data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
        data = data.reshape(shape, order="F").astype(np.float64)

        slope = float(hdr["scl_slope"])
        inter = float(hdr["scl_inter"])
        if slope == 0 or not np.isfinite(slope):
            slope = 1.0
        if not np.isfinite(inter):
            inter = 0.0
        if slope != 1.0 or inter != 0.0:
            data = data * slope + inter

        if not np.all(np.isfinite(data)):
            raise VolumeFormatError(path, vox_offset, "payload contains non-finite values")
        logger.info("loaded %s: dims %s spacing %s", path, tuple(shape), spacing)
        return Volume4D(data, spacing)

    def _parse_raw(self, path: Path) -> Volume4D:
        descriptor_path = sidecar_path(path)
        try:
            descriptor = yaml.safe_load(descriptor_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise VolumeFormatError(descriptor_path, 0, "missing sidecar descriptor")
        except yaml.YAMLError as e:
            raise VolumeFormatError(descriptor_path, 0, f"sidecar does not parse: {e}")
        if not isinstance(descriptor, dict) or any(k not in descriptor for k in SIDECAR_KEYS):
            raise VolumeFormatError(descriptor_path, 0, f"sidecar must define {', '.join(SIDECAR_KEYS)}")

        shape = tuple(int(descriptor[k]) for k in ("nx", "ny", "nz", "nt"))
        spacing = tuple(float(descriptor[k]) for k in ("sx", "sy", "sz"))
        if min(shape) < 1 or min(spacing) <= 0:
            raise VolumeFormatError(descriptor_path, 0, f"invalid dims {shape} or spacing {spacing}")

        raw = path.read_bytes()
        expected = int(np.prod(shape)) * 4
        if len(raw) != expected:
            raise VolumeFormatError(path, min(len(raw), expected),
                                    f"payload has {len(raw)} bytes, dims {shape} need {expected}")
        data = np.frombuffer(raw, dtype="<f4").reshape(shape, order="F").astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError(path, 0, "payload contains non-finite values")
        return Volume4D(data, spacing)


def load_volume(path: PathLike, fmt: str = "auto") -> Volume4D:
    return VolumeParser().parse_file(path, fmt)


def load_mask(path: PathLike, fmt: str = "auto") -> VoxelMask:
    return VolumeParser().parse_mask(path, fmt)


def write_nifti1(v: Volume4D, path: PathLike, datatype: str = "float32", tr_s: float = 1.0) -> Path:
    """
    Write a single-file NIfTI-1 (.nii) volume.

    int16 output is rounded and clipped to the int16 range with unit slope.
    """
    if datatype not in NIFTI1_CODE_BY_NAME:
        raise ValueError(f"datatype must be one of {sorted(NIFTI1_CODE_BY_NAME)}")
    code = NIFTI1_CODE_BY_NAME[datatype]
    kind, bits = NIFTI1_DATATYPES[code]

    hdr = np.zeros((), dtype=NIFTI1_HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = NIFTI1_HEADER_SIZE
    nx, ny, nz, nt = v.dims
    hdr["dim"] = [4, nx, ny, nz, nt, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = bits
    hdr["pixdim"] = [1.0, *v.spacing_mm, tr_s, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = float(NIFTI1_MIN_VOX_OFFSET)
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = NIFTI_UNITS_MM | NIFTI_UNITS_SEC
    hdr["magic"] = NIFTI1_SINGLE_FILE_MAGIC

    values = v.values
    if kind == "i2":
        info = np.iinfo(np.int16)
        values = np.clip(np.rint(values), info.min, info.max)
    payload = values.astype("<" + kind).tobytes(order="F")
    extension = b"\x00" * (NIFTI1_MIN_VOX_OFFSET - NIFTI1_HEADER_SIZE)
    return write_bytes_atomic(path, hdr.tobytes() + extension + payload)


def write_raw_f32(v: Volume4D, path: PathLike) -> Path:
    """Write a little-endian float32 payload plus its `<payload>.json` sidecar."""
    nx, ny, nz, nt = v.dims
    sx, sy, sz = v.spacing_mm
    descriptor = {"nx": nx, "ny": ny, "nz": nz, "nt": nt, "sx": sx, "sy": sy, "sz": sz}
    write_text_atomic(sidecar_path(path), canonical_json(descriptor) + "\n")
    return write_bytes_atomic(path, v.values.astype("<f4").tobytes(order="F"))


def write_volume(v: Volume4D, path: PathLike, fmt: str = "auto", datatype: Optional[str] = None) -> Path:
    if fmt == "auto":
        fmt = detect_format(path)
    if fmt == NIFTI1:
        return write_nifti1(v, path, datatype or "float32")
    if fmt == RAW_F32:
        return write_raw_f32(v, path)
    raise ValueError(f"unknown volume format {fmt!r}; expected one of {FORMATS}")
