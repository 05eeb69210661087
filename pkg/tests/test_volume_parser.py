import struct

import numpy as np
import pytest

from datamodel import Volume4D
from volume_parser import (
    NIFTI1,
    NIFTI1_HEADER_DTYPE,
    RAW_F32,
    VolumeFormatError,
    VolumeParser,
    detect_format,
    load_mask,
    load_volume,
    sidecar_path,
    write_nifti1,
    write_raw_f32,
    write_volume,
)


def nifti_bytes(dims, datatype=4, bitpix=16, pixdim=(2.0, 2.0, 3.0, 1.5), vox_offset=352.0,
                slope=0.0, inter=0.0, magic=b"n+1\x00", payload=None, endian="<"):
    """Minimal single-file NIfTI-1 image packed field by field."""
    header = bytearray(348)
    struct.pack_into(endian + "i", header, 0, 348)
    dim = [len(dims), *dims] + [1] * (7 - len(dims))
    struct.pack_into(endian + "8h", header, 40, *dim)
    struct.pack_into(endian + "h", header, 70, datatype)
    struct.pack_into(endian + "h", header, 72, bitpix)
    struct.pack_into(endian + "8f", header, 76, 1.0, *pixdim, 0.0, 0.0, 0.0)
    struct.pack_into(endian + "f", header, 108, vox_offset)
    struct.pack_into(endian + "f", header, 112, slope)
    struct.pack_into(endian + "f", header, 116, inter)
    header[344:348] = magic
    return bytes(header) + b"\x00" * 4 + (payload or b"")


def test_header_layout_is_348_bytes():
    assert NIFTI1_HEADER_DTYPE.itemsize == 348
    assert NIFTI1_HEADER_DTYPE.fields["vox_offset"][1] == 108
    assert NIFTI1_HEADER_DTYPE.fields["magic"][1] == 344


def test_int16_nifti_parses_in_fortran_order(tmp_path):
    dims = (2, 3, 2, 2)
    values = np.arange(24, dtype="<i2")
    path = tmp_path / "v.nii"
    path.write_bytes(nifti_bytes(dims, payload=values.tobytes()))
    v = load_volume(path)
    assert v.dims == dims
    assert v.spacing_mm == (2.0, 2.0, 3.0)
    # x varies fastest on disk
    assert v.values[1, 0, 0, 0] == 1.0
    assert v.values[0, 1, 0, 0] == 2.0
    assert v.values[0, 0, 0, 1] == 12.0


def test_big_endian_header_is_detected(tmp_path):
    dims = (2, 2, 1, 1)
    values = np.array([1, -2, 3, 4], dtype=">i2")
    path = tmp_path / "be.nii"
    path.write_bytes(nifti_bytes(dims, payload=values.tobytes(), endian=">"))
    v = load_volume(path)
    assert v.values[..., 0, 0].ravel(order="F").tolist() == [1.0, -2.0, 3.0, 4.0]


def test_scaling_is_applied(tmp_path):
    path = tmp_path / "s.nii"
    payload = np.array([1, 2], dtype="<i2").tobytes()
    path.write_bytes(nifti_bytes((2, 1, 1, 1), slope=2.0, inter=-1.0, payload=payload))
    assert load_volume(path).values.ravel().tolist() == [1.0, 3.0]


def test_three_dimensional_image_gets_one_frame(tmp_path):
    path = tmp_path / "m.nii"
    path.write_bytes(nifti_bytes((2, 2, 2), payload=np.ones(8, dtype="<i2").tobytes()))
    assert load_volume(path).dims == (2, 2, 2, 1)


def test_truncated_payload_reports_offset(tmp_path):
    path = tmp_path / "short.nii"
    path.write_bytes(nifti_bytes((4, 4, 4, 4), payload=b"\x00" * 100))
    with pytest.raises(VolumeFormatError) as info:
        load_volume(path)
    assert info.value.offset == 352 + 100
    assert "short.nii" in str(info.value)


@pytest.mark.parametrize("kwargs, offset", [
    ({"datatype": 2, "bitpix": 8}, 70),
    ({"bitpix": 32}, 72),
    ({"magic": b"ni1\x00"}, 344),
    ({"vox_offset": 100.0}, 108),
    ({"pixdim": (0.0, 2.0, 2.0, 1.0)}, 80),
])
def test_malformed_headers(tmp_path, kwargs, offset):
    path = tmp_path / "bad.nii"
    path.write_bytes(nifti_bytes((1, 1, 1, 1), payload=b"\x00" * 8, **kwargs))
    with pytest.raises(VolumeFormatError) as info:
        load_volume(path)
    assert info.value.offset == offset


def test_short_file_and_gzip_are_rejected(tmp_path):
    short = tmp_path / "tiny.nii"
    short.write_bytes(b"\x00" * 20)
    with pytest.raises(VolumeFormatError):
        load_volume(short)
    zipped = tmp_path / "z.nii"
    zipped.write_bytes(b"\x1f\x8b" + b"\x00" * 400)
    with pytest.raises(VolumeFormatError, match="gzip"):
        load_volume(zipped)


def test_format_detection():
    assert detect_format("a/b.nii") == NIFTI1
    assert detect_format("b.f32") == RAW_F32
    with pytest.raises(VolumeFormatError):
        detect_format("b.nii.gz")
    with pytest.raises(VolumeFormatError):
        detect_format("b.txt")


@pytest.mark.parametrize("datatype", ["float32", "float64"])
def test_nifti_write_read_round_trip(tmp_path, rng, datatype):
    v = Volume4D(rng.standard_normal((3, 4, 2, 5)).astype(np.float32), (3.0, 3.0, 4.0))
    back = load_volume(write_nifti1(v, tmp_path / "out.nii", datatype=datatype))
    np.testing.assert_array_equal(back.values, v.values)
    assert back.spacing_mm == (3.0, 3.0, 4.0)


def test_int16_writer_rounds_and_clips(tmp_path):
    v = Volume4D(np.array([1.4, -2.6, 1e6, -1e6]).reshape(4, 1, 1, 1))
    back = load_volume(write_volume(v, tmp_path / "i.nii", datatype="int16"))
    assert back.values.ravel().tolist() == [1.0, -3.0, 32767.0, -32768.0]


def test_raw_zero_volume_round_trip(tmp_path):
    v = Volume4D(np.zeros((2, 3, 4, 5)), (1.0, 2.0, 3.0))
    path = write_raw_f32(v, tmp_path / "zeros.f32")
    assert sidecar_path(path).name == "zeros.f32.json"
    back = load_volume(path)
    assert back.dims == (2, 3, 4, 5)
    assert back.spacing_mm == (1.0, 2.0, 3.0)
    assert not back.values.any()


def test_raw_short_payload(tmp_path):
    path = write_raw_f32(Volume4D(np.ones((2, 2, 2, 2))), tmp_path / "v.f32")
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(VolumeFormatError, match="need 64"):
        load_volume(path)


def test_raw_missing_sidecar(tmp_path):
    path = tmp_path / "orphan.f32"
    path.write_bytes(b"\x00" * 16)
    with pytest.raises(VolumeFormatError, match="sidecar"):
        load_volume(path)


def test_directory_listing_is_sorted(tmp_path):
    for name in ("b.nii", "a.nii"):
        write_nifti1(Volume4D(np.ones((2, 2, 1, 2))), tmp_path / name)
    write_raw_f32(Volume4D(np.ones((2, 2, 1, 2))), tmp_path / "c.f32")
    parser = VolumeParser()
    assert [p.name for p in parser.volume_files(tmp_path)] == ["a.nii", "b.nii", "c.f32"]
    assert [p.name for p in parser.volume_files(tmp_path, NIFTI1)] == ["a.nii", "b.nii"]
    assert len(parser.parse_directory(tmp_path)) == 3


def test_mask_keeps_positive_voxels(tmp_path):
    values = np.array([0.0, 2.0, -1.0, 0.5]).reshape(2, 2, 1, 1)
    mask = load_mask(write_nifti1(Volume4D(values), tmp_path / "mask.nii"))
    assert mask.count == 2
    assert mask.included[0, 1, 0] and mask.included[1, 1, 0]
