import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from leakaware.core_types import VolumeGrid
from leakaware.nifti import (
    BadDimensionsError,
    BadMagicError,
    NiftiParseError,
    TruncatedDataError,
    UnsupportedDatatypeError,
    encode_nifti,
    read_header,
    read_nifti_volume,
    write_nifti_volume,
)


def handmade_nifti(payload: np.ndarray, code: int, bitpix: int, slope=1.0, inter=0.0, bo="<",
                   magic=b"n+1\x00", dims=None, spacing=(1.0, 1.0, 1.0)) -> bytes:
    """Header assembled field by field at the documented NIfTI-1 byte offsets."""
    dims = dims or payload.shape
    hdr = bytearray(348)
    hdr[0:4] = struct.pack(bo + "i", 348)
    hdr[40:56] = struct.pack(bo + "8h", len(dims), *dims, *([1] * (7 - len(dims))))
    hdr[70:72] = struct.pack(bo + "h", code)
    hdr[72:74] = struct.pack(bo + "h", bitpix)
    hdr[76:108] = struct.pack(bo + "8f", 1.0, *spacing, 1, 1, 1, 1)
    hdr[108:112] = struct.pack(bo + "f", 352.0)
    hdr[112:120] = struct.pack(bo + "2f", slope, inter)
    hdr[344:348] = magic
    body = payload.ravel(order="F").astype(payload.dtype.newbyteorder(bo)).tobytes()
    return bytes(hdr) + b"\x00" * 4 + body


def test_slope_zero_means_identity(tmp_path):
    p = tmp_path / "sevens.nii"
    p.write_bytes(handmade_nifti(np.full((3, 4, 5), 7, np.int16), 4, 16, slope=0.0, inter=0.0))
    vol = read_nifti_volume(p)
    assert vol.dims == (3, 4, 5)
    assert np.all(vol.data == 7.0)


def test_scaling_applied(tmp_path):
    p = tmp_path / "scaled.nii"
    p.write_bytes(handmade_nifti(np.arange(8, dtype=np.uint8).reshape(2, 2, 2), 2, 8, slope=0.5, inter=-1.0))
    vol = read_nifti_volume(p)
    expected = np.arange(8).reshape(2, 2, 2) * 0.5 - 1.0
    assert np.allclose(vol.data, expected)


def test_big_endian_and_axis_order(tmp_path):
    data = np.random.default_rng(0).normal(size=(4, 3, 2)).astype(np.float32)
    p = tmp_path / "be.nii"
    p.write_bytes(handmade_nifti(data, 16, 32, bo=">", spacing=(1.5, 2.0, 2.5)))
    hdr = read_header(p)
    assert hdr.endianness == "big" and hdr.spacing == (1.5, 2.0, 2.5)
    assert np.array_equal(read_nifti_volume(p).data, data)


def test_full_size_volume(tmp_path):
    data = np.zeros((91, 109, 91), np.float32)
    p = write_nifti_volume(VolumeGrid(data), tmp_path / "mni.nii.gz")
    vol = read_nifti_volume(p)
    assert vol.dims == (91, 109, 91) and vol.voxels.size == 902_629


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
           elements=st.floats(-1e6, 1e6, width=32, allow_nan=False)),
    st.sampled_from(["little", "big"]),
)
def test_float32_roundtrip_bit_identical(data, endianness):
    raw = encode_nifti(VolumeGrid(data, (0.9, 1.1, 2.0)), endianness=endianness)
    import tempfile, pathlib
    with tempfile.TemporaryDirectory() as d:
        p = pathlib.Path(d) / "v.nii"
        p.write_bytes(raw)
        vol = read_nifti_volume(p)
    assert vol.data.dtype == np.float32
    assert vol.data.tobytes() == data.tobytes()
    assert vol.spacing == pytest.approx((0.9, 1.1, 2.0))


@pytest.mark.parametrize("dtype", ["uint8", "int16", "float64"])
def test_other_datatypes_roundtrip(tmp_path, dtype):
    data = (np.arange(60).reshape(3, 4, 5) % 50).astype(dtype)
    p = write_nifti_volume(VolumeGrid(data), tmp_path / f"v_{dtype}.nii", datatype=dtype)
    assert np.array_equal(read_nifti_volume(p).data, data)


def test_gzip_output_is_deterministic(tmp_path):
    vol = VolumeGrid(np.ones((2, 2, 2), np.float32))
    a = write_nifti_volume(vol, tmp_path / "a.nii.gz").read_bytes()
    b = write_nifti_volume(vol, tmp_path / "b.nii.gz").read_bytes()
    assert a == b
    assert gzip.decompress(a)[344:348] == b"n+1\x00"


def test_parse_errors_name_the_field(tmp_path):
    base = np.zeros((2, 2, 2), np.float32)
    cases = [
        (handmade_nifti(base, 16, 32, magic=b"ni1\x00"), BadMagicError, "magic"),
        (handmade_nifti(base, 256, 8), UnsupportedDatatypeError, "datatype"),
        (handmade_nifti(base, 16, 32)[:-4], TruncatedDataError, "vox_offset"),
        (handmade_nifti(base, 16, 32)[:200], TruncatedDataError, "sizeof_hdr"),
        (handmade_nifti(base, 16, 32, dims=(2, 2, 2, 3)), BadDimensionsError, "dim"),
        (b"\x00" * 400, NiftiParseError, "sizeof_hdr"),
    ]
    for i, (raw, err, field) in enumerate(cases):
        p = tmp_path / f"bad{i}.nii"
        p.write_bytes(raw)
        with pytest.raises(err) as info:
            read_nifti_volume(p)
        assert info.value.field == field
    assert len({c[1] for c in cases}) == 5
