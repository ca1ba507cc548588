"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Only the subset needed for preprocessed structural volumes is supported:
up to three spatial dims, datatypes uint8/int16/float32/float64, scl_slope and
scl_inter scaling, either byte order. Extensions are skipped on read.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_types import VolumeGrid

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352

DATATYPES: dict[int, tuple[str, np.dtype]] = {
    2: ("uint8", np.dtype(np.uint8)),
    4: ("int16", np.dtype(np.int16)),
    16: ("float32", np.dtype(np.float32)),
    64: ("float64", np.dtype(np.float64)),
}
DATATYPE_CODES = {name: code for code, (name, _) in DATATYPES.items()}


class NiftiParseError(ValueError):
    """Base class; ``field`` names the header field that failed."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class BadMagicError(NiftiParseError):
    pass


class UnsupportedDatatypeError(NiftiParseError):
    pass


class TruncatedDataError(NiftiParseError):
    pass


class BadDimensionsError(NiftiParseError):
    pass


@dataclass(frozen=True)
class NiftiHeaderInfo:
    dims: tuple[int, ...]
    datatype: str
    scl_slope: float
    scl_inter: float
    endianness: str
    spacing: tuple[float, float, float]
    vox_offset: int


def _read_bytes(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_header(raw: bytes) -> NiftiHeaderInfo:
    if len(raw) < HEADER_SIZE:
        raise TruncatedDataError("sizeof_hdr", f"file has {len(raw)} bytes, header needs {HEADER_SIZE}")
    if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE:
        bo, endianness = "<", "little"
    elif struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        bo, endianness = ">", "big"
    else:
        raise NiftiParseError("sizeof_hdr", "header size field is not 348 in either byte order")

    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise BadMagicError("magic", f"expected b'n+1\\x00', got {magic!r}")

    dim = struct.unpack(bo + "8h", raw[40:56])
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise BadDimensionsError("dim", f"dim[0]={ndim} out of range")
    extra = dim[4 : ndim + 1]
    if any(d != 1 for d in extra):
        raise BadDimensionsError("dim", f"only 3 spatial dims supported, got {dim[1:ndim + 1]}")
    dims = tuple(dim[1 : min(ndim, 3) + 1])
    if any(d < 1 for d in dims):
        raise BadDimensionsError("dim", f"non-positive dims {dims}")

    code = struct.unpack(bo + "h", raw[70:72])[0]
    if code not in DATATYPES:
        raise UnsupportedDatatypeError("datatype", f"code {code} not in {sorted(DATATYPES)}")

    pixdim = struct.unpack(bo + "8f", raw[76:108])
    spacing = tuple(float(abs(p)) if p else 1.0 for p in pixdim[1:4])
    vox_offset = int(struct.unpack(bo + "f", raw[108:112])[0])
    slope, inter = struct.unpack(bo + "2f", raw[112:120])
    return NiftiHeaderInfo(
        dims=dims,
        datatype=DATATYPES[code][0],
        scl_slope=float(slope),
        scl_inter=float(inter),
        endianness=endianness,
        spacing=spacing,
        vox_offset=max(vox_offset, HEADER_SIZE),
    )


def read_header(path) -> NiftiHeaderInfo:
    return parse_header(_read_bytes(Path(path)))


def read_nifti_volume(path) -> VolumeGrid:
    """Read a NIfTI-1 file into a VolumeGrid of real values.

    Stored values are scaled as ``value * scl_slope + scl_inter``; a slope of
    zero (or NaN) means no scaling.
    """
    raw = _read_bytes(Path(path))
    hdr = parse_header(raw)
    dims3 = tuple(hdr.dims) + (1,) * (3 - len(hdr.dims))
    n = int(np.prod(dims3))
    dtype = DATATYPES[DATATYPE_CODES[hdr.datatype]][1].newbyteorder("<" if hdr.endianness == "little" else ">")
    needed = hdr.vox_offset + n * dtype.itemsize
    if len(raw) < needed:
        raise TruncatedDataError("vox_offset", f"payload needs {needed} bytes, file has {len(raw)}")
    values = np.frombuffer(raw, dtype=dtype, count=n, offset=hdr.vox_offset)

    slope, inter = hdr.scl_slope, hdr.scl_inter
    if slope == 0 or not np.isfinite(slope):
        slope, inter = 1.0, 0.0
    if hdr.datatype == "float64":
        out = values.astype(np.float64)
    else:
        out = values.astype(np.float32)
    if slope != 1.0 or inter != 0.0:
        out = out * out.dtype.type(slope) + out.dtype.type(inter)
    return VolumeGrid.from_buffer(out, dims3, hdr.spacing)


def encode_nifti(volume: VolumeGrid, datatype: str = "float32", scl_slope: float = 1.0,
                 scl_inter: float = 0.0, endianness: str = "little") -> bytes:
    if datatype not in DATATYPE_CODES:
        raise UnsupportedDatatypeError("datatype", f"cannot write {datatype!r}")
    bo = "<" if endianness == "little" else ">"
    code = DATATYPE_CODES[datatype]
    np_dtype = DATATYPES[code][1].newbyteorder(bo)
    x, y, z = volume.dims
    sx, sy, sz = volume.spacing

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into(bo + "i", hdr, 0, HEADER_SIZE)
    struct.pack_into(bo + "8h", hdr, 40, 3, x, y, z, 1, 1, 1, 1)
    struct.pack_into(bo + "hh", hdr, 70, code, np_dtype.itemsize * 8)
    struct.pack_into(bo + "8f", hdr, 76, 1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(bo + "f", hdr, 108, float(DEFAULT_VOX_OFFSET))
    struct.pack_into(bo + "2f", hdr, 112, scl_slope, scl_inter)
    hdr[123] = 10  # xyzt_units: mm, s
    struct.pack_into(bo + "hh", hdr, 252, 0, 1)  # qform_code, sform_code
    struct.pack_into(bo + "4f", hdr, 280, sx, 0.0, 0.0, 0.0)
    struct.pack_into(bo + "4f", hdr, 296, 0.0, sy, 0.0, 0.0)
    struct.pack_into(bo + "4f", hdr, 312, 0.0, 0.0, sz, 0.0)
    hdr[344:348] = b"n+1\x00"

    payload = volume.voxels.astype(np_dtype).tobytes()
    return bytes(hdr) + b"\x00" * (DEFAULT_VOX_OFFSET - HEADER_SIZE) + payload


def write_nifti_volume(volume: VolumeGrid, path, datatype: str = "float32", **kwargs) -> Path:
    """Write a volume; ``.gz`` suffix selects gzip with a zeroed timestamp."""
    path = Path(path)
    data = encode_nifti(volume, datatype=datatype, **kwargs)
    if path.suffix == ".gz":
        data = gzip.compress(data, mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path
