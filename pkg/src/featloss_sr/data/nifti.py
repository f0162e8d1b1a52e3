"""Minimal single-file little-endian NIfTI-1 reader/writer (uint16 and float32 only).

Header bytes not interpreted here (orientation, descriptions, extensions) are carried
through unchanged, so ``write_nifti(read_nifti(b))`` reproduces the payload and every
consumed field.  ``scl_slope``/``scl_inter`` are passed through but never applied.
"""
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import DataError

HEADER_SIZE = 348
DTYPES = {512: np.dtype("<u2"), 16: np.dtype("<f4")}
CODES = {np.dtype("uint16"): 512, np.dtype("float32"): 16}


class NiftiError(DataError):
    pass


class NiftiMagicError(NiftiError):
    pass


class UnsupportedNiftiError(NiftiError):
    pass


class TruncatedNiftiError(NiftiError):
    pass


@dataclass
class Nifti1Volume:
    data: np.ndarray
    pixdim: tuple = (1.0, 1.0, 1.0, 1.0)
    header: bytes = None       # raw 348-byte header, or None for a fresh default
    extension: bytes = b""     # bytes between the header and vox_offset (after the 4 extender bytes)

    @property
    def datatype(self):
        return CODES[self.data.dtype]


def _default_header():
    h = bytearray(HEADER_SIZE)
    struct.pack_into("<i", h, 0, HEADER_SIZE)
    struct.pack_into("<h", h, 252, 0)   # qform_code
    struct.pack_into("<h", h, 254, 0)   # sform_code
    struct.pack_into("<f", h, 112, 0.0)  # scl_slope (0 = unused)
    return bytes(h)


def read_nifti(data):
    if len(data) < HEADER_SIZE:
        raise TruncatedNiftiError(f"truncated header: {len(data)} bytes")
    (sizeof_hdr,) = struct.unpack_from("<i", data, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", data, 0)[0] == HEADER_SIZE:
            raise UnsupportedNiftiError("unsupported: big-endian NIfTI")
        raise NiftiMagicError(f"bad sizeof_hdr {sizeof_hdr}")
    magic = data[344:348]
    if magic == b"ni1\0":
        raise UnsupportedNiftiError("unsupported: two-file NIfTI (ni1)")
    if magic != b"n+1\0":
        raise NiftiMagicError(f"bad magic {magic!r}")
    dim = struct.unpack_from("<8h", data, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 4:
        raise UnsupportedNiftiError(f"unsupported dimensionality {ndim}")
    shape = tuple(int(d) for d in dim[1:1 + ndim])
    (datatype,) = struct.unpack_from("<h", data, 70)
    if datatype not in DTYPES:
        raise UnsupportedNiftiError(f"unsupported datatype code {datatype}")
    dtype = DTYPES[datatype]
    pixdim = struct.unpack_from("<8f", data, 76)
    (vox_offset,) = struct.unpack_from("<f", data, 108)
    offset = int(vox_offset)
    if offset < 352:
        raise NiftiError(f"vox_offset {vox_offset} < 352")
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(data) < offset + nbytes:
        raise TruncatedNiftiError(f"truncated data: need {offset + nbytes} bytes, have {len(data)}")
    arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    arr = arr.reshape(shape, order="F").astype(dtype.newbyteorder("="))
    return Nifti1Volume(arr, tuple(pixdim[1:1 + ndim]), bytes(data[:HEADER_SIZE]), bytes(data[352:offset]))


def write_nifti(volume):
    data = np.asarray(volume.data)
    if data.dtype not in CODES:
        raise UnsupportedNiftiError(f"unsupported dtype {data.dtype}")
    if not 1 <= data.ndim <= 4:
        raise UnsupportedNiftiError(f"unsupported dimensionality {data.ndim}")
    h = bytearray(volume.header if volume.header is not None else _default_header())
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", h, 40, *dim)
    code = CODES[data.dtype]
    struct.pack_into("<hh", h, 70, code, data.dtype.itemsize * 8)
    pixdim = list(struct.unpack_from("<8f", h, 76))
    for k, v in enumerate(volume.pixdim[:data.ndim]):
        pixdim[k + 1] = v
    if pixdim[0] == 0:
        pixdim[0] = 1.0
    struct.pack_into("<8f", h, 76, *pixdim)
    ext = volume.extension
    extender = b"\x01\0\0\0" if ext else b"\0\0\0\0"
    struct.pack_into("<f", h, 108, float(352 + len(ext)))
    h[344:348] = b"n+1\0"
    payload = np.asarray(data, dtype=data.dtype.newbyteorder("<")).tobytes(order="F")
    return bytes(h) + extender + ext + payload


def load(path):
    with open(path, "rb") as fh:
        return read_nifti(fh.read())


def save(volume, path):
    with open(path, "wb") as fh:
        fh.write(write_nifti(volume))
