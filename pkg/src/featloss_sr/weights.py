"""Portable weight manifest: text header + raw little-endian float32 blob.

Layout::

    FLSR-WEIGHTS-1
    le f32
    <name> <d0> <d1> <d2> <d3> <byte offset>
    ...
    <blank line>
    <blob>

Tensors with fewer than four dims are padded with trailing 1s in the header.
"""
import numpy as np

from .errors import (BadMagicError, DimensionMismatchError, MissingParameterError,
                     TruncatedBlobError, WeightFormatError)

MAGIC = "FLSR-WEIGHTS-1"
ENDIAN = "le f32"


def _dims4(shape):
    if len(shape) > 4:
        raise WeightFormatError(f"tensors of rank {len(shape)} cannot be stored")
    return tuple(shape) + (1,) * (4 - len(shape))


def dump_manifest(tensors):
    """Serialise an ordered ``name -> array`` mapping to manifest bytes."""
    lines = [MAGIC, ENDIAN]
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise WeightFormatError(f"invalid tensor name {name!r}")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        d = _dims4(np.shape(arr))
        lines.append(f"{name} {d[0]} {d[1]} {d[2]} {d[3]} {offset}")
        blobs.append(data)
        offset += len(data)
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    return header + b"".join(blobs)


def parse_manifest(data):
    """Parse manifest bytes into ``name -> float32 array`` with 4D shapes."""
    end = data.find(b"\n\n")
    if not data.startswith(MAGIC.encode() + b"\n"):
        raise BadMagicError("bad magic: not an FLSR-WEIGHTS-1 manifest")
    if end < 0:
        raise WeightFormatError("manifest header is not terminated by a blank line")
    lines = data[:end].decode("ascii").split("\n")
    if lines[1] != ENDIAN:
        raise WeightFormatError(f"unsupported encoding {lines[1]!r}")
    blob = data[end + 2:]
    out = {}
    expected = 0
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split()
        if len(parts) != 6:
            raise WeightFormatError(f"line {lineno}: expected 'name d0 d1 d2 d3 offset'")
        name = parts[0]
        try:
            dims = tuple(int(p) for p in parts[1:5])
            offset = int(parts[5])
        except ValueError as exc:
            raise WeightFormatError(f"line {lineno}: {exc}") from None
        if name in out:
            raise WeightFormatError(f"duplicate tensor {name!r}")
        nbytes = 4 * int(np.prod(dims))
        if offset != expected:
            raise WeightFormatError(f"tensor {name!r}: offset {offset} overlaps or leaves a gap")
        if offset + nbytes > len(blob):
            raise TruncatedBlobError(f"truncated blob: tensor {name!r} needs bytes up to "
                                     f"{offset + nbytes}, blob has {len(blob)}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(dims).copy()
        expected = offset + nbytes
    if expected != len(blob):
        raise WeightFormatError(f"blob has {len(blob) - expected} trailing bytes")
    return out


def assign(params, stored, dtype=None):
    """Copy stored tensors into ``params`` (a ParamGroup), checking names and dims exactly."""
    tensors = {}
    for name, current in params.tensors.items():
        if name not in stored:
            raise MissingParameterError(name)
        arr = stored[name]
        if arr.shape != _dims4(current.shape):
            raise DimensionMismatchError(f"dim mismatch for {name!r}: manifest {arr.shape}, "
                                         f"model {_dims4(current.shape)}")
        tensors[name] = arr.reshape(current.shape).astype(dtype or current.dtype)
    extra = set(stored) - set(params.tensors)
    if extra:
        raise WeightFormatError(f"unexpected tensors in manifest: {sorted(extra)}")
    return tensors
