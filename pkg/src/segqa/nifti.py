"""Bit-exact NIfTI-1 reader/writer for 3D volumes, plain or gzip-compressed.

Only the single-file little-endian flavor is handled (extension .nii or
.nii.gz), with uint8, int16 and float32 payloads; that covers the public
abdominal CT corpora this toolkit targets. The reader is defensive: it never
sizes an allocation from header fields without first checking the bytes are
actually present, so arbitrary input degrades to a structured error rather
than a crash.
"""

from __future__ import annotations

import gzip
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .volume import VolumeGrid

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extender
MAGIC = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"

_HEADER = struct.Struct(
    "<i10s18sihbb8h3fhhhh8ffffhbbffffii80s24shh6f4f4f4f16s4s"
)
assert _HEADER.size == HEADER_SIZE

# datatype code -> little-endian numpy dtype
_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
}
_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16}

Source = Union[str, Path, bytes, bytearray, BinaryIO]


class NiftiFormatError(ValueError):
    """The input is not a volume this reader accepts."""


class BadMagicError(NiftiFormatError):
    """Magic string or sizeof_hdr does not identify a supported NIfTI-1 file."""


class UnsupportedDatatypeError(NiftiFormatError):
    """The header declares a datatype outside uint8/int16/float32."""


class TruncatedFileError(NiftiFormatError):
    """The stream ends before the header or declared data section."""


class BadDimensionError(NiftiFormatError):
    """The dim field does not describe a plain 3D volume."""


@dataclass(frozen=True)
class NiftiHeader:
    """Parsed subset of the 348-byte NIfTI-1 header used by this toolkit."""

    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: int
    scl_slope: float
    scl_inter: float
    qform_code: int
    sform_code: int
    srow: tuple[tuple[float, float, float, float], ...]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dim[1], self.dim[2], self.dim[3]

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.pixdim[1], self.pixdim[2], self.pixdim[3]


def parse_header(buf: bytes) -> NiftiHeader:
    """Validate and extract the header fields from the first 348 bytes."""
    if len(buf) < HEADER_SIZE:
        raise TruncatedFileError(
            f"header: need {HEADER_SIZE} bytes, stream has {len(buf)}"
        )
    (sizeof_hdr,) = struct.unpack("<i", buf[:4])
    if sizeof_hdr != HEADER_SIZE:
        (swapped,) = struct.unpack(">i", buf[:4])
        if swapped == HEADER_SIZE:
            raise BadMagicError("sizeof_hdr: big-endian (byte-swapped) files are not supported")
        raise BadMagicError(f"sizeof_hdr: expected {HEADER_SIZE}, got {sizeof_hdr}")

    fields = _HEADER.unpack(buf[:HEADER_SIZE])
    magic = fields[-1]
    if magic != MAGIC:
        if magic == b"ni1\x00":
            raise BadMagicError("magic: two-file (.hdr/.img) NIfTI pairs are not supported")
        raise BadMagicError(f"magic: expected {MAGIC!r}, got {magic!r}")

    dim = fields[7:15]
    if dim[0] != 3:
        raise BadDimensionError(f"dim[0]: expected 3 spatial dimensions, got {dim[0]}")
    for axis in (1, 2, 3):
        if dim[axis] < 1:
            raise BadDimensionError(f"dim[{axis}]: must be >= 1, got {dim[axis]}")

    datatype = fields[19]
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(
            f"datatype: code {datatype} not supported (uint8=2, int16=4, float32=16)"
        )
    bitpix = fields[20]
    if bitpix != _DTYPES[datatype].itemsize * 8:
        raise NiftiFormatError(f"bitpix: {bitpix} inconsistent with datatype {datatype}")

    pixdim = fields[22:30]
    for axis in (1, 2, 3):
        p = pixdim[axis]
        if not math.isfinite(p) or p <= 0.0:
            raise NiftiFormatError(f"pixdim[{axis}]: must be a positive real, got {p}")

    raw_offset = fields[30]
    if not math.isfinite(raw_offset) or raw_offset < HEADER_SIZE:
        raise NiftiFormatError(f"vox_offset: must be >= {HEADER_SIZE}, got {raw_offset}")
    vox_offset = int(raw_offset)

    scl_slope, scl_inter = fields[31], fields[32]
    if not (math.isfinite(scl_slope) and math.isfinite(scl_inter)):
        raise NiftiFormatError(f"scl_slope/scl_inter: must be finite, got {scl_slope}/{scl_inter}")

    return NiftiHeader(
        dim=tuple(int(d) for d in dim),
        datatype=int(datatype),
        bitpix=int(bitpix),
        pixdim=tuple(float(p) for p in pixdim),
        vox_offset=vox_offset,
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        qform_code=int(fields[44]),
        sform_code=int(fields[45]),
        srow=(tuple(fields[52:56]), tuple(fields[56:60]), tuple(fields[60:64])),
    )


def _gunzip_upto(data: bytes, limit: int) -> bytes:
    """Decompress at most `limit` bytes of a gzip stream held in memory.

    Capping the output keeps a forged header from driving allocation beyond
    what the stream actually contains plus the amount the caller asked for.
    """
    decomp = zlib.decompressobj(16 + zlib.MAX_WBITS)
    chunks: list[bytes] = []
    total = 0
    buf = data
    try:
        while buf and total < limit:
            piece = decomp.decompress(buf, limit - total)
            if not piece and not decomp.unconsumed_tail:
                break
            chunks.append(piece)
            total += len(piece)
            buf = decomp.unconsumed_tail
            if decomp.eof:
                break
    except zlib.error as exc:
        raise NiftiFormatError(f"gzip stream: {exc}") from exc
    return b"".join(chunks)


def _read_source(source: Source) -> tuple[bytes, str]:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source), "<bytes>"
    if isinstance(source, (str, Path)):
        path = Path(source)
        return path.read_bytes(), str(path)
    data = source.read()
    if not isinstance(data, bytes):
        raise NiftiFormatError("stream: expected a binary file object")
    return data, getattr(source, "name", "<stream>")


def read_volume(source: Source) -> VolumeGrid:
    """Read a NIfTI-1 volume (optionally gzipped) into a VolumeGrid.

    Spacing comes from pixdim, orientation from the sform rows when set and
    a spacing-scaled identity otherwise. Slope/intercept scaling is applied
    at read time; files written by this module always carry slope 1 and
    intercept 0 so integer volumes round-trip exactly.
    """
    raw, name = _read_source(source)
    try:
        return _decode(raw)
    except NiftiFormatError as exc:
        if name in ("<bytes>", "<stream>"):
            raise
        raise type(exc)(f"{name}: {exc}") from exc


def _decode(raw: bytes) -> VolumeGrid:
    if raw[:2] == GZIP_MAGIC:
        head = _gunzip_upto(raw, VOX_OFFSET)
        header = parse_header(head)
        needed = header.vox_offset + _payload_bytes(header)
        buf = _gunzip_upto(raw, needed)
    else:
        buf = raw
        header = parse_header(buf)
        needed = header.vox_offset + _payload_bytes(header)

    if len(buf) < needed:
        raise TruncatedFileError(
            f"data section: need {needed - header.vox_offset} bytes at offset "
            f"{header.vox_offset}, have {max(0, len(buf) - header.vox_offset)}"
        )

    nx, ny, nz = header.shape
    dtype = _DTYPES[header.datatype]
    flat = np.frombuffer(buf, dtype=dtype, count=nx * ny * nz, offset=header.vox_offset)
    values = flat.reshape((nx, ny, nz), order="F")

    slope, inter = header.scl_slope, header.scl_inter
    if slope != 0.0 and (slope != 1.0 or inter != 0.0):
        values = (values.astype(np.float32) * np.float32(slope) + np.float32(inter))

    if header.sform_code > 0:
        affine = np.array([*header.srow, (0.0, 0.0, 0.0, 1.0)], dtype=np.float64)
    else:
        affine = np.diag((*header.spacing, 1.0))
    return VolumeGrid(values, header.spacing, affine)


def _payload_bytes(header: NiftiHeader) -> int:
    nx, ny, nz = header.shape
    return nx * ny * nz * _DTYPES[header.datatype].itemsize


def header_bytes(grid: VolumeGrid) -> bytes:
    """Serialize the 348-byte header for a grid (slope 1, intercept 0, sform set)."""
    code = _CODES[grid.values.dtype]
    dtype = _DTYPES[code]
    nx, ny, nz = grid.dims
    sx, sy, sz = grid.spacing
    aff = grid.affine
    return _HEADER.pack(
        HEADER_SIZE,            # sizeof_hdr
        b"", b"",               # data_type, db_name (unused)
        0, 0, 0,                # extents, session_error, regular
        0,                      # dim_info
        3, nx, ny, nz, 1, 1, 1, 1,          # dim
        0.0, 0.0, 0.0,          # intent_p1..3
        0,                      # intent_code
        code,                   # datatype
        dtype.itemsize * 8,     # bitpix
        0,                      # slice_start
        1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0,  # pixdim (qfac = 1)
        float(VOX_OFFSET),      # vox_offset
        1.0, 0.0,               # scl_slope, scl_inter
        0, 0,                   # slice_end, slice_code
        2,                      # xyzt_units: millimetres
        0.0, 0.0, 0.0, 0.0,     # cal_max, cal_min, slice_duration, toffset
        0, 0,                   # glmax, glmin
        b"", b"",               # descrip, aux_file
        0, 1,                   # qform_code, sform_code
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,       # quaternion params + offsets
        float(aff[0, 0]), float(aff[0, 1]), float(aff[0, 2]), float(aff[0, 3]),
        float(aff[1, 0]), float(aff[1, 1]), float(aff[1, 2]), float(aff[1, 3]),
        float(aff[2, 0]), float(aff[2, 1]), float(aff[2, 2]), float(aff[2, 3]),
        b"",                    # intent_name
        MAGIC,
    )


def write_volume(grid: VolumeGrid, path: str | Path, compress: bool | None = None) -> None:
    """Write a grid as a single-file NIfTI-1 volume.

    compress=None infers gzip from a .gz suffix. Writes are deterministic
    (gzip timestamp pinned to zero), so identical grids produce identical
    bytes.
    """
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    payload = np.asarray(grid.values, dtype=_DTYPES[_CODES[grid.values.dtype]])
    blob = header_bytes(grid) + b"\x00\x00\x00\x00" + payload.tobytes(order="F")
    with open(path, "wb") as f:
        if compress:
            # empty filename + zero mtime keep the gzip header byte-stable
            with gzip.GzipFile(filename="", fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(blob)
        else:
            f.write(blob)
