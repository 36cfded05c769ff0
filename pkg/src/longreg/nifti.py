"""Minimal single-file NIfTI-1 codec.

Covers exactly what the pipeline stores: 3D scalar volumes and 4D vector
volumes with a length-3 trailing axis, float or integer data, RAS world
affine, optional header extensions, optional gzip. Two-file (.hdr/.img)
NIfTI is not supported. Writes are deterministic byte for byte: fixed
header fields, gzip mtime pinned to zero.

The 348-byte header is packed by hand. The sform rows carry the affine
(sform_code 2); qform is written as unused but honoured when reading
files produced elsewhere. The intent_name field carries the one-word
field-kind tag for vector volumes ("svf" or "disp").
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import IoError, ParseError, UnsupportedDimensionality

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

_DTYPE_CODES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
    1024: np.dtype(np.int64),
}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class NiftiImage:
    """Decoded file: array data, world affine, intent tag, raw extensions."""

    data: np.ndarray
    affine: np.ndarray
    intent_name: str = ""
    extensions: list[tuple[int, bytes]] = field(default_factory=list)


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise ParseError(f"{path}: gzip stream is corrupt or truncated ({exc})") from exc
    return raw


def _quaternion_affine(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    spacing = np.array([hdr["pixdim"][1], hdr["pixdim"][2], hdr["pixdim"][3] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = rot * spacing
    aff[:3, 3] = (hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"])
    return aff


def read_nifti(path: str) -> NiftiImage:
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise ParseError(
            f"{path}: truncated at byte {len(raw)}, expected a {HEADER_SIZE}-byte header"
        )
    (sizeof_hdr,) = struct.unpack("<i", raw[:4])
    endian = "<"
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack(">i", raw[:4])
        if sizeof_hdr != HEADER_SIZE:
            raise ParseError(f"{path}: bad sizeof_hdr at byte 0, not a NIfTI-1 file")
        endian = ">"

    def unpack(fmt, off, size):
        return struct.unpack(endian + fmt, raw[off : off + size])

    magic = raw[344:348]
    if magic != MAGIC_SINGLE:
        raise ParseError(
            f"{path}: magic {magic!r} at byte 344 is not 'n+1' (only single-file NIfTI-1 is supported)"
        )
    dim = unpack("8h", 40, 16)
    ndim = dim[0]
    if ndim == 3:
        shape = tuple(int(n) for n in dim[1:4])
    elif ndim == 4 and dim[4] == 3:
        shape = tuple(int(n) for n in dim[1:5])
    else:
        raise UnsupportedDimensionality(
            f"{path}: dim {dim[: ndim + 1]} is neither 3D nor 4D with a length-3 vector axis"
        )
    (datatype_code,) = unpack("h", 70, 2)
    if datatype_code not in _DTYPE_CODES:
        raise ParseError(f"{path}: unsupported datatype code {datatype_code} at byte 70")
    dtype = _DTYPE_CODES[datatype_code].newbyteorder(endian)
    pixdim = unpack("8f", 76, 32)
    (vox_offset_f,) = unpack("f", 108, 4)
    vox_offset = int(round(vox_offset_f))
    scl_slope, scl_inter = unpack("2f", 112, 8)
    (qform_code,) = unpack("h", 252, 2)
    (sform_code,) = unpack("h", 254, 2)
    quatern = unpack("6f", 256, 24)
    srow_x = unpack("4f", 280, 16)
    srow_y = unpack("4f", 296, 16)
    srow_z = unpack("4f", 312, 16)
    intent_name = raw[328:344].split(b"\x00", 1)[0].decode("ascii", "replace")

    extensions: list[tuple[int, bytes]] = []
    if len(raw) >= HEADER_SIZE + 4 and raw[HEADER_SIZE] != 0:
        pos = HEADER_SIZE + 4
        while pos < vox_offset:
            if pos + 8 > len(raw):
                raise ParseError(
                    f"{path}: truncated at byte {len(raw)}, expected extension header at byte {pos}"
                )
            esize, ecode = struct.unpack(endian + "2i", raw[pos : pos + 8])
            if esize < 8 or pos + esize > vox_offset:
                raise ParseError(f"{path}: bad extension size {esize} at byte {pos}")
            extensions.append((ecode, raw[pos + 8 : pos + esize]))
            pos += esize

    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if len(raw) < vox_offset + nbytes:
        raise ParseError(
            f"{path}: truncated at byte {len(raw)}, expected {vox_offset + nbytes} bytes "
            f"({nbytes} data bytes from offset {vox_offset})"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F")
    if endian == ">":
        data = data.astype(data.dtype.newbyteorder("<"))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float64) * slope + scl_inter

    if sform_code > 0:
        affine = np.array([srow_x, srow_y, srow_z, (0, 0, 0, 1)], dtype=np.float64)
    elif qform_code > 0:
        affine = _quaternion_affine(
            {
                "quatern_b": quatern[0],
                "quatern_c": quatern[1],
                "quatern_d": quatern[2],
                "qoffset_x": quatern[3],
                "qoffset_y": quatern[4],
                "qoffset_z": quatern[5],
                "pixdim": pixdim,
            }
        )
    else:
        affine = np.diag([pixdim[1] or 1.0, pixdim[2] or 1.0, pixdim[3] or 1.0, 1.0])
    return NiftiImage(np.ascontiguousarray(data), affine, intent_name, extensions)


def write_nifti(
    path: str,
    data: np.ndarray,
    affine: np.ndarray,
    intent_name: str = "",
    extensions: list[tuple[int, bytes]] | None = None,
) -> None:
    arr = np.asarray(data)
    if arr.ndim == 3:
        dim = (3,) + arr.shape + (1, 1, 1, 1)
    elif arr.ndim == 4 and arr.shape[3] == 3:
        dim = (4,) + arr.shape + (1, 1, 1)
    else:
        raise UnsupportedDimensionality(
            f"{path}: array shape {arr.shape} is neither 3D nor 4D with a length-3 vector axis"
        )
    dt = np.dtype(arr.dtype).newbyteorder("=")
    if dt not in _CODE_FOR_DTYPE:
        raise IoError(f"{path}: dtype {arr.dtype} has no NIfTI-1 code")
    aff = np.asarray(affine, dtype=np.float64)
    spacing = np.linalg.norm(aff[:3, :3], axis=0)

    ext_blobs = []
    for ecode, payload in extensions or []:
        esize = 8 + len(payload)
        pad = (-esize) % 16
        ext_blobs.append(struct.pack("<2i", esize + pad, ecode) + payload + b"\x00" * pad)
    ext_bytes = b"".join(ext_blobs)
    vox_offset = HEADER_SIZE + 4 + len(ext_bytes)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, _CODE_FOR_DTYPE[dt])
    struct.pack_into("<h", hdr, 72, dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(vox_offset))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # spatial units: mm
    descrip = b"longreg"
    hdr[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<2h", hdr, 252, 0, 2)  # qform unused, sform aligned
    struct.pack_into("<4f", hdr, 280, *aff[0])
    struct.pack_into("<4f", hdr, 296, *aff[1])
    struct.pack_into("<4f", hdr, 312, *aff[2])
    name = intent_name.encode("ascii")[:15]
    hdr[328 : 328 + len(name)] = name
    hdr[344:348] = MAGIC_SINGLE

    extender = bytes([1, 0, 0, 0]) if ext_bytes else bytes(4)
    payload = bytes(hdr) + extender + ext_bytes + arr.astype(dt).tobytes(order="F")
    try:
        if str(path).endswith(".gz"):
            with open(path, "wb") as f:
                with gzip.GzipFile(filename="", mode="wb", fileobj=f, mtime=0) as gz:
                    gz.write(payload)
        else:
            with open(path, "wb") as f:
                f.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
