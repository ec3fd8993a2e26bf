"""Minimal NPY v1.0 reader/writer for float32 C-order tensors.

This is the on-disk tensor interchange format between the extractor
bridge and this engine. Payloads are little-endian IEEE-754 binary32
regardless of host; headers follow the NPY v1.0 layout (magic, version,
uint16 header length, python-literal dict padded to a 64-byte multiple).
The reader validates strictly and reports failures with byte offsets.
"""

from __future__ import annotations

import ast
import io

import numpy as np

from .errors import FormatError

MAGIC = b"\x93NUMPY"
# refuse shapes whose element count cannot plausibly fit a real payload
MAX_ELEMENTS = 1 << 40


def write_tensor(path, values) -> None:
    """Write ``values`` to ``path`` as an NPY v1.0 file of '<f4' C-order."""
    with open(path, "wb") as fh:
        write_tensor_to(fh, values)


def write_tensor_to(fh: io.BufferedIOBase, values) -> None:
    """Write one NPY v1.0 float32 tensor to an open binary stream."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    header = "{'descr': '<f4', 'fortran_order': False, 'shape': %s, }" % (
        str(tuple(int(d) for d in arr.shape)),
    )
    # magic(6) + version(2) + hlen(2) + header must be a multiple of 64
    unpadded = len(MAGIC) + 2 + 2 + len(header) + 1
    pad = (64 - unpadded % 64) % 64
    header = header + " " * pad + "\n"
    fh.write(MAGIC)
    fh.write(bytes([1, 0]))
    fh.write(np.uint16(len(header)).tobytes())
    fh.write(header.encode("latin1"))
    fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read an NPY v1.0 float32 tensor written by :func:`write_tensor`.

    Raises :class:`FormatError` with the byte offset of the first
    inconsistency (bad magic, unsupported version or dtype, truncated
    payload, implausible shape).
    """
    with open(path, "rb") as fh:
        return read_tensor_from(fh)


def read_tensor_from(fh: io.BufferedIOBase) -> np.ndarray:
    """Read one NPY v1.0 tensor from an open binary stream."""
    magic = fh.read(6)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = fh.read(2)
    if len(version) < 2:
        raise FormatError("truncated version field", offset=6)
    if tuple(version) != (1, 0):
        raise FormatError(f"unsupported NPY version {tuple(version)}", offset=6)
    hlen_bytes = fh.read(2)
    if len(hlen_bytes) < 2:
        raise FormatError("truncated header length", offset=8)
    hlen = int(np.frombuffer(hlen_bytes, dtype="<u2")[0])
    header_bytes = fh.read(hlen)
    if len(header_bytes) < hlen:
        raise FormatError(
            f"truncated header, expected {hlen} bytes", offset=10 + len(header_bytes)
        )
    try:
        header = ast.literal_eval(header_bytes.decode("latin1"))
        descr = header["descr"]
        fortran = header["fortran_order"]
        shape = tuple(header["shape"])
    except Exception as exc:
        raise FormatError(f"unparseable header: {exc}", offset=10) from exc
    if descr != "<f4":
        raise FormatError(f"unsupported dtype {descr!r}, expected '<f4'", offset=10)
    if fortran:
        raise FormatError("fortran_order payloads are not supported", offset=10)
    if any((not isinstance(d, int)) or d < 0 for d in shape):
        raise FormatError(f"invalid shape {shape}", offset=10)
    count = 1
    for d in shape:
        count *= d
    if count > MAX_ELEMENTS:
        raise FormatError(f"dimension overflow: shape {shape}", offset=10)
    payload = fh.read(count * 4)
    if len(payload) < count * 4:
        raise FormatError(
            f"truncated payload, expected {count * 4} bytes got {len(payload)}",
            offset=10 + hlen + len(payload),
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
