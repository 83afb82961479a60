"""SPRG1 binary grid container.

Layout: ``b"SPRG1\\n"``, a 4-byte little-endian unsigned header length, a
UTF-8 JSON header, then the payload as row-major little-endian float32.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SPRG1\n"
KINDS = ("image", "sinogram", "weights", "transform_bank", "denoiser")


class ContainerError(ValueError):
    pass


def write_grid(path, data, kind, **header):
    """Write ``data`` (any shape, stored flat) with a JSON header.

    ``rows``/``cols`` are filled from a 2D array unless given explicitly.
    """
    if kind not in KINDS:
        raise ContainerError(f"unknown container kind {kind!r}")
    arr = np.ascontiguousarray(data, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise ContainerError(f"refusing to write non-finite values to {path}")
    hdr = {"kind": kind}
    if arr.ndim == 2:
        hdr["rows"], hdr["cols"] = int(arr.shape[0]), int(arr.shape[1])
    hdr.update(header)
    hdr["count"] = int(arr.size)
    raw = json.dumps(hdr, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(arr.tobytes(order="C"))
    return path


def read_grid(path, kind=None):
    """Return ``(array, header)``. 2D kinds come back shaped (rows, cols)."""
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ContainerError(f"{path}: bad magic")
    off = len(MAGIC)
    if len(blob) < off + 4:
        raise ContainerError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", blob[off:off + 4])
    off += 4
    hdr = json.loads(blob[off:off + n].decode("utf-8"))
    off += n
    if kind is not None and hdr.get("kind") != kind:
        raise ContainerError(f"{path}: expected kind {kind!r}, found {hdr.get('kind')!r}")
    arr = np.frombuffer(blob[off:], dtype="<f4").astype(np.float32)
    if arr.size != hdr.get("count", arr.size):
        raise ContainerError(f"{path}: payload has {arr.size} values, header says {hdr['count']}")
    if hdr["kind"] in ("image", "sinogram", "weights"):
        arr = arr.reshape(hdr["rows"], hdr["cols"])
    return arr, hdr


def write_image(path, img, pixel_size_mm, units="HU"):
    return write_grid(path, img, "image", pixel_size_mm=float(pixel_size_mm), units=units)


def write_sinogram(path, sino, det_spacing_mm, units="post-log", kind="sinogram"):
    return write_grid(path, sino, kind, det_spacing_mm=float(det_spacing_mm), units=units)


def read_array(path, kind=None):
    """Read a 2D container and return it as float64."""
    arr, _ = read_grid(path, kind)
    return arr.astype(np.float64)
