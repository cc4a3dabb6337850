"""Binary volume (MCV1) and k-space (MCK1) files plus PNG slice export.

Both formats are: 4-byte magic, little-endian uint32 header length, a UTF-8
JSON header, then a little-endian payload. Complex values are interleaved
float32 real/imag pairs in C order.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .forward_model import KSpaceData
from .nn.network import atomic_write

MCV1_MAGIC = b"MCV1"
MCK1_MAGIC = b"MCK1"
C64 = np.dtype("<c8")
F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    def __init__(self, found: bytes, expected: bytes):
        super().__init__(f"bad magic {found!r}, expected {expected!r}")


class TruncatedPayloadError(FormatError):
    pass


class DimMismatchError(FormatError):
    pass


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<I", len(text)) + text + payload


def _unpack(blob: bytes, magic: bytes) -> tuple[dict, memoryview]:
    if blob[:4] != magic:
        raise BadMagicError(blob[:4], magic)
    if len(blob) < 8:
        raise TruncatedPayloadError("truncated header length")
    (n,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + n:
        raise TruncatedPayloadError("truncated header")
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    return header, memoryview(blob)[8 + n :]


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


# ---------------------------------------------------------------------------
# volumes


def write_volume(path, volume: np.ndarray, scale: float = 1.0) -> None:
    """Write a (c, z, y, x) complex volume; 3-D input is stored with c = 1."""
    vol = np.asarray(volume)
    if vol.ndim == 3:
        vol = vol[None]
    if vol.ndim != 4:
        raise DimMismatchError(f"expected (c, z, y, x), got shape {vol.shape}")
    header = {"dims": list(vol.shape), "dtype": "c64le", "scale": float(scale)}
    atomic_write(path, _pack(MCV1_MAGIC, header, np.ascontiguousarray(vol, dtype=C64).tobytes()))


def read_volume_with_header(path) -> tuple[np.ndarray, dict]:
    header, payload = _unpack(_read(path), MCV1_MAGIC)
    if header.get("dtype") != "c64le":
        raise FormatError(f"unsupported value type {header.get('dtype')!r}")
    dims = [int(d) for d in header["dims"]]
    if len(dims) != 4 or min(dims) < 1:
        raise DimMismatchError(f"invalid dims {dims}")
    expected = 8 * int(np.prod(dims))
    if len(payload) != expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header implies {expected}")
    vol = np.frombuffer(payload, dtype=C64).astype(np.complex64).reshape(dims)
    return vol, header


def read_volume(path) -> np.ndarray:
    return read_volume_with_header(path)[0]


# ---------------------------------------------------------------------------
# k-space


def write_kspace(path, data: KSpaceData) -> None:
    """Coordinates are stored as float32 triples (2-D points get a leading 0)."""
    ndim = len(data.grid)
    header = {
        "contrasts": data.n_contrasts,
        "coils": data.n_coils,
        "counts": [int(p.shape[0]) for p in data.points],
        "grid": list(data.grid),
        "eta": float(data.eta),
        "seed": int(data.seed),
    }
    parts = []
    for s, p in zip(data.samples, data.points):
        if s.shape != (data.n_coils, p.shape[0]):
            raise DimMismatchError(f"samples {s.shape} do not match {p.shape[0]} points")
        xyz = np.zeros((p.shape[0], 3), dtype=F32)
        xyz[:, 3 - ndim :] = p
        parts.append(xyz.tobytes())
        parts.append(np.ascontiguousarray(s, dtype=C64).tobytes())
    atomic_write(path, _pack(MCK1_MAGIC, header, b"".join(parts)))


def read_kspace(path) -> KSpaceData:
    header, payload = _unpack(_read(path), MCK1_MAGIC)
    try:
        n_c, n_q = int(header["contrasts"]), int(header["coils"])
        counts = [int(c) for c in header["counts"]]
        grid = tuple(int(g) for g in header["grid"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"incomplete header: {exc}") from None
    if len(counts) != n_c or len(grid) not in (2, 3):
        raise DimMismatchError("header counts/grid inconsistent")
    expected = sum(12 * k + 8 * n_q * k for k in counts)
    if len(payload) != expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header implies {expected}")
    ndim = len(grid)
    samples, points, off = [], [], 0
    for k in counts:
        xyz = np.frombuffer(payload[off : off + 12 * k], dtype=F32).reshape(k, 3)
        off += 12 * k
        s = np.frombuffer(payload[off : off + 8 * n_q * k], dtype=C64).reshape(n_q, k)
        off += 8 * n_q * k
        points.append(xyz[:, 3 - ndim :].astype(np.float64))
        samples.append(s.astype(np.complex128))
    return KSpaceData(samples, points, grid, float(header.get("eta", 0.0)), int(header.get("seed", 0)))


# ---------------------------------------------------------------------------
# PNG export


def slice_to_gray(img: np.ndarray, window=(0.0, 1.0)) -> np.ndarray:
    """Linear magnitude window to uint8 with round-half-up (0.5 -> 128)."""
    lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise ValueError(f"empty window {window}")
    t = (np.abs(img) - lo) / (hi - lo)
    return np.floor(np.clip(t, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_slice_png(path, volume: np.ndarray, contrast: int, direction: str, index: int, window=(0.0, 1.0)):
    """Save one magnitude slice of a (c, z, y, x) volume as 8-bit grayscale."""
    from PIL import Image

    from .energy import extract_slice

    vol = np.asarray(volume)
    if vol.ndim == 3:
        vol = vol[None]
    if not 0 <= contrast < vol.shape[0]:
        raise IndexError(f"contrast {contrast} out of range")
    axis = {"z": 1, "y": 2, "x": 3}.get(direction)
    if axis is None:
        raise ValueError(f"unknown direction {direction!r}")
    if not 0 <= index < vol.shape[axis]:
        raise IndexError(f"slice index {index} out of range")
    img = extract_slice(vol, direction, index)[contrast]
    gray = slice_to_gray(img, window)
    buf = io.BytesIO()
    Image.fromarray(gray, mode="L").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())
    return gray
