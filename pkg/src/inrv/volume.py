"""Scalar image volumes: raw+JSON and PGM I/O, coordinate grids, slicing.

Volumes are stored as ``(depth, height, width)`` float64 arrays normalized
to ``[0, 1]``; a 2D slice has ``depth == 1``.  On disk, voxels are unsigned
integers (8-bit in one byte, 12/16-bit in two bytes), row-major with x
fastest, next to a JSON sidecar describing the geometry.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SUPPORTED_BIT_DEPTHS = (8, 12, 16)
_AXES = {"z": 0, "y": 1, "x": 2}


class VolumeFormatError(ValueError):
    """Header/payload inconsistency or unsupported on-disk format."""


def max_code(bit_depth: int) -> int:
    return (1 << bit_depth) - 1


def _check_bit_depth(bit_depth: int):
    if bit_depth not in SUPPORTED_BIT_DEPTHS:
        raise VolumeFormatError(f"unsupported bit depth {bit_depth}; expected one of {SUPPORTED_BIT_DEPTHS}")


@dataclass
class Volume:
    data: np.ndarray
    bit_depth: int = 8
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be (depth, height, width), got shape {data.shape}")
        if not np.isfinite(data).all() or data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("volume values must be finite and lie in [0, 1]")
        _check_bit_depth(self.bit_depth)
        self.data = data
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def voxel_count(self) -> int:
        return int(self.data.size)

    @property
    def is_2d(self) -> bool:
        return self.data.shape[0] == 1

    def with_data(self, data: np.ndarray, **meta) -> "Volume":
        return Volume(data, self.bit_depth, self.spacing_mm, dict(meta))

    def to_codes(self) -> np.ndarray:
        """Quantize to integers, rounding half to even."""
        return np.rint(self.data * max_code(self.bit_depth)).astype(np.uint16 if self.bit_depth > 8 else np.uint8)

    @classmethod
    def from_codes(cls, codes: np.ndarray, bit_depth: int, spacing_mm=(1.0, 1.0, 1.0)) -> "Volume":
        _check_bit_depth(bit_depth)
        codes = np.asarray(codes)
        if codes.size and codes.max() > max_code(bit_depth):
            raise VolumeFormatError(f"voxel code {codes.max()} exceeds {bit_depth}-bit range")
        return cls(codes.astype(np.float64) / max_code(bit_depth), bit_depth, spacing_mm)


# ---------------------------------------------------------------------------
# raw + sidecar

def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def load_raw(path, header_path=None) -> Volume:
    path = Path(path)
    header_path = Path(header_path) if header_path is not None else sidecar_path(path)
    if not header_path.exists():
        raise FileNotFoundError(f"missing sidecar header {header_path}")
    header = json.loads(header_path.read_text())
    try:
        dims = [int(d) for d in header["dims"]]
        bit_depth = int(header["bit_depth"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"sidecar {header_path} lacks valid dims/bit_depth") from exc
    if len(dims) == 2:
        dims = [1] + dims
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"invalid dims {header['dims']}")
    _check_bit_depth(bit_depth)
    endian = header.get("endianness", "little")
    if endian not in ("little", "big"):
        raise VolumeFormatError(f"unknown endianness {endian!r}")
    dtype = np.dtype(np.uint8) if bit_depth == 8 else np.dtype("<u2" if endian == "little" else ">u2")
    payload = path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    codes = np.frombuffer(payload, dtype=dtype).reshape(dims)
    spacing = header.get("spacing_mm", [1.0, 1.0, 1.0])
    return Volume.from_codes(codes, bit_depth, spacing)


def save_raw(volume: Volume, path) -> None:
    path = Path(path)
    codes = volume.to_codes()
    if volume.bit_depth > 8:
        codes = codes.astype("<u2")
    path.write_bytes(codes.tobytes())
    header = {
        "dims": list(volume.dims),
        "bit_depth": volume.bit_depth,
        "spacing_mm": list(volume.spacing_mm),
        "endianness": "little",
    }
    sidecar_path(path).write_text(json.dumps(header, indent=2) + "\n")


# ---------------------------------------------------------------------------
# PGM

def _pgm_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise VolumeFormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # single whitespace byte separates header from raster


def load_pgm(path) -> Volume:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(buf, 4)
    if magic != b"P5":
        raise VolumeFormatError(f"not a binary PGM (magic {magic!r})")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise VolumeFormatError("malformed PGM header") from exc
    if maxval == 255:
        dtype, bit_depth = np.dtype(np.uint8), 8
    elif maxval == 65535:
        dtype, bit_depth = np.dtype(">u2"), 16
    else:
        raise VolumeFormatError(f"unsupported PGM maxval {maxval}")
    raster = buf[offset:offset + w * h * dtype.itemsize]
    if len(raster) != w * h * dtype.itemsize:
        raise VolumeFormatError("truncated PGM raster")
    codes = np.frombuffer(raster, dtype=dtype).reshape(1, h, w)
    return Volume.from_codes(codes, bit_depth)


def save_pgm(volume: Volume, slice_index: int, path) -> None:
    plane = extract_slice(volume, "z", slice_index).data[0]
    if volume.bit_depth == 8:
        maxval, dtype = 255, np.uint8
    else:
        maxval, dtype = 65535, np.dtype(">u2")
    codes = np.rint(plane * maxval).astype(dtype)
    h, w = plane.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + codes.tobytes())


# ---------------------------------------------------------------------------
# geometry

@dataclass
class CoordGrid:
    """One coordinate per voxel, row-major over ``(z, y, x)``.

    Columns are ordered ``(x, y, z)`` so that a 2D network uses the first
    two columns.
    """
    coords: np.ndarray
    dims: tuple[int, int, int]

    def __len__(self):
        return self.coords.shape[0]

    def for_dim(self, in_dim: int) -> np.ndarray:
        if in_dim not in (1, 2, 3):
            raise ValueError(f"unsupported coordinate dimension {in_dim}")
        return self.coords[:, :in_dim]


def axis_coords(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("axis length must be positive")
    if n == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def coord_grid(dims) -> CoordGrid:
    dims = tuple(int(d) for d in dims)
    if len(dims) == 2:
        dims = (1,) + dims
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive sizes, got {dims}")
    z, y, x = np.meshgrid(*(axis_coords(n) for n in dims), indexing="ij")
    coords = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    return CoordGrid(coords, dims)


def resolve_axis(axis) -> int:
    if isinstance(axis, str):
        try:
            return _AXES[axis.lower()]
        except KeyError:
            raise ValueError(f"unknown axis {axis!r}") from None
    if axis not in (0, 1, 2):
        raise ValueError(f"unknown axis {axis!r}")
    return int(axis)


def extract_slice(volume: Volume, axis="z", index: int = 0) -> Volume:
    ax = resolve_axis(axis)
    n = volume.dims[ax]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range for axis of length {n}")
    plane = np.take(volume.data, index, axis=ax)
    spacing = [s for i, s in enumerate(volume.spacing_mm) if i != ax]
    return Volume(plane[None], volume.bit_depth, (volume.spacing_mm[ax], *spacing))


def parse_dims(text: str) -> tuple[int, int, int]:
    """``WxH`` or ``WxHxD`` to ``(depth, height, width)``."""
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise ValueError(f"cannot parse dims {text!r}; expected WxH or WxHxD") from None
    if len(parts) not in (2, 3) or min(parts) < 1:
        raise ValueError(f"cannot parse dims {text!r}; expected WxH or WxHxD")
    w, h = parts[0], parts[1]
    d = parts[2] if len(parts) == 3 else 1
    return d, h, w


def format_dims(dims) -> str:
    d, h, w = dims
    return f"{w}x{h}" if d == 1 else f"{w}x{h}x{d}"
