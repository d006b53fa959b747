"""Per-camera cache of unit ray directions.

Unprojection runs two iterative solvers per pixel, so the table is built once
per camera and reused for every frame. On disk a table is::

    magic      4 bytes  b"RAYT"
    version    uint32   little-endian
    width      uint32
    height     uint32
    cam_id     32 bytes sha256 digest of the generating intrinsics
    rays       height*width*3 float64, little-endian, row-major
    valid      packed bitmask, height*width bits, little bit order
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import OK, MeiIntrinsics, unproject_pixels
from .errors import DimensionMismatch, FormatVersionMismatch, InvalidRay, IoFailure, OutOfBounds
from .fileutil import atomic_write_bytes

MAGIC = b"RAYT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII32s")


@dataclass(frozen=True, eq=False)
class RayTable:
    cam_id: str
    width: int
    height: int
    rays: np.ndarray  # (height, width, 3) float64, NaN where invalid
    valid: np.ndarray  # (height, width) bool

    def __post_init__(self) -> None:
        if self.rays.shape != (self.height, self.width, 3):
            raise DimensionMismatch(
                f"rays have shape {self.rays.shape}, expected {(self.height, self.width, 3)}"
            )
        if self.valid.shape != (self.height, self.width):
            raise DimensionMismatch(f"valid mask has shape {self.valid.shape}")
        self.rays.flags.writeable = False
        self.valid.flags.writeable = False

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matches(self, cam: MeiIntrinsics) -> bool:
        return self.cam_id == cam.identity_token()


def pixel_centers(width: int, height: int) -> np.ndarray:
    """``(height, width, 2)`` continuous coordinates of pixel centers."""
    u = np.arange(width, dtype=np.float64) + 0.5
    v = np.arange(height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def build_ray_table(cam: MeiIntrinsics) -> RayTable:
    """Unproject every pixel center of ``cam`` once."""
    rays, status = unproject_pixels(pixel_centers(cam.width, cam.height), cam)
    return RayTable(
        cam_id=cam.identity_token(),
        width=cam.width,
        height=cam.height,
        rays=rays,
        valid=status == OK,
    )


def lookup(table: RayTable, u: int, v: int) -> np.ndarray:
    """Stored ray at integer pixel ``(u, v)`` (column, row).

    Raises:
        OutOfBounds: the pixel is outside the table.
        InvalidRay: unprojection failed for this pixel at build time.
    """
    if not (0 <= u < table.width and 0 <= v < table.height):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {table.width}x{table.height} table")
    if not table.valid[v, u]:
        raise InvalidRay(f"no valid ray at pixel ({u}, {v})")
    return table.rays[v, u].copy()


def to_bytes(table: RayTable) -> bytes:
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, table.width, table.height, bytes.fromhex(table.cam_id)
    )
    rays = np.ascontiguousarray(table.rays, dtype="<f8").tobytes()
    bits = np.packbits(table.valid.ravel(), bitorder="little").tobytes()
    return header + rays + bits


def from_bytes(data: bytes, expected: MeiIntrinsics | None = None) -> RayTable:
    if len(data) < _HEADER.size:
        raise IoFailure("ray table file is truncated")
    magic, version, width, height, digest = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise IoFailure(f"not a ray table file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"ray table version {version}, expected {FORMAT_VERSION}")
    if expected is not None and (width, height) != (expected.width, expected.height):
        raise DimensionMismatch(
            f"file holds a {width}x{height} table, intrinsics expect "
            f"{expected.width}x{expected.height}"
        )
    n = width * height
    ray_bytes = n * 3 * 8
    mask_bytes = (n + 7) // 8
    if len(data) != _HEADER.size + ray_bytes + mask_bytes:
        raise IoFailure("ray table file size does not match its header")
    offset = _HEADER.size
    rays = np.frombuffer(data, dtype="<f8", count=n * 3, offset=offset)
    rays = rays.astype(np.float64).reshape(height, width, 3)
    bits = np.frombuffer(data, dtype=np.uint8, count=mask_bytes, offset=offset + ray_bytes)
    valid = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(height, width)
    return RayTable(cam_id=digest.hex(), width=width, height=height, rays=rays, valid=valid)


def persist(table: RayTable, path: str | Path) -> Path:
    """Write ``table`` atomically to ``path``."""
    path = Path(path)
    try:
        atomic_write_bytes(path, to_bytes(table))
    except OSError as exc:
        raise IoFailure(f"cannot write ray table {path}: {exc}") from exc
    return path


def load(path: str | Path, expected: MeiIntrinsics | None = None) -> RayTable:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read ray table {path}: {exc}") from exc
    return from_bytes(data, expected)


def checksum(table: RayTable) -> str:
    return hashlib.sha256(to_bytes(table)).hexdigest()


def cache_path(cam: MeiIntrinsics, cache_dir: str | Path, calibration_text: str | None = None) -> Path:
    """File name of the cache entry for ``cam`` (see :func:`cached_ray_table`)."""
    key_source = calibration_text if calibration_text is not None else cam.identity_token()
    key = hashlib.sha256(key_source.encode()).hexdigest()[:32]
    return Path(cache_dir) / f"rays-{key}.bin"


def cached_ray_table(
    cam: MeiIntrinsics, cache_dir: str | Path, calibration_text: str | None = None
) -> RayTable:
    """Load the table for ``cam`` from ``cache_dir``, building it on a miss.

    Entries are keyed by a hash of the calibration file contents when given,
    otherwise by the intrinsics themselves.
    """
    path = cache_path(cam, cache_dir, calibration_text)
    if path.exists():
        table = load(path, expected=cam)
        if table.matches(cam):
            return table
    table = build_ray_table(cam)
    persist(table, path)
    return table
