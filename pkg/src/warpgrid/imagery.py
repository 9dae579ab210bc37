"""Value types for images, sampling grids and per-pixel maps, plus their file formats.

Images are ``(C, H, W)`` float32 arrays in ``[0, 1]``. Sampling grids are
``(2, H, W)`` float32 arrays of normalized coordinates, channel 0 holding x and
channel 1 holding y. Normalized -1 and +1 address the *centers* of the first and
last pixel along an axis (align-corners convention).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import png

__all__ = [
    "ImageryError",
    "MissingFileError",
    "MalformedPNGError",
    "UnsupportedBitDepthError",
    "GridFormatError",
    "BadMagicError",
    "SizeMismatchError",
    "ImageBuffer",
    "SamplingGrid",
    "Mask",
    "ConfidenceMap",
    "ErrorMap",
    "KeypointSet",
    "identity_grid",
    "load_image",
    "save_image",
    "load_mask",
    "save_mask",
    "save_grid",
    "load_grid",
    "save_keypoints",
    "load_keypoints",
    "pixel_to_normalized",
    "normalized_to_pixel",
]

GRID_MAGIC = b"WGRD"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sIII")


class ImageryError(Exception):
    """Base class for value-type and file-format errors."""


class MissingFileError(ImageryError, FileNotFoundError):
    pass


class MalformedPNGError(ImageryError):
    pass


class UnsupportedBitDepthError(ImageryError):
    pass


class GridFormatError(ImageryError):
    pass


class BadMagicError(GridFormatError):
    pass


class SizeMismatchError(GridFormatError):
    pass


def _as_f32(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float32, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """C x H x W intensities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_f32(self.data)
        if arr.ndim == 2:
            arr = arr[None]
            arr.setflags(write=False)
        if arr.ndim != 3 or not 1 <= arr.shape[0] <= 4:
            raise ImageryError(f"image must be (C, H, W) with 1-4 channels, got {arr.shape}")
        if arr.shape[1] == 0 or arr.shape[2] == 0:
            raise ImageryError("image must be nonempty")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ImageryError("image values must be finite and in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True, eq=False)
class SamplingGrid:
    """2 x H x W normalized coordinates (x plane, then y plane).

    Values outside [-1, 1] are legal; they mark samples that fall outside the
    other image.
    """

    coords: np.ndarray

    def __post_init__(self):
        arr = _as_f32(self.coords)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ImageryError(f"grid must be (2, H, W), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ImageryError("grid coordinates must be finite")
        object.__setattr__(self, "coords", arr)

    @property
    def height(self) -> int:
        return self.coords.shape[1]

    @property
    def width(self) -> int:
        return self.coords.shape[2]

    def in_range(self) -> np.ndarray:
        """Boolean H x W map of pixels whose coordinate lies inside [-1, 1]^2."""
        return np.all(np.abs(self.coords) <= 1.0, axis=0)

    def displacement(self) -> np.ndarray:
        return self.coords.astype(np.float64) - identity_grid(self.height, self.width).coords

    def __array__(self, dtype=None, copy=None):
        return self.coords if dtype is None else self.coords.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, SamplingGrid):
            return NotImplemented
        return self.coords.shape == other.coords.shape and self.coords.tobytes() == other.coords.tobytes()


@dataclass(frozen=True, eq=False)
class Mask:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ImageryError(f"mask must be (H, W), got {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise ImageryError("mask must be binary")
        arr = arr.astype(np.float32)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    data: np.ndarray

    def __post_init__(self):
        arr = _as_f32(self.data)
        if arr.ndim != 2:
            raise ImageryError(f"confidence map must be (H, W), got {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ImageryError("confidence values must be in [0, 1]")
        object.__setattr__(self, "data", arr)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True, eq=False)
class ErrorMap:
    data: np.ndarray

    def __post_init__(self):
        arr = _as_f32(self.data)
        if arr.ndim != 2:
            raise ImageryError(f"error map must be (H, W), got {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0:
            raise ImageryError("error values must be finite and non-negative")
        object.__setattr__(self, "data", arr)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Correspondences ``(x_src, y_src, x_tgt, y_tgt)`` in pixel units."""

    points: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 4)
        vis = np.array(self.visible, dtype=bool).reshape(-1)
        if len(vis) != len(pts):
            raise ImageryError("one visibility flag per keypoint is required")
        if not np.all(np.isfinite(pts)):
            raise ImageryError("keypoint coordinates must be finite")
        pts.setflags(write=False)
        vis.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visible", vis)

    def __len__(self):
        return len(self.points)

    def check_bounds(self, height: int, width: int) -> bool:
        p = self.points[self.visible]
        xs, ys = p[:, [0, 2]], p[:, [1, 3]]
        return bool(np.all((xs >= 0) & (xs <= width - 1) & (ys >= 0) & (ys <= height - 1)))

    def to_records(self) -> list[list]:
        return [[*map(float, p), bool(v)] for p, v in zip(self.points, self.visible)]

    @classmethod
    def from_records(cls, records) -> "KeypointSet":
        records = list(records)
        if not records:
            return cls(np.zeros((0, 4)), np.zeros(0, dtype=bool))
        pts = [r[:4] for r in records]
        vis = [bool(r[4]) for r in records]
        return cls(pts, vis)


def identity_grid(height: int, width: int) -> SamplingGrid:
    """Grid whose pixel (r, c) holds (2c/(W-1) - 1, 2r/(H-1) - 1)."""
    if height < 2 or width < 2:
        raise ImageryError("identity grid needs height and width >= 2")
    xs = 2.0 * np.arange(width, dtype=np.float64) / (width - 1) - 1.0
    ys = 2.0 * np.arange(height, dtype=np.float64) / (height - 1) - 1.0
    gx, gy = np.meshgrid(xs, ys)
    return SamplingGrid(np.stack([gx, gy]))


def pixel_to_normalized(coord, size: int):
    return 2.0 * np.asarray(coord, dtype=np.float64) / (size - 1) - 1.0


def normalized_to_pixel(coord, size: int):
    return (np.asarray(coord, dtype=np.float64) + 1.0) * (size - 1) / 2.0


# ---------------------------------------------------------------------------
# PNG


def _read_png(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such file: {path}")
    try:
        reader = png.Reader(filename=str(path))
        reader.preamble()
    except png.Error as exc:
        raise MalformedPNGError(f"{path}: {exc}") from exc
    if reader.bitdepth not in (8, 16) and not reader.colormap:
        raise UnsupportedBitDepthError(f"{path}: bit depth {reader.bitdepth} (need 8 or 16)")
    try:
        width, height, rows, info = reader.asDirect()
        arr = np.vstack([np.asarray(row, dtype=np.uint32) for row in rows])
    except (png.Error, ValueError, EOFError, OSError) as exc:
        raise MalformedPNGError(f"{path}: {exc}") from exc
    planes = info["planes"]
    bitdepth = info["bitdepth"]
    if bitdepth not in (8, 16):
        raise UnsupportedBitDepthError(f"{path}: bit depth {bitdepth} (need 8 or 16)")
    arr = arr.reshape(height, width, planes).transpose(2, 0, 1)
    return arr, bitdepth


def load_image(path) -> ImageBuffer:
    """Read an 8- or 16-bit PNG with 1-4 channels, scaled to [0, 1]."""
    raw, bitdepth = _read_png(path)
    scale = (1 << bitdepth) - 1
    return ImageBuffer(raw.astype(np.float64) / scale)


def save_image(image, path, bitdepth: int = 8) -> None:
    if bitdepth not in (8, 16):
        raise UnsupportedBitDepthError(f"cannot write bit depth {bitdepth}")
    data = np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    c, h, w = data.shape
    scale = (1 << bitdepth) - 1
    q = np.rint(np.clip(data, 0.0, 1.0) * scale).astype(np.uint16 if bitdepth == 16 else np.uint8)
    rows = q.transpose(1, 2, 0).reshape(h, w * c)
    writer = png.Writer(
        width=w,
        height=h,
        greyscale=c in (1, 2),
        alpha=c in (2, 4),
        bitdepth=bitdepth,
    )
    with open(path, "wb") as fh:
        writer.write(fh, rows)


def load_mask(path) -> Mask:
    img = load_image(path)
    return Mask((img.data[0] >= 0.5).astype(np.float32))


def save_mask(mask, path) -> None:
    save_image(np.asarray(mask, dtype=np.float64)[None], path, bitdepth=8)


# ---------------------------------------------------------------------------
# WGRD grids


def save_grid(grid: SamplingGrid, path) -> None:
    """Write ``WGRD`` | u32 version | u32 H | u32 W | x plane | y plane (LE f32)."""
    coords = np.asarray(grid.coords, dtype="<f4")
    _, h, w = coords.shape
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, h, w))
        fh.write(coords.tobytes(order="C"))


def load_grid(path) -> SamplingGrid:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such file: {path}")
    blob = path.read_bytes()
    if len(blob) < _GRID_HEADER.size:
        raise SizeMismatchError(f"{path}: truncated header")
    magic, version, h, w = _GRID_HEADER.unpack_from(blob)
    if magic != GRID_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != GRID_VERSION:
        raise GridFormatError(f"{path}: unsupported version {version}")
    payload = blob[_GRID_HEADER.size:]
    if len(payload) != 2 * h * w * 4:
        raise SizeMismatchError(f"{path}: header says {h}x{w}, payload has {len(payload)} bytes")
    coords = np.frombuffer(payload, dtype="<f4").reshape(2, h, w)
    return SamplingGrid(coords)


# ---------------------------------------------------------------------------
# keypoints


def save_keypoints(kps: KeypointSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(kps.to_records(), fh)


def load_keypoints(path) -> KeypointSet:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such file: {path}")
    with open(path) as fh:
        return KeypointSet.from_records(json.load(fh))
