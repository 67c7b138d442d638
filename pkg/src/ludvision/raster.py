"""Raster data model and file I/O.

Stacks are stored in the LMS container (little-endian)::

    magic    b"LUDV"
    version  u16 = 1
    width    u32
    height   u32
    bands    u16
    per band: center_nm f32, fwhm_nm f32, name 4 bytes NUL-padded
    payload  band-major, row-major f32 reflectance

Label masks are binary PGM (P5, maxval 255).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BoundsError, DimensionError, FormatError, RangeError

MAGIC = b"LUDV"
VERSION = 1
_HEADER = struct.Struct("<4sHIIH")
_BAND = struct.Struct("<ff4s")

BACKGROUND = 0
LUDWIGIA = 1
IGNORE = 255
VALID_LABELS = (BACKGROUND, LUDWIGIA, IGNORE)


@dataclass(frozen=True)
class BandMeta:
    name: str
    center_nm: float
    fwhm_nm: float

    def __post_init__(self):
        if not self.center_nm > 0:
            raise ValueError(f"band {self.name!r}: center_nm must be > 0")
        if not self.fwhm_nm >= 0:
            raise ValueError(f"band {self.name!r}: fwhm_nm must be >= 0")
        if len(self.name.encode("ascii")) > 4:
            raise ValueError(f"band name {self.name!r} longer than 4 bytes")


# DJI P4 Multispectral filter set, in canonical stacking order.
DEFAULT_BANDS = (
    BandMeta("B", 450.0, 16.0),
    BandMeta("G", 560.0, 16.0),
    BandMeta("R", 650.0, 16.0),
    BandMeta("RE", 730.0, 16.0),
    BandMeta("NIR", 840.0, 26.0),
)
CANONICAL_ORDER = tuple(b.name for b in DEFAULT_BANDS)


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0 or self.w < 1 or self.h < 1:
            raise BoundsError(f"invalid rect {self}")

    @classmethod
    def centered(cls, width: int, height: int, w: int, h: int) -> "Rect":
        """Window of size ``w x h`` centered in a ``width x height`` frame."""
        if w > width or h > height:
            raise BoundsError(f"{w}x{h} window does not fit {width}x{height}")
        return cls((width - w) // 2, (height - h) // 2, w, h)


class MultispectralImage:
    """Planar reflectance raster, ``data`` shaped (bands, height, width), float32."""

    __slots__ = ("bands", "data")

    def __init__(self, bands: Sequence[BandMeta], data):
        data = np.ascontiguousarray(data, dtype=np.float32)
        bands = tuple(bands)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] != len(bands):
            raise DimensionError(
                f"data shape {data.shape} does not match {len(bands)} bands"
            )
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise DimensionError("image must be at least 1x1")
        _check_range(data)
        data.setflags(write=False)
        self.bands = bands
        self.data = data

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def band_count(self) -> int:
        return len(self.bands)

    def band(self, index: int) -> "MultispectralImage":
        return MultispectralImage([self.bands[index]], self.data[index])

    def band_index(self, name: str) -> int:
        for i, b in enumerate(self.bands):
            if b.name == name:
                return i
        raise KeyError(name)

    def __eq__(self, other):
        if not isinstance(other, MultispectralImage):
            return NotImplemented
        return (
            self.bands == other.bands
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        names = ",".join(b.name for b in self.bands)
        return f"MultispectralImage({self.width}x{self.height}, bands={names})"


class LabelMask:
    """Per-pixel class codes: 0 background, 1 ludwigia, 255 ignore."""

    __slots__ = ("data",)

    def __init__(self, data, allowed: Sequence[int] | None = VALID_LABELS):
        arr = np.asarray(data)
        if arr.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("mask codes must fit in 8 bits")
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        if allowed is not None:
            bad = np.setdiff1d(np.unique(arr), np.asarray(allowed, dtype=np.uint8))
            if bad.size:
                raise ValueError(f"unexpected mask codes {bad.tolist()}")
        arr.setflags(write=False)
        self.data = arr

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"LabelMask({self.width}x{self.height})"


def _check_range(data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise RangeError("reflectance contains non-finite values")
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise RangeError(
            f"reflectance outside [0, 1]: min {data.min()}, max {data.max()}"
        )


def from_counts(counts, bands: Sequence[BandMeta], max_value: float = 65535.0):
    """Build an image from integer sensor counts by dividing by ``max_value``."""
    arr = np.asarray(counts, dtype=np.float64) / float(max_value)
    return MultispectralImage(bands, arr)


def header_size(band_count: int) -> int:
    return _HEADER.size + band_count * _BAND.size


def encode_raster(image: MultispectralImage) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, image.width, image.height, image.band_count)]
    for b in image.bands:
        parts.append(_BAND.pack(b.center_nm, b.fwhm_nm, b.name.encode("ascii")))
    parts.append(image.data.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def decode_raster(buf: bytes) -> MultispectralImage:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, width, height, nbands = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if width < 1 or height < 1 or nbands < 1:
        raise FormatError("empty raster")
    offset = _HEADER.size
    expected = header_size(nbands) + 4 * width * height * nbands
    if len(buf) != expected:
        raise FormatError(f"expected {expected} bytes, found {len(buf)}")
    bands = []
    for _ in range(nbands):
        center, fwhm, raw = _BAND.unpack_from(buf, offset)
        offset += _BAND.size
        try:
            bands.append(BandMeta(raw.rstrip(b"\0").decode("ascii"), center, fwhm))
        except (UnicodeDecodeError, ValueError) as exc:
            raise FormatError(f"bad band record: {exc}") from None
    data = np.frombuffer(buf, dtype="<f4", offset=offset).reshape(nbands, height, width)
    return MultispectralImage(bands, data.astype(np.float32))


def read_raster(path) -> MultispectralImage:
    with open(path, "rb") as fh:
        return decode_raster(fh.read())


def write_raster(image: MultispectralImage, path) -> None:
    _check_range(image.data)  # before opening, so a bad image leaves no file
    payload = encode_raster(image)
    with open(path, "wb") as fh:
        fh.write(payload)


def crop(image: MultispectralImage, rect: Rect) -> MultispectralImage:
    if rect.x + rect.w > image.width or rect.y + rect.h > image.height:
        raise BoundsError(f"{rect} exceeds {image.width}x{image.height} image")
    window = image.data[:, rect.y : rect.y + rect.h, rect.x : rect.x + rect.w]
    return MultispectralImage(image.bands, window.copy())


def crop_mask(mask: LabelMask, rect: Rect) -> LabelMask:
    if rect.x + rect.w > mask.width or rect.y + rect.h > mask.height:
        raise BoundsError(f"{rect} exceeds {mask.width}x{mask.height} mask")
    return LabelMask(mask.data[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w], None)


def stack(bands: Sequence[MultispectralImage]) -> MultispectralImage:
    """Concatenate single- or multi-band images of equal size along the band axis."""
    if not bands:
        raise ValueError("nothing to stack")
    shape = bands[0].data.shape[1:]
    for b in bands:
        if b.data.shape[1:] != shape:
            raise DimensionError("cannot stack images of different sizes")
    metas = [m for b in bands for m in b.bands]
    return MultispectralImage(metas, np.concatenate([b.data for b in bands]))


def encode_pgm(mask: LabelMask) -> bytes:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    return header + mask.data.tobytes()


def _pgm_tokens(buf: bytes, count: int):
    """Parse ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, i, n = [], 0, len(buf)
    while len(tokens) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise FormatError("truncated PGM header")
        tokens.append(buf[start:i])
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def decode_pgm(buf: bytes, allowed: Sequence[int] | None = VALID_LABELS) -> LabelMask:
    tokens, offset = _pgm_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM: {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric PGM header") from None
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    if len(buf) - offset != width * height:
        raise FormatError("PGM raster size mismatch")
    data = np.frombuffer(buf, dtype=np.uint8, offset=offset).reshape(height, width)
    return LabelMask(data.copy(), allowed)


def read_mask(path, allowed: Sequence[int] | None = VALID_LABELS) -> LabelMask:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read(), allowed)


def write_mask(mask: LabelMask, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(mask))


def read_capture(directory) -> list[MultispectralImage]:
    """Load ``b.lms, g.lms, r.lms, re.lms, nir.lms`` from a capture directory."""
    bands = []
    for name in CANONICAL_ORDER:
        path = os.path.join(directory, f"{name.lower()}.lms")
        img = read_raster(path)
        if img.band_count != 1:
            raise FormatError(f"{path}: expected a single-band file")
        bands.append(img)
    return bands
