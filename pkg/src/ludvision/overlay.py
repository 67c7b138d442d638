"""RGB composites with predicted ludwigia pixels tinted red."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .raster import LUDWIGIA, LabelMask, MultispectralImage

TINT = np.array([255.0, 0.0, 0.0])


def rgb_composite(image: MultispectralImage) -> np.ndarray:
    """(H, W, 3) uint8 from the R, G and B bands."""
    planes = [image.data[image.band_index(name)] for name in ("R", "G", "B")]
    rgb = np.stack(planes, axis=-1).astype(np.float64)
    return np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def overlay(image: MultispectralImage, mask: LabelMask, alpha: float = 0.5) -> np.ndarray:
    if (image.width, image.height) != (mask.width, mask.height):
        raise DimensionError("image and mask sizes differ")
    rgb = rgb_composite(image).astype(np.float64)
    hit = mask.data == LUDWIGIA
    rgb[hit] = (1.0 - alpha) * rgb[hit] + alpha * TINT
    return np.rint(rgb).astype(np.uint8)


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def write_rgb(rgb: np.ndarray, path) -> None:
    """Write PNG when the path ends in .png (needs Pillow), binary PPM otherwise."""
    if str(path).lower().endswith(".png"):
        from PIL import Image

        Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
        return
    with open(path, "wb") as fh:
        fh.write(encode_ppm(rgb))
