"""Per-class reflectance signatures of a labelled stack."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .raster import IGNORE, LabelMask, MultispectralImage

STD_KIND = "population"


@dataclass(frozen=True)
class BandStat:
    band: str
    center_nm: float
    mean: float | None
    std: float | None
    count: int

    @property
    def defined(self) -> bool:
        return self.count > 0


@dataclass(frozen=True)
class ClassSignature:
    class_code: int
    per_band: tuple

    def means(self) -> list:
        return [s.mean for s in self.per_band]


def signature_table(image: MultispectralImage, mask: LabelMask,
                    classes: Sequence[int]) -> list[ClassSignature]:
    """Mean and population std of reflectance per requested class and band."""
    if (image.width, image.height) != (mask.width, mask.height):
        raise DimensionError(
            f"image {image.width}x{image.height} vs mask {mask.width}x{mask.height}"
        )
    out = []
    for code in classes:
        if code == IGNORE:
            raise ValueError("the ignore code has no signature")
        sel = mask.data == code
        count = int(sel.sum())
        stats = []
        for b, meta in enumerate(image.bands):
            if count == 0:
                stats.append(BandStat(meta.name, meta.center_nm, None, None, 0))
                continue
            vals = image.data[b][sel].astype(np.float64)
            mean = float(vals.mean())
            std = float(np.sqrt(np.mean((vals - mean) ** 2)))
            stats.append(BandStat(meta.name, meta.center_nm, mean, std, count))
        out.append(ClassSignature(int(code), tuple(stats)))
    return out


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.9g}"


def signatures_to_csv(signatures: Sequence[ClassSignature]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "band", "center_nm", "mean", "std", "count"])
    for sig in signatures:
        for s in sig.per_band:
            writer.writerow([sig.class_code, s.band, _fmt(s.center_nm), _fmt(s.mean),
                             _fmt(s.std), s.count])
    return buf.getvalue()


def percent_table(signatures: Sequence[ClassSignature]) -> str:
    """Human-readable mean reflectance in percent, one row per class."""
    if not signatures:
        return ""
    bands = [s.band for s in signatures[0].per_band]
    lines = ["class " + " ".join(f"{b:>7}" for b in bands)]
    for sig in signatures:
        cells = ["    n/a" if s.mean is None else f"{100 * s.mean:7.2f}" for s in sig.per_band]
        lines.append(f"{sig.class_code:>5} " + " ".join(cells))
    return "\n".join(lines)


def reflectance_gaps(a: ClassSignature, b: ClassSignature) -> dict:
    """Absolute mean-reflectance difference per band between two classes."""
    return {
        sa.band: None if sa.mean is None or sb.mean is None else abs(sa.mean - sb.mean)
        for sa, sb in zip(a.per_band, b.per_band)
    }


def non_visible_gap_dominates(a: ClassSignature, b: ClassSignature,
                              non_visible=("RE", "NIR")) -> bool:
    """True when every non-visible band separates the classes more than any visible band."""
    gaps = reflectance_gaps(a, b)
    if any(v is None for v in gaps.values()):
        return False
    visible = [v for k, v in gaps.items() if k not in non_visible]
    hidden = [v for k, v in gaps.items() if k in non_visible]
    if not visible or not hidden:
        return False
    return min(hidden) > max(visible)
