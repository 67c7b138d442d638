"""Band-to-band registration of a multispectral capture.

Each non-reference band is matched against the reference band by NCC
template matching on a regular grid, a homography is fitted to the matches
with RANSAC around a normalized DLT, and the band is resampled into the
reference frame with bilinear interpolation.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BoundsError, DegenerateError, DimensionError
from .raster import MultispectralImage, Rect, crop, stack

DEFAULT_TRIM = (1400, 1100)
_CONFIDENCE = 0.999


@dataclass(frozen=True)
class Correspondence:
    ref_xy: tuple
    tgt_xy: tuple
    score: float


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 2000
    inlier_threshold_px: float = 1.5
    min_inliers: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.inlier_threshold_px > 0:
            raise ValueError("inlier_threshold_px must be > 0")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be >= 4")


class Homography:
    """3x3 projective map scaled so that ``m[2, 2] == 1``."""

    __slots__ = ("m",)

    def __init__(self, m):
        m = np.array(m, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) < 1e-12:
            raise DegenerateError("homography with m[2,2] == 0 cannot be normalized")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DegenerateError("singular homography")
        self.m = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        return cls([[1, 0, dx], [0, 1, dy], [0, 0, 1]])

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.m @ other.m)

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        return _project(self.m, pts)

    def __repr__(self):
        return f"Homography({self.m.tolist()})"


def _project(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    q = pts @ m[:, :2].T + m[:, 2]
    w = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = q[:, :2] / w[:, None]
    out[~np.isfinite(out).all(axis=1)] = np.inf
    return out


def _plane(band) -> np.ndarray:
    if isinstance(band, MultispectralImage):
        if band.band_count != 1:
            raise DimensionError("expected a single-band image")
        return band.data[0].astype(np.float64)
    arr = np.asarray(band, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D band, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# correspondences


def ncc_surface(template: np.ndarray, region: np.ndarray) -> np.ndarray:
    """NCC of ``template`` at every placement inside ``region``.

    Placements whose window has zero variance score ``-inf``.
    """
    th, tw = template.shape
    t = template - template.mean()
    tnorm = math.sqrt(float(np.sum(t * t)))
    windows = sliding_window_view(region, (th, tw))
    num = np.tensordot(windows, t, axes=([2, 3], [0, 1]))
    n = th * tw
    wsum = windows.sum(axis=(2, 3))
    wsq = (windows * windows).sum(axis=(2, 3))
    wvar = np.maximum(wsq - wsum * wsum / n, 0.0)
    den = tnorm * np.sqrt(wvar)
    out = np.full(num.shape, -np.inf)
    ok = den > 1e-12 * max(1.0, tnorm)
    out[ok] = num[ok] / den[ok]
    return out


def _parabola_offset(cm: float, c0: float, cp: float) -> float:
    denom = cm - 2.0 * c0 + cp
    if not np.isfinite(denom) or denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (cm - cp) / denom, -0.5, 0.5))


def find_correspondences(ref_band, tgt_band, grid_step: int = 64, window: int = 21,
                         search_radius: int = 16, min_candidates: int = 12) -> list[Correspondence]:
    """Grid of NCC matches from the reference band into the target band.

    A perfect integer match (score 1) is already the global NCC maximum and
    is returned unrefined; otherwise the peak is refined with a separable
    parabola fit.
    """
    ref = _plane(ref_band)
    tgt = _plane(tgt_band)
    if ref.shape != tgt.shape:
        raise DimensionError(f"band sizes differ: {ref.shape} vs {tgt.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd")
    if grid_step < 1 or search_radius < 0:
        raise ValueError("grid_step must be >= 1 and search_radius >= 0")
    half = window // 2
    margin = half + search_radius
    h, w = ref.shape
    r = search_radius
    found = []
    for y in range(margin, h - margin, grid_step):
        for x in range(margin, w - margin, grid_step):
            tpl = ref[y - half : y + half + 1, x - half : x + half + 1]
            if np.ptp(tpl) <= 1e-12:
                continue
            region = tgt[y - margin : y + margin + 1, x - margin : x + margin + 1]
            surf = ncc_surface(tpl, region)
            flat = int(np.argmax(surf))
            iy, ix = divmod(flat, surf.shape[1])
            best = surf[iy, ix]
            if not np.isfinite(best):
                continue
            dy, dx = float(iy - r), float(ix - r)
            if best < 1.0 - 1e-9:
                if 0 < iy < 2 * r:
                    dy += _parabola_offset(surf[iy - 1, ix], best, surf[iy + 1, ix])
                if 0 < ix < 2 * r:
                    dx += _parabola_offset(surf[iy, ix - 1], best, surf[iy, ix + 1])
            score = float(np.clip(best, -1.0, 1.0))
            found.append(Correspondence((float(x), float(y)), (x + dx, y + dy), score))
    if len(found) < min_candidates:
        raise DegenerateError(
            f"only {len(found)} usable correspondences (need {min_candidates})"
        )
    return found


# ---------------------------------------------------------------------------
# homography estimation


def _hartley(pts: np.ndarray):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return (pts - c) * s, t


def dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalized DLT for ``dst ~ H src``; None when the system is degenerate."""
    if len(src) < 4:
        return None
    sn, ts = _hartley(src)
    dn, td = _hartley(dst)
    x, y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    a = np.empty((2 * len(src), 9))
    a[0::2] = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=1)
    a[1::2] = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=1)
    _, sv, vt = np.linalg.svd(a)
    if len(sv) >= 8 and sv[7] <= 1e-10 * sv[0]:
        return None
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(td) @ hn @ ts
    if abs(m[2, 2]) < 1e-12:
        return None
    m = m / m[2, 2]
    if abs(np.linalg.det(m)) <= 1e-12:
        return None
    return m


def _collinear(pts: np.ndarray) -> bool:
    c = pts.mean(axis=0)
    scale2 = max(float(((pts - c) ** 2).sum(axis=1).mean()), 1e-300)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        e1, e2 = pts[j] - pts[i], pts[k] - pts[i]
        if abs(e1[0] * e2[1] - e1[1] * e2[0]) <= 1e-6 * scale2:
            return True
    return False


def reprojection_errors(m: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.sqrt(((_project(m, src) - dst) ** 2).sum(axis=1))


def _pairs_arrays(pairs: Sequence[Correspondence]):
    src = np.array([p.tgt_xy for p in pairs], dtype=np.float64).reshape(-1, 2)
    dst = np.array([p.ref_xy for p in pairs], dtype=np.float64).reshape(-1, 2)
    return src, dst


def estimate_homography(pairs: Sequence[Correspondence], cfg: RansacConfig = RansacConfig()) -> Homography:
    """Homography taking target-band points onto reference-band points."""
    src, dst = _pairs_arrays(pairs)
    n = len(src)
    if n < 4:
        raise DegenerateError(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed)
    thr = cfg.inlier_threshold_px
    best = None
    best_key = (-1, -np.inf)
    needed = cfg.max_iters
    it = 0
    while it < needed:
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        if _collinear(src[idx]) or _collinear(dst[idx]):
            continue
        m = dlt(src[idx], dst[idx])
        if m is None:
            continue
        err = reprojection_errors(m, src, dst)
        inl = err < thr
        count = int(inl.sum())
        key = (count, -float(err[inl].sum()))
        if key > best_key:
            best_key, best = key, inl
            frac = count / n
            if frac >= 1.0:
                needed = it
            elif frac > 0:
                k = math.log(1 - _CONFIDENCE) / math.log(1 - frac ** 4)
                needed = min(cfg.max_iters, max(it, int(math.ceil(k))))
    if best is None or best_key[0] < cfg.min_inliers:
        got = 0 if best is None else best_key[0]
        raise DegenerateError(f"RANSAC consensus of {got} below min_inliers={cfg.min_inliers}")
    inliers = best
    m = None
    for _ in range(10):
        fit = dlt(src[inliers], dst[inliers])
        if fit is None:
            break
        m = fit
        refreshed = reprojection_errors(m, src, dst) < thr
        if refreshed.sum() < cfg.min_inliers or np.array_equal(refreshed, inliers):
            break
        inliers = refreshed
    if m is None:
        raise DegenerateError("inlier set is degenerate")
    return Homography(m)


# ---------------------------------------------------------------------------
# resampling and stacking


def bilinear_sample(plane: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``plane`` at (u, v); points outside ``[0, W-1] x [0, H-1]`` give 0."""
    h, w = plane.shape
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uu = np.where(inside, u, 0.0)
    vv = np.where(inside, v, 0.0)
    x0 = np.floor(uu).astype(np.intp)
    y0 = np.floor(vv).astype(np.intp)
    fx = uu - x0
    fy = vv - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = plane[y0, x0] * (1 - fx) + plane[y0, x1] * fx
    bot = plane[y1, x0] * (1 - fx) + plane[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.where(inside, out, 0.0)


def warp_band(band, h: Homography, out_size: tuple) -> MultispectralImage | np.ndarray:
    """Resample ``band`` into the frame where ``h`` maps it (inverse mapping).

    ``out_size`` is ``(width, height)``. Returns the same kind of object it
    was given: a single-band image or a 2-D array.
    """
    plane = _plane(band)
    ow, oh = out_size
    inv = np.linalg.inv(h.m)
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    q0 = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    q1 = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    q2 = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = q0 / q2
        v = q1 / q2
    bad = ~(np.isfinite(u) & np.isfinite(v))
    u[bad] = -1.0
    v[bad] = -1.0
    out = bilinear_sample(plane, u, v)
    if isinstance(band, MultispectralImage):
        return MultispectralImage(band.bands, np.clip(out, 0.0, 1.0))
    return out


def _band_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def register_bands(bands: Sequence[MultispectralImage], ref_index: int = 1,
                   cfg: RansacConfig = RansacConfig(), grid_step: int = 64, window: int = 21,
                   search_radius: int = 16, workers: int = 1) -> list[Homography]:
    """Homography of every band into the reference band's frame."""
    if not 0 <= ref_index < len(bands):
        raise BoundsError(f"ref_index {ref_index} outside 0..{len(bands) - 1}")
    shape = bands[0].data.shape
    for b in bands:
        if b.band_count != 1 or b.data.shape != shape:
            raise DimensionError("capture bands must be single-band images of equal size")
    ref = bands[ref_index]

    def solve(i):
        if i == ref_index:
            return Homography.identity()
        band_cfg = dataclasses.replace(cfg, seed=_band_seed(cfg.seed, i))
        try:
            pairs = find_correspondences(ref, bands[i], grid_step, window, search_radius,
                                         cfg.min_inliers)
            return estimate_homography(pairs, band_cfg)
        except DegenerateError as exc:
            err = DegenerateError(f"band {i} ({bands[i].bands[0].name}): {exc}")
            err.band = i
            raise err from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(solve, range(len(bands))))
    return [solve(i) for i in range(len(bands))]


def align_and_stack(bands: Sequence[MultispectralImage], ref_index: int = 1,
                    cfg: RansacConfig = RansacConfig(), trim: Rect | None = None,
                    grid_step: int = 64, window: int = 21, search_radius: int = 16,
                    workers: int = 1) -> MultispectralImage:
    """Register, stack in wavelength order and trim a capture.

    ``trim`` defaults to the 1400x1100 window centered in the frame.
    """
    homs = register_bands(bands, ref_index, cfg, grid_step, window, search_radius, workers)
    h, w = bands[0].data.shape[1:]
    if trim is None:
        trim = Rect.centered(w, h, *DEFAULT_TRIM)
    warped = [
        b if i == ref_index else warp_band(b, homs[i], (w, h))
        for i, b in enumerate(bands)
    ]
    order = sorted(range(len(bands)), key=lambda i: bands[i].bands[0].center_nm)
    return crop(stack([warped[i] for i in order]), trim)
