import numpy as np
import pytest

from ludvision.alignment import Correspondence
from ludvision.raster import DEFAULT_BANDS, MultispectralImage

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


class Scene:
    """Smooth analytic texture that can be sampled at any real coordinate."""

    def __init__(self, seed, components=24):
        rng = np.random.default_rng(seed)
        wavelength = rng.uniform(9.0, 60.0, components)
        theta = rng.uniform(0, np.pi, components)
        k = 2 * np.pi / wavelength
        self.kx = k * np.cos(theta)
        self.ky = k * np.sin(theta)
        self.phase = rng.uniform(0, 2 * np.pi, components)
        self.amp = rng.uniform(0.5, 1.0, components)
        self.norm = self.amp.sum()

    def __call__(self, x, y):
        x = np.asarray(x, dtype=np.float64)[..., None]
        y = np.asarray(y, dtype=np.float64)[..., None]
        v = (self.amp * np.sin(self.kx * x + self.ky * y + self.phase)).sum(axis=-1)
        return 0.5 + 0.5 * v / self.norm  # in (0, 1)

    def render(self, width, height, dx=0.0, dy=0.0, gain=0.8, offset=0.1):
        """Band whose pixel (x, y) shows scene point (x - dx, y - dy)."""
        # sin(a + b) = sin a cos b + cos a sin b keeps this separable
        xs = np.arange(width, dtype=np.float64) - dx
        ys = np.arange(height, dtype=np.float64) - dy
        a = self.kx[:, None] * xs[None, :]
        b = self.ky[:, None] * ys[None, :] + self.phase[:, None]
        wa = self.amp[:, None]
        v = (wa * np.cos(b)).T @ np.sin(a) + (wa * np.sin(b)).T @ np.cos(a)
        return offset + gain * (0.5 + 0.5 * v / self.norm)


@pytest.fixture
def scene():
    return Scene(7)


def band_image(plane, meta):
    return MultispectralImage([meta], np.clip(plane, 0, 1).astype(np.float32))


def capture_from_scene(scene, width, height, shifts, gains=(0.8, 0.7, 0.6, 0.85, 0.9),
                       offsets=(0.05, 0.1, 0.15, 0.05, 0.08)):
    """Five bands with per-band shifts plus the ground-truth (unshifted) planes."""
    bands, truth = [], []
    for meta, (dx, dy), g, o in zip(DEFAULT_BANDS, shifts, gains, offsets):
        bands.append(band_image(scene.render(width, height, dx, dy, g, o), meta))
        truth.append(np.clip(scene.render(width, height, 0, 0, g, o), 0, 1).astype(np.float32))
    return bands, np.stack(truth)


def project(m, pts):
    q = np.c_[pts, np.ones(len(pts))] @ np.asarray(m).T
    return q[:, :2] / q[:, 2:]


def random_projective(rng):
    a = np.eye(3)
    a[:2, :2] += rng.normal(0, 0.02, (2, 2))
    a[:2, 2] = rng.uniform(-15, 15, 2)
    a[2, :2] = rng.normal(0, 2e-5, 2)
    return a


def make_pairs(src, dst):
    """Correspondences for a homography taking target points ``src`` to reference ``dst``."""
    return [Correspondence(tuple(d), tuple(s), 1.0) for s, d in zip(src, dst)]


def synthetic_scene(seed, n=100, outlier_frac=0.3, noise=0.1):
    """Known warp, noisy inlier matches and uniformly scattered outliers."""
    rng = np.random.default_rng(seed)
    h = random_projective(rng)
    tgt = rng.uniform([0, 0], [1600, 1300], (n, 2))
    ref_true = project(h, tgt)
    ref = ref_true + rng.normal(0, noise, ref_true.shape)
    outliers = rng.choice(n, int(round(outlier_frac * n)), replace=False)
    ref[outliers] = rng.uniform([0, 0], [1600, 1300], (len(outliers), 2))
    inlier = np.ones(n, bool)
    inlier[outliers] = False
    return h, tgt, ref, ref_true, inlier
