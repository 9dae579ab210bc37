import numpy as np
import pytest

from warpgrid.synth import WarpSpec, generate_texture, make_pair


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def affine_pair():
    """A 32x32 pair under a mild rotation, scale and shift."""
    spec = WarpSpec(rotation=0.15, scale=(1.05, 0.95), translation=(0.05, -0.03))
    return make_pair(generate_texture(32, 32, "blobs", seed=5), spec, 0.0, seed=5)


def random_grid(rng, h, w, lo=-0.95, hi=0.95):
    return rng.uniform(lo, hi, size=(2, h, w))


def off_boundary_grid(rng, h, w, src_h=None, src_w=None, margin=1e-2):
    """In-range sample points kept at least ``margin`` px away from integer coordinates."""
    src_h = src_h or h
    src_w = src_w or w
    px = rng.uniform(0, src_w - 1, size=(h, w))
    py = rng.uniform(0, src_h - 1, size=(h, w))
    for p, n in ((px, src_w), (py, src_h)):
        frac = p - np.floor(p)
        p += np.where(frac < margin, margin, 0.0) - np.where(frac > 1 - margin, margin, 0.0)
        np.clip(p, margin, n - 1 - margin, out=p)
    return np.stack([2 * px / (src_w - 1) - 1, 2 * py / (src_h - 1) - 1])
