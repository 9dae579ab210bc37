"""Pluggable feature extractors for the matching loss.

Each extractor maps a (C, H, W) image to a (K, H, W) feature stack at the same
resolution and exposes ``vjp`` so the matching loss can push gradients back to
the warped image.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .autodiff import conv2d_backward, conv2d_forward

__all__ = [
    "FeatureExtractor",
    "IdentityFeatures",
    "RandomConvFeatures",
    "PyramidFeatures",
    "make_extractor",
]


class FeatureExtractor:
    name = "base"

    def __call__(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, image: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Pull a (K, H, W) cotangent on the features back to the (C, H, W) image."""
        raise NotImplementedError


class IdentityFeatures(FeatureExtractor):
    name = "identity"

    def __call__(self, image):
        return np.asarray(image, dtype=np.float64)

    def vjp(self, image, cotangent):
        return np.asarray(cotangent, dtype=np.float64)


class RandomConvFeatures(FeatureExtractor):
    """Fixed bank of seeded 3x3 filters followed by tanh.

    Filters are zero-mean per output channel, so the response to flat regions is
    the bias only and the features key on local structure.
    """

    name = "random_conv"

    def __init__(self, channels: int = 16, seed: int = 0, gain: float = 2.0):
        self.channels = channels
        self.seed = seed
        self.gain = gain
        self._banks: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _bank(self, in_channels: int):
        if in_channels not in self._banks:
            rng = np.random.default_rng([self.seed, in_channels])
            w = rng.standard_normal((self.channels, in_channels, 3, 3))
            w -= w.mean(axis=(1, 2, 3), keepdims=True)
            w *= self.gain / np.sqrt((w ** 2).sum(axis=(1, 2, 3), keepdims=True))
            b = 0.1 * rng.standard_normal(self.channels)
            self._banks[in_channels] = (w, b)
        return self._banks[in_channels]

    def _pre(self, image):
        x = np.asarray(image, dtype=np.float64)
        w, b = self._bank(x.shape[0])
        out, cache = conv2d_forward(x[None], w, b)
        return out[0], cache, w

    def __call__(self, image):
        z, _, _ = self._pre(image)
        return np.tanh(z)

    def vjp(self, image, cotangent):
        z, cache, w = self._pre(image)
        t = np.tanh(z)
        dz = np.asarray(cotangent, dtype=np.float64) * (1 - t * t)
        dx, _, _ = conv2d_backward(dz[None], w, cache)
        return dx[0]


class PyramidFeatures(FeatureExtractor):
    """Image blurred at a ladder of Gaussian scales, stacked along channels."""

    name = "pyramid"

    def __init__(self, sigmas=(0.0, 1.0, 2.0, 4.0)):
        self.sigmas = tuple(float(s) for s in sigmas)

    def _blur(self, x, sigma):
        if sigma == 0:
            return x.copy()
        return ndimage.gaussian_filter(x, sigma=(0, sigma, sigma), mode="constant", truncate=3.0)

    def __call__(self, image):
        x = np.asarray(image, dtype=np.float64)
        return np.concatenate([self._blur(x, s) for s in self.sigmas])

    def vjp(self, image, cotangent):
        c = np.asarray(image).shape[0]
        g = np.asarray(cotangent, dtype=np.float64)
        # a symmetric kernel under zero padding is self-adjoint
        return sum(self._blur(g[i * c:(i + 1) * c], s) for i, s in enumerate(self.sigmas))


def make_extractor(kind: str = "random_conv", seed: int = 0, **kwargs) -> FeatureExtractor:
    if kind == "identity":
        return IdentityFeatures()
    if kind == "random_conv":
        return RandomConvFeatures(seed=seed, **kwargs)
    if kind == "pyramid":
        return PyramidFeatures(**kwargs)
    raise ValueError(f"unknown feature extractor {kind!r}")
