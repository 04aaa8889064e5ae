"""Frozen shape codec standing in for a pretrained point-cloud autoencoder.

The encoder is a seeded random point network with max pooling; its raw
pooled features are standardized with fixed statistics taken from a seeded
bank of canonical family shapes, so that codes vary on a unit scale across
shapes instead of sitting on a near-constant offset. The decoder deforms a
seeded unit-sphere grid conditioned on the code. Nothing is ever trained, so
the codes act as fixed regression targets.
"""
from __future__ import annotations

import math

import numpy as np

from .autograd import Tensor
from .scene import OrientedBox


def fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = math.pi * (1 + 5 ** 0.5) * k
    return np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])


def canonicalize(points: np.ndarray, box: OrientedBox) -> np.ndarray:
    """Map world points into the box frame scaled to the unit cube."""
    return box.to_local(points) / np.array(box.extents)


REFERENCE_SAMPLES = 8
REFERENCE_POINTS = 256


class FrozenShapeCodec:
    def __init__(self, code_dim: int = 1024, seed: int = 0, hidden=(64, 128), decode_points: int = 256):
        from .generator import SHAPE_PARTS, sample_surface

        rng = np.random.default_rng(seed)
        dims = [3, *hidden, code_dim]
        self.code_dim = code_dim
        self.encoder = []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = math.sqrt(1.0 / a)
            self.encoder.append((Tensor(rng.uniform(-bound, bound, (b, a))),
                                 Tensor(rng.uniform(-bound, bound, b))))
        h = hidden[-1]
        self.grid = fibonacci_sphere(decode_points)
        self.dec_grid = Tensor(rng.uniform(-1, 1, (h, 3)))
        self.dec_code = Tensor(rng.uniform(-1, 1, (h, code_dim)) / math.sqrt(code_dim))
        self.dec_bias = Tensor(rng.uniform(-0.5, 0.5, h))
        self.dec_out = Tensor(rng.uniform(-1, 1, (3, h)) / math.sqrt(h))
        self.offset = np.zeros(code_dim)
        self.scale = np.ones(code_dim)
        bank = np.stack([self._raw(sample_surface(fam, (1.0, 1.0, 1.0), REFERENCE_POINTS, rng))
                         for fam in SHAPE_PARTS for _ in range(REFERENCE_SAMPLES)])
        sd = bank.std(axis=0)
        self.offset = bank.mean(axis=0)
        # dims that barely move on the bank must not blow up
        self.scale = np.maximum(sd, 0.1 * np.median(sd) + 1e-12)

    def tensors(self) -> list[Tensor]:
        out = [t for layer in self.encoder for t in layer]
        return out + [self.dec_grid, self.dec_code, self.dec_bias, self.dec_out]

    def encode(self, points: np.ndarray) -> np.ndarray:
        """Code for a canonical (unit-cube) point set; order independent."""
        x = np.asarray(points, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != 3 or len(x) == 0:
            raise ValueError("codec_encode needs a non-empty [p, 3] point set")
        return (self._raw(x) - self.offset) / self.scale

    def _raw(self, x: np.ndarray) -> np.ndarray:
        n = len(self.encoder)
        for k, (w, b) in enumerate(self.encoder):
            x = x @ w.data.T + b.data
            if k < n - 1:
                x = np.maximum(x, 0.0)
        return x.max(axis=0)

    def decode(self, code: np.ndarray) -> np.ndarray:
        """Canonical point set spanning exactly [-0.5, 0.5] on every axis."""
        code = np.asarray(code, dtype=np.float64)
        if not np.all(np.isfinite(code)):
            raise ValueError("codec_decode needs a finite code")
        h = np.maximum(self.grid @ self.dec_grid.data.T + code @ self.dec_code.data.T / 4.0 + self.dec_bias.data, 0)
        pts = self.grid + np.tanh(h @ self.dec_out.data.T)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return (pts - lo) / np.maximum(hi - lo, 1e-12) - 0.5


def codec_encode(codec: FrozenShapeCodec, points: np.ndarray) -> np.ndarray:
    return codec.encode(points)


def codec_decode(codec: FrozenShapeCodec, code: np.ndarray) -> np.ndarray:
    return codec.decode(code)
