"""Handcrafted frequency masks from a whole-image orthonormal DCT-II.

The spectrum is cut along anti-diagonals of the normalized frequency index
into ``K`` bands.  Each band is transformed back to the spatial domain and a
position is claimed by the highest band whose reconstruction magnitude
reaches ``magnitude_threshold``; unclaimed positions fall to band 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

DEFAULT_THRESHOLDS = {
    2: (0.2,),
    3: (0.1, 0.35),
    4: (0.08, 0.2, 0.4),
}


def default_thresholds(num_bands: int) -> tuple:
    if num_bands in DEFAULT_THRESHOLDS:
        return DEFAULT_THRESHOLDS[num_bands]
    if num_bands < 2:
        raise ValueError("need at least two bands")
    return tuple(np.linspace(0.05, 0.5, num_bands - 1).round(4))


@dataclass(frozen=True)
class DctConfig:
    num_bands: int = 3
    band_thresholds: tuple = field(default=None)
    magnitude_threshold: float = 0.04

    def __post_init__(self):
        if self.band_thresholds is None:
            object.__setattr__(self, "band_thresholds", default_thresholds(self.num_bands))
        t = tuple(float(v) for v in self.band_thresholds)
        object.__setattr__(self, "band_thresholds", t)
        if self.num_bands != len(t) + 1:
            raise ValueError(f"num_bands={self.num_bands} needs {self.num_bands - 1} thresholds, got {len(t)}")
        if any(not 0.0 < v < 1.0 for v in t):
            raise ValueError(f"band thresholds must lie in (0, 1): {t}")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"band thresholds must be strictly ascending: {t}")
        if self.magnitude_threshold < 0:
            raise ValueError("magnitude_threshold must be nonnegative")


@dataclass
class FrequencyMask:
    """Per-position branch labels; label 0 is the cheapest branch.

    ``labels`` has shape (H, W) or (N, H, W).
    """

    labels: np.ndarray
    num_branches: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_branches):
            raise ValueError(f"labels must lie in [0, {self.num_branches})")

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    def one_hot(self, dtype=np.float32) -> np.ndarray:
        """One-hot view with the branch axis inserted before (H, W)."""
        eye = np.eye(self.num_branches, dtype=dtype)
        oh = eye[self.labels]  # (..., H, W, K)
        return np.moveaxis(oh, -1, -3)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.num_branches)

    def fractions(self) -> np.ndarray:
        return self.counts() / max(self.labels.size, 1)


@lru_cache(maxsize=64)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` with ``X = C @ x``."""
    u = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * i + 1) * u / (2 * n))
    a = np.full((n, 1), np.sqrt(2.0 / n))
    a[0] = np.sqrt(1.0 / n)
    m = a * c
    m.setflags(write=False)
    return m


def dct2(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    ch = dct_matrix(x.shape[0]).astype(x.dtype if x.dtype == np.float32 else np.float64)
    cw = dct_matrix(x.shape[1]).astype(ch.dtype)
    return ch @ x @ cw.T


def idct2(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c)
    ch = dct_matrix(c.shape[0]).astype(c.dtype if c.dtype == np.float32 else np.float64)
    cw = dct_matrix(c.shape[1]).astype(ch.dtype)
    return ch.T @ c @ cw


def frequency_index(h: int, w: int) -> np.ndarray:
    """Normalized anti-diagonal index in [0, 1]; an axis of length 1 contributes 0."""
    fu = np.arange(h) / (h - 1) if h > 1 else np.zeros(1)
    fv = np.arange(w) / (w - 1) if w > 1 else np.zeros(1)
    return (fu[:, None] + fv[None, :]) / 2.0


def band_index(h: int, w: int, cfg: DctConfig) -> np.ndarray:
    """Band number of every coefficient position."""
    rho = frequency_index(h, w)
    return np.searchsorted(np.asarray(cfg.band_thresholds), rho, side="right")


def split_bands(c: np.ndarray, cfg: DctConfig) -> list:
    if not isinstance(cfg, DctConfig):
        raise ValueError("split_bands needs a DctConfig")
    bands = band_index(*c.shape, cfg)
    return [np.where(bands == p, c, 0.0) for p in range(cfg.num_bands)]


def generate_dct_mask(luma: np.ndarray, cfg: Optional[DctConfig] = None) -> FrequencyMask:
    """Label each pixel with the highest band whose reconstruction is significant."""
    cfg = cfg or DctConfig()
    luma = np.asarray(luma, dtype=np.float64)
    parts = split_bands(dct2(luma), cfg)
    labels = np.zeros(luma.shape, dtype=np.int64)
    unassigned = np.ones(luma.shape, dtype=bool)
    for p in range(cfg.num_bands - 1, 0, -1):
        hit = unassigned & (np.abs(idct2(parts[p])) >= cfg.magnitude_threshold)
        labels[hit] = p
        unassigned &= ~hit
    return FrequencyMask(labels, cfg.num_bands)


def batch_dct_masks(luma: np.ndarray, cfg: Optional[DctConfig] = None) -> FrequencyMask:
    """Masks for a stack of luma planes (N, H, W)."""
    cfg = cfg or DctConfig()
    labels = np.stack([generate_dct_mask(y, cfg).labels for y in luma])
    return FrequencyMask(labels, cfg.num_bands)
