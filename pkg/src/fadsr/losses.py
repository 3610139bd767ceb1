"""Training objectives: L1 reconstruction, DCT guidance, FLOPs sparsity and their sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .dct import FrequencyMask
from .tensor import Tensor


@dataclass
class LossConfig:
    alpha: float = 0.4
    beta0: float = 1e-4
    anneal_fraction: float = 0.7
    tau: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.beta0 < 0:
            raise ValueError("beta0 must be nonnegative")
        if not 0.0 < self.anneal_fraction <= 1.0:
            raise ValueError("anneal_fraction must lie in (0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def l1_loss(sr: Tensor, hr: Tensor) -> Tensor:
    if sr.shape != hr.shape:
        raise ValueError(f"l1_loss shape mismatch: {sr.shape} vs {hr.shape}")
    return T.mean_all(T.absolute(T.sub(sr, hr)))


def _labels(label) -> np.ndarray:
    labels = label.labels if isinstance(label, FrequencyMask) else np.asarray(label)
    return labels[None] if labels.ndim == 2 else labels


def dct_guidance_loss(distributions: Sequence[Tensor], dct_label) -> Tensor:
    """Sum over blocks of the mean per-position cross-entropy against the DCT labels."""
    labels = _labels(dct_label)
    total = None
    for g in distributions:
        if isinstance(dct_label, FrequencyMask) and dct_label.num_branches != g.shape[1]:
            raise ValueError("DCT label branch count differs from the distribution")
        ce = T.mean_all(T.scale(T.log(T.take_labels(g, labels)), -1.0))
        total = ce if total is None else T.add(total, ce)
    if total is None:
        return Tensor(np.zeros((), dtype=np.float32))
    return total


def flops_ratio(routings: Sequence, specs: Sequence) -> Tensor:
    """sum_b C_b / (B * n * c_K) for routing tensors (N, K, H, W) or hard masks."""
    costs = np.array([s.per_pixel_cost for s in specs], dtype=np.float64)
    total = None
    n = None
    for r in routings:
        if isinstance(r, FrequencyMask):
            r = Tensor(FrequencyMask(_labels(r), len(specs)).one_hot(np.float64))
        if r.shape[1] != len(costs):
            raise ValueError("routing branch count differs from branch specs")
        n = r.data[:, 0].size
        c = T.channel_dot(r, costs)
        total = c if total is None else T.add(total, c)
    return T.scale(total, 1.0 / (len(routings) * n * costs[-1]))


def sparsity_loss(routings: Sequence, specs: Sequence, alpha: float) -> Tensor:
    ratio = flops_ratio(routings, specs)
    return T.square(T.sub(ratio, Tensor(np.asarray(alpha, dtype=ratio.dtype))))


def beta_schedule(iteration: int, total_iters: int, cfg: LossConfig) -> float:
    """Linear decay from beta0 to zero at ``anneal_fraction * total_iters``."""
    if not 0 <= iteration <= total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    return cfg.beta0 * max(0.0, 1.0 - iteration / (cfg.anneal_fraction * total_iters))


def total_loss(sr: Tensor, hr: Tensor, distributions: Sequence[Tensor], routings: Sequence,
               dct_label, specs: Sequence, alpha: float, beta: float) -> tuple:
    """L = L_spa + beta * L_dct + L_sr; returns (loss tensor, float components)."""
    l_sr = l1_loss(sr, hr)
    l_spa = sparsity_loss(routings, specs, alpha)
    if distributions and dct_label is not None:
        l_dct = dct_guidance_loss(distributions, dct_label)
    else:
        l_dct = Tensor(np.zeros((), dtype=np.float32))
    loss = T.add(T.add(l_spa, T.scale(l_dct, beta)), l_sr)
    parts = {
        "L_sr": float(l_sr.data),
        "L_dct": float(l_dct.data),
        "L_spa": float(l_spa.data),
        "loss": float(loss.data),
    }
    return loss, parts
