"""Frequency-aware dynamic block: routed multi-branch residual block.

Each spatial position is sent to exactly one of ``K`` branches.  Branch 0 is
the cheapest, branch ``K-1`` the heaviest (a plain EDSR residual body).  All
branches start with a 3x3 convolution so a single im2col of the block input
feeds every branch.

Two evaluation paths are provided:

* :func:`fadb_dense` computes every branch everywhere and combines them with
  the (possibly straight-through) routing tensor.  It is differentiable and is
  the path used in training.
* :func:`fadb_sparse` gathers only the im2col rows each branch needs, runs the
  branch GEMMs on that subset and scatters results back.  Inference only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .dct import FrequencyMask
from .tensor import Tensor

DEFAULT_RATIOS = {
    2: (0.25, 1.0),
    3: (0.25, 0.5, 1.0),
    4: (0.125, 0.25, 0.5, 1.0),
}


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    c_in: int
    c_out: int
    relu: bool

    @property
    def flops_per_pixel(self) -> int:
        # multiply-add counted as 2 FLOPs, bias add included
        return 2 * (self.kernel * self.kernel * self.c_in * self.c_out + self.c_out)


@dataclass(frozen=True)
class BranchSpec:
    index: int
    layers: tuple

    @property
    def per_pixel_cost(self) -> int:
        return sum(layer.flops_per_pixel for layer in self.layers)

    @property
    def mid_channels(self) -> int:
        return self.layers[0].c_out


def default_ratios(num_branches: int) -> tuple:
    if num_branches in DEFAULT_RATIOS:
        return DEFAULT_RATIOS[num_branches]
    raise ValueError(f"no default branch ratios for K={num_branches}; pass ratios explicitly")


def make_branch_specs(channels: int, num_branches: int = 3, ratios: Optional[Sequence[float]] = None) -> list:
    """Branch architectures ordered cheapest first.

    The heaviest branch (ratio 1) is conv3x3-ReLU-conv3x3; lighter branches are
    conv3x3(C -> C*ratio)-ReLU-conv1x1(C*ratio -> C).
    """
    ratios = tuple(ratios) if ratios is not None else default_ratios(num_branches)
    if len(ratios) != num_branches:
        raise ValueError(f"{num_branches} branches need {num_branches} ratios, got {len(ratios)}")
    if list(ratios) != sorted(ratios) or len(set(ratios)) != len(ratios):
        raise ValueError("branch ratios must be strictly ascending")
    specs = []
    for k, r in enumerate(ratios):
        mid = max(1, int(round(channels * r)))
        if k == num_branches - 1:
            layers = (LayerSpec(3, channels, mid, True), LayerSpec(3, mid, channels, False))
        else:
            layers = (LayerSpec(3, channels, mid, True), LayerSpec(1, mid, channels, False))
        specs.append(BranchSpec(k, layers))
    costs = [s.per_pixel_cost for s in specs]
    if any(b <= a for a, b in zip(costs, costs[1:])):
        raise ValueError(f"branch costs must be strictly ascending, got {costs}")
    return specs


@dataclass
class BlockParams:
    """Weights of one dynamic block: per-branch (weight, bias) pairs and optional CA."""

    specs: list
    branches: list
    ca: Optional[tuple] = None

    def tensors(self) -> list:
        out = [t for layer in self.branches for pair in layer for t in pair]
        if self.ca is not None:
            out.extend(self.ca)
        return out


@dataclass
class MaskDistribution:
    logits: Tensor
    relaxed: Tensor
    tau: float
    mask: FrequencyMask
    routing: Tensor = field(repr=False)


def he_uniform(rng: np.random.Generator, shape: tuple, dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_block(rng: np.random.Generator, specs: list, ca_reduction: Optional[int] = None,
               dtype=np.float32) -> BlockParams:
    branches = []
    for spec in specs:
        layers = []
        for layer in spec.layers:
            w = Tensor(he_uniform(rng, (layer.c_out, layer.c_in, layer.kernel, layer.kernel), dtype),
                       requires_grad=True)
            b = Tensor(np.zeros(layer.c_out, dtype=dtype), requires_grad=True)
            layers.append((w, b))
        branches.append(layers)
    ca = None
    if ca_reduction:
        c = specs[0].layers[0].c_in
        if c % ca_reduction:
            raise ValueError(f"channels {c} not divisible by CA reduction {ca_reduction}")
        r = c // ca_reduction
        ca = (Tensor(he_uniform(rng, (r, c, 1, 1), dtype), requires_grad=True),
              Tensor(np.zeros(r, dtype=dtype), requires_grad=True),
              Tensor(he_uniform(rng, (c, r, 1, 1), dtype), requires_grad=True),
              Tensor(np.zeros(c, dtype=dtype), requires_grad=True))
    return BlockParams(list(specs), branches, ca)


def predict_logits(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if weight.shape[2:] != (1, 1):
        raise ValueError(f"predictor must be a 1x1 convolution, got weight shape {weight.shape}")
    return T.conv2d(x, weight, bias)


def sample_gumbel(rng: np.random.Generator, shape: tuple, dtype=np.float32) -> np.ndarray:
    tiny = np.finfo(np.float64).tiny
    u = rng.random(shape)
    u = np.clip(u, tiny, 1.0 - 1e-16)
    return (-np.log(-np.log(u))).astype(dtype)


def hard_one_hot(scores: np.ndarray) -> np.ndarray:
    """One-hot of the argmax over axis 1; ties go to the lowest index."""
    idx = scores.argmax(axis=1)
    k = scores.shape[1]
    return np.moveaxis(np.eye(k, dtype=scores.dtype)[idx], -1, 1)


def gumbel_softmax(logits: Tensor, tau: float, rng: Optional[np.random.Generator] = None,
                   mode: str = "train") -> MaskDistribution:
    """Relax and discretize the predictor logits.

    In ``train`` mode Gumbel(0, 1) noise is added before the tempered softmax;
    in ``infer`` mode no noise is used.  ``routing`` carries the hard one-hot
    value forward and the relaxed distribution's gradient backward.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode Gumbel sampling needs an rng")
        g = Tensor(sample_gumbel(rng, logits.shape, logits.dtype))
        perturbed = T.add(logits, g)
    elif mode == "infer":
        perturbed = logits
    else:
        raise ValueError(f"unknown mode {mode!r}")
    relaxed = T.softmax(T.scale(perturbed, 1.0 / tau), axis=1)
    hard = hard_one_hot(perturbed.data)
    labels = hard.argmax(axis=1)
    routing = T.straight_through(relaxed, hard)
    return MaskDistribution(logits, relaxed, tau, FrequencyMask(labels, logits.shape[1]), routing)


def _check_layer(layer: LayerSpec, w: Tensor, b: Tensor) -> None:
    expect = (layer.c_out, layer.c_in, layer.kernel, layer.kernel)
    if w.shape != expect or b.shape != (layer.c_out,):
        raise ValueError(f"branch weight shape {w.shape}/{b.shape} does not match layer {expect}")


def branch_forward(x: Tensor, spec: BranchSpec, weights: Sequence) -> Tensor:
    if x.shape[1] != spec.layers[0].c_in:
        raise ValueError(f"branch expects {spec.layers[0].c_in} channels, got {x.shape[1]}")
    h = x
    for layer, (w, b) in zip(spec.layers, weights, strict=True):
        _check_layer(layer, w, b)
        h = T.conv2d(h, w, b)
        if layer.relu:
            h = T.relu(h)
    return h


def channel_attention(f: Tensor, ca: tuple) -> Tensor:
    w1, b1, w2, b2 = ca
    if f.shape[1] != w1.shape[1]:
        raise ValueError("channel attention width does not match features")
    s = T.global_avg_pool(f)
    s = T.relu(T.conv2d(s, w1, b1))
    s = T.sigmoid(T.conv2d(s, w2, b2))
    return T.mul(f, s)


def dilate_mask(m: np.ndarray) -> np.ndarray:
    """3x3 binary dilation with zero boundary over the last two axes."""
    m = np.asarray(m, dtype=bool)
    pad = [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(m, pad)
    h, w = m.shape[-2:]
    out = np.zeros_like(m)
    for i in range(3):
        for j in range(3):
            out |= p[..., i:i + h, j:j + w]
    return out


def _routing_tensor(mask, like: Tensor) -> Tensor:
    if isinstance(mask, FrequencyMask):
        labels = mask.labels
        if labels.ndim == 2:
            labels = labels[None]
        return Tensor(FrequencyMask(labels, mask.num_branches).one_hot(like.dtype))
    return mask


def fadb_dense(x: Tensor, mask, block: BlockParams) -> Tensor:
    """Reference path: y = x + [CA](sum_k M_k * f_k(x))."""
    routing = _routing_tensor(mask, x)
    if routing.shape[2:] != x.shape[2:] or routing.shape[0] != x.shape[0]:
        raise ValueError(f"mask {routing.shape} does not match features {x.shape}")
    if routing.shape[1] != len(block.specs):
        raise ValueError("mask branch count does not match block")
    # shared im2col: one convolution with all first-layer filters stacked
    first_w = T.concat([layers[0][0] for layers in block.branches], axis=0)
    first_b = T.concat([layers[0][1] for layers in block.branches], axis=0)
    for spec, layers in zip(block.specs, block.branches):
        _check_layer(spec.layers[0], *layers[0])
    stacked = T.conv2d(x, first_w, first_b)
    outs = []
    start = 0
    for spec, layers in zip(block.specs, block.branches):
        mid = spec.layers[0].c_out
        h = T.channel_slice(stacked, start, start + mid)
        start += mid
        if spec.layers[0].relu:
            h = T.relu(h)
        for layer, (w, b) in zip(spec.layers[1:], layers[1:]):
            _check_layer(layer, w, b)
            h = T.conv2d(h, w, b)
            if layer.relu:
                h = T.relu(h)
        outs.append(h)
    f = T.masked_sum(routing, outs)
    if block.ca is not None:
        f = channel_attention(f, block.ca)
    return T.add(x, f)


def _local_im2col(feat: np.ndarray, rows: np.ndarray, shape: tuple) -> np.ndarray:
    """Neighborhoods of selected flat positions from a channels-last map.

    ``feat`` is (N*H*W, C); returns (len(rows), 9*C) ordered (kh, kw, c).
    """
    n, h, w = shape
    c = feat.shape[1]
    if len(rows) == n * h * w:
        return T.im2col(feat.reshape(n, h, w, c).transpose(0, 3, 1, 2), 3)
    padded = np.zeros((n, h + 2, w + 2, c), dtype=feat.dtype)
    padded[:, 1:-1, 1:-1] = feat.reshape(n, h, w, c)
    bi, hi, wi = np.unravel_index(rows, (n, h, w))
    # flat index of each tap's top-left corner, then fixed offsets for the 3x3 window
    base = (bi * (h + 2) + hi) * (w + 2) + wi
    offsets = (np.arange(3)[:, None] * (w + 2) + np.arange(3)[None, :]).ravel()
    taps = padded.reshape(-1, c)[base[:, None] + offsets[None, :]]
    return taps.reshape(len(rows), 9 * c)


def _gather(arr: np.ndarray, rows: np.ndarray) -> np.ndarray:
    return arr if len(rows) == len(arr) else arr[rows]


def fadb_sparse(x, mask: FrequencyMask, block: BlockParams, mode: str = "infer",
                stats: Optional[dict] = None) -> np.ndarray:
    """Gather/GEMM/scatter evaluation of the block for a hard mask.

    ``stats`` (if given) receives per-branch gathered row counts under
    ``"gathered_rows"`` and scattered counts under ``"scattered_rows"``.
    """
    if mode != "infer":
        raise RuntimeError("sparse dispatch is inference-only; use fadb_dense for training")
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    n, c, h, w = xd.shape
    labels = mask.labels if mask.labels.ndim == 3 else mask.labels[None]
    if labels.shape != (n, h, w):
        raise ValueError(f"mask {labels.shape} does not match features {xd.shape}")
    cols = T.im2col(xd, 3)
    out = np.zeros((n * h * w, c), dtype=xd.dtype)
    gathered, scattered = [], []
    for k, (spec, layers) in enumerate(zip(block.specs, block.branches)):
        sel = labels == k
        # rows needed at the output of each layer, last layer first
        need = [sel]
        for layer in reversed(spec.layers[1:]):
            need.append(dilate_mask(need[-1]) if layer.kernel == 3 else need[-1])
        need.reverse()
        rows = [np.flatnonzero(m.ravel()) for m in need]
        gathered.append(len(rows[0]))
        scattered.append(len(rows[-1]))
        if len(rows[-1]) == 0:
            continue
        w0, b0 = layers[0]
        hcur = T.gemm(_gather(cols, rows[0]), T.weight_matrix(w0.data)) + b0.data
        if spec.layers[0].relu:
            np.maximum(hcur, 0, out=hcur)
        for li in range(1, len(spec.layers)):
            layer = spec.layers[li]
            wl, bl = layers[li]
            if layer.kernel == 1:
                # need[li] == need[li-1] for pointwise layers
                hin = hcur
            else:
                if len(rows[li - 1]) == n * h * w:
                    full = hcur
                else:
                    full = np.zeros((n * h * w, hcur.shape[1]), dtype=xd.dtype)
                    full[rows[li - 1]] = hcur
                hin = _local_im2col(full, rows[li], (n, h, w))
            hcur = T.gemm(hin, T.weight_matrix(wl.data)) + bl.data
            if layer.relu:
                np.maximum(hcur, 0, out=hcur)
        out[rows[-1]] = hcur
    if stats is not None:
        stats["gathered_rows"] = gathered
        stats["scattered_rows"] = scattered
    f = out.reshape(n, h, w, c).transpose(0, 3, 1, 2)
    if block.ca is not None:
        f = channel_attention(Tensor(np.ascontiguousarray(f)), block.ca).data
    return xd + f
