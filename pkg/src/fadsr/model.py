"""Full network: head conv, dynamic blocks with shared or per-block predictors, upsampling tail.

Also holds FLOPs accounting and the binary checkpoint format.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .block import (
    MaskDistribution,
    fadb_dense,
    fadb_sparse,
    gumbel_softmax,
    he_uniform,
    init_block,
    make_branch_specs,
    predict_logits,
)
from .data import rgb_to_y
from .dct import DctConfig, FrequencyMask, batch_dct_masks
from .tensor import Tensor

MASK_MODES = ("learned", "learned_no_guidance", "dct_fixed", "random_per_block", "random_per_image", "all_heavy")
LEARNED_MODES = ("learned", "learned_no_guidance")

# DIV2K RGB mean, subtracted at the input and restored at the output (EDSR convention)
RGB_MEAN = np.array([0.4488, 0.4371, 0.4040], dtype=np.float32)

CHECKPOINT_MAGIC = b"FADN"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    scale: int = 2
    num_blocks: int = 4
    channels: int = 16
    num_branches: int = 3
    branch_ratios: Optional[tuple] = None
    predictor_count: Optional[int] = None
    channel_attention: bool = False
    ca_reduction: int = 16
    mask_mode: str = "learned"
    dct_thresholds: Optional[tuple] = None
    dct_magnitude: float = 0.04

    def __post_init__(self):
        if self.predictor_count is None:
            self.predictor_count = self.num_blocks
        if self.branch_ratios is not None:
            self.branch_ratios = tuple(self.branch_ratios)
        if self.dct_thresholds is not None:
            self.dct_thresholds = tuple(self.dct_thresholds)
        self.validate()

    def validate(self) -> None:
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")
        for name in ("num_blocks", "channels", "num_branches"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_branches < 2:
            raise ValueError("need at least two branches")
        if not 1 <= self.predictor_count <= self.num_blocks:
            raise ValueError(f"predictor_count must lie in [1, {self.num_blocks}]")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}; choose from {MASK_MODES}")
        if self.channel_attention and self.channels % self.ca_reduction:
            raise ValueError("channels must be divisible by ca_reduction")
        self.dct_config  # validates thresholds
        make_branch_specs(self.channels, self.num_branches, self.branch_ratios)

    @property
    def dct_config(self) -> DctConfig:
        return DctConfig(self.num_branches, self.dct_thresholds, self.dct_magnitude)

    def predictor_group(self, block: int) -> int:
        size = self.num_blocks // self.predictor_count
        return min(block // size, self.predictor_count - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("branch_ratios", "dct_thresholds"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FadnModel:
    config: NetworkConfig
    specs: list
    head: tuple
    blocks: list
    predictors: list
    tail: list
    final: tuple

    def named_parameters(self) -> list:
        out = [("head.weight", self.head[0]), ("head.bias", self.head[1])]
        for b, block in enumerate(self.blocks):
            for k, layers in enumerate(block.branches):
                for li, (w, bias) in enumerate(layers):
                    out.append((f"blocks.{b}.branch{k}.conv{li}.weight", w))
                    out.append((f"blocks.{b}.branch{k}.conv{li}.bias", bias))
            if block.ca is not None:
                for name, t in zip(("reduce.weight", "reduce.bias", "expand.weight", "expand.bias"), block.ca):
                    out.append((f"blocks.{b}.ca.{name}", t))
        for p, (w, bias) in enumerate(self.predictors):
            out.append((f"predictors.{p}.weight", w))
            out.append((f"predictors.{p}.bias", bias))
        for i, (w, bias) in enumerate(self.tail):
            out.append((f"tail.up{i}.weight", w))
            out.append((f"tail.up{i}.bias", bias))
        out.append(("tail.final.weight", self.final[0]))
        out.append(("tail.final.bias", self.final[1]))
        return out

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def predictor_parameters(self) -> list:
        return [t for pair in self.predictors for t in pair]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()


def _conv_params(rng, c_out, c_in, k, dtype=np.float32) -> tuple:
    return (Tensor(he_uniform(rng, (c_out, c_in, k, k), dtype), requires_grad=True),
            Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))


def upsample_stages(scale: int) -> list:
    return [2, 2] if scale == 4 else [scale]


def build_model(cfg: NetworkConfig, rng=None, seed: int = 0) -> FadnModel:
    """Initialise all weights (He-uniform, zero bias) deterministically."""
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(seed)
    c, k = cfg.channels, cfg.num_branches
    specs = make_branch_specs(c, k, cfg.branch_ratios)
    head = _conv_params(rng, c, 3, 3)
    ca = cfg.ca_reduction if cfg.channel_attention else None
    blocks = [init_block(rng, specs, ca) for _ in range(cfg.num_blocks)]
    predictors = [_conv_params(rng, k, c, 1) for _ in range(cfg.predictor_count)]
    tail = [_conv_params(rng, r * r * c, c, 3) for r in upsample_stages(cfg.scale)]
    final = _conv_params(rng, 3, c, 3)
    return FadnModel(cfg, specs, head, blocks, predictors, tail, final)


def analytic_parameter_count(cfg: NetworkConfig) -> int:
    c, k = cfg.channels, cfg.num_branches
    specs = make_branch_specs(c, k, cfg.branch_ratios)
    per_block = sum(l.kernel ** 2 * l.c_in * l.c_out + l.c_out for s in specs for l in s.layers)
    if cfg.channel_attention:
        r = c // cfg.ca_reduction
        per_block += (c * r + r) + (r * c + c)
    total = (27 * c + c) + cfg.num_blocks * per_block + cfg.predictor_count * (c * k + k)
    total += sum(9 * c * r * r * c + r * r * c for r in upsample_stages(cfg.scale))
    total += 9 * c * 3 + 3
    return total


@dataclass
class ForwardResult:
    sr: Tensor
    masks: list
    distributions: list = field(default_factory=list)
    routings: list = field(default_factory=list)


def _fixed_labels(cfg: NetworkConfig, lr: np.ndarray, rng, dct_labels) -> list:
    n, _, h, w = lr.shape
    b, k = cfg.num_blocks, cfg.num_branches
    if cfg.mask_mode == "all_heavy":
        return [np.full((n, h, w), k - 1, dtype=np.int64)] * b
    if cfg.mask_mode == "dct_fixed":
        if dct_labels is None:
            luma = np.stack([rgb_to_y(img, channel_axis=0) for img in lr])
            dct_labels = batch_dct_masks(luma, cfg.dct_config).labels
        return [np.asarray(dct_labels)] * b
    if rng is None:
        raise RuntimeError(f"mask_mode={cfg.mask_mode} needs an rng")
    if cfg.mask_mode == "random_per_image":
        return [rng.integers(0, k, size=(n, h, w))] * b
    return [rng.integers(0, k, size=(n, h, w)) for _ in range(b)]


def forward(model: FadnModel, lr, mode: str = "infer", rng=None, tau: float = 1.0,
            path: str = "dense", dct_labels=None, masks=None) -> ForwardResult:
    """Run the network on an (N, 3, h, w) batch in [0, 1].

    ``mode`` is ``train`` (Gumbel noise, straight-through routing) or ``infer``.
    ``path='sparse'`` uses gather/scatter dispatch in the blocks (infer only).
    ``masks`` optionally overrides the mask mode with one (N, h, w) label array per block.
    """
    cfg = model.config
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if path not in ("dense", "sparse"):
        raise ValueError(f"unknown path {path!r}")
    if path == "sparse" and mode != "infer":
        raise RuntimeError("sparse path is inference-only")
    x = lr if isinstance(lr, Tensor) else Tensor(np.asarray(lr, dtype=np.float32))
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (N, 3, h, w) input, got {x.shape}")
    learned = cfg.mask_mode in LEARNED_MODES and masks is None
    if masks is not None and len(masks) != cfg.num_blocks:
        raise ValueError(f"expected {cfg.num_blocks} mask arrays, got {len(masks)}")
    if learned and len(model.predictors) != cfg.predictor_count:
        raise RuntimeError("learned mask mode requires predictor weights")

    mean = Tensor(RGB_MEAN.reshape(1, 3, 1, 1).astype(x.dtype))
    feat = T.conv2d(T.sub(x, mean), *model.head)
    body = feat
    if masks is not None:
        fixed = [np.asarray(m) for m in masks]
    else:
        fixed = None if learned else _fixed_labels(cfg, x.data, rng, dct_labels)
    masks, dists, routings = [], [], []
    group_cache: dict[int, MaskDistribution] = {}
    for b, block in enumerate(model.blocks):
        if learned:
            g = cfg.predictor_group(b)
            if g not in group_cache:
                logits = predict_logits(body, *model.predictors[g])
                group_cache[g] = gumbel_softmax(logits, tau, rng, mode)
            dist = group_cache[g]
            mask, routing = dist.mask, dist.routing
            dists.append(dist)
        else:
            mask = FrequencyMask(fixed[b], cfg.num_branches)
            routing = Tensor(mask.one_hot(x.dtype))
        masks.append(mask)
        routings.append(routing)
        if path == "sparse":
            body = Tensor(fadb_sparse(body, mask, block))
        else:
            body = fadb_dense(body, routing, block)
    h = T.add(body, feat)
    for (w, bias), r in zip(model.tail, upsample_stages(cfg.scale)):
        h = T.pixel_shuffle(T.conv2d(h, w, bias), r)
    sr = T.add(T.conv2d(h, *model.final), mean)
    return ForwardResult(sr, masks, dists, routings)


def plain_forward(model: FadnModel, lr) -> Tensor:
    """Non-dynamic residual network built from the heaviest branch of every block."""
    cfg = model.config
    x = Tensor(np.asarray(lr, dtype=np.float32)) if not isinstance(lr, Tensor) else lr
    mean = Tensor(RGB_MEAN.reshape(1, 3, 1, 1).astype(x.dtype))
    feat = T.conv2d(T.sub(x, mean), *model.head)
    body = feat
    for block in model.blocks:
        (w1, b1), (w2, b2) = block.branches[-1]
        f = T.conv2d(T.relu(T.conv2d(body, w1, b1)), w2, b2)
        if block.ca is not None:
            w3, b3, w4, b4 = block.ca
            s = T.sigmoid(T.conv2d(T.relu(T.conv2d(T.global_avg_pool(f), w3, b3)), w4, b4))
            f = T.mul(f, s)
        body = T.add(body, f)
    h = T.add(body, feat)
    for (w, bias), r in zip(model.tail, upsample_stages(cfg.scale)):
        h = T.pixel_shuffle(T.conv2d(h, w, bias), r)
    return T.add(T.conv2d(h, *model.final), mean)


# ---------------------------------------------------------------------------
# FLOPs


def block_flops(mask: FrequencyMask, specs: list) -> float:
    counts = np.bincount(np.asarray(mask.labels).ravel(), minlength=len(specs))
    if len(counts) > len(specs):
        raise ValueError("mask label out of range for branch specs")
    return float(sum(int(n) * s.per_pixel_cost for n, s in zip(counts, specs)))


def static_flops(cfg: NetworkConfig, n: int, images: int = 1) -> float:
    """Head, tail, channel attention and residual adds for ``n`` LR pixels over ``images`` images."""
    c = cfg.channels
    total = 2 * (27 * c + c) * n
    pixels = n
    for r in upsample_stages(cfg.scale):
        total += 2 * (9 * c * r * r * c + r * r * c) * pixels
        pixels *= r * r
    total += 2 * (9 * c * 3 + 3) * pixels
    if cfg.channel_attention:
        red = c // cfg.ca_reduction
        # pooling sums and channel scaling per pixel, two 1x1 convs per image
        per_block = 2 * c * n + images * (2 * (c * red + red) + 2 * (red * c + c))
        total += cfg.num_blocks * per_block
    total += (cfg.num_blocks + 1) * c * n
    return float(total)


def network_flops(masks: list, cfg: NetworkConfig, specs: Optional[list] = None) -> dict:
    specs = specs or make_branch_specs(cfg.channels, cfg.num_branches, cfg.branch_ratios)
    labels = np.asarray(masks[0].labels)
    n = int(labels.size)
    images = labels.shape[0] if labels.ndim == 3 else 1
    dynamic = sum(block_flops(m, specs) for m in masks)
    heavy = specs[-1].per_pixel_cost
    predictors = cfg.predictor_count if cfg.mask_mode in LEARNED_MODES else 0
    k = cfg.num_branches
    return {
        "dynamic_total": dynamic,
        "static_total": static_flops(cfg, n, images),
        "predictor_total": float(predictors * n * (2 * cfg.channels * k + k)),
        "ratio": dynamic / (len(masks) * n * heavy),
    }


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: FadnModel, path, extra: Optional[dict] = None) -> None:
    doc = {"network": model.config.to_dict()}
    if extra:
        doc.update(extra)
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name, t in model.named_parameters():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> tuple:
    """Return (config document, ordered dict name -> float32 array)."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a FADN checkpoint")
    pos = 4
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        doc = json.loads(data[pos:pos + length].decode("utf-8"))
        pos += length
        params = {}
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            params[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return doc, params


def load_checkpoint(path) -> tuple:
    """Rebuild a model from a checkpoint; returns (model, config document)."""
    doc, params = read_checkpoint(path)
    try:
        cfg = NetworkConfig.from_dict(doc["network"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid network config ({exc})") from exc
    model = build_model(cfg, seed=0)
    named = model.named_parameters()
    if [n for n, _ in named] != list(params):
        raise CheckpointError(f"{path}: parameter names do not match the stored config")
    for name, t in named:
        arr = params[name]
        if arr.shape != t.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {arr.shape} vs {t.shape}")
        t.data = arr.copy()
    return model, doc
