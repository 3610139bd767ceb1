"""Desk-scale training: ADAM with separate predictor/body learning rates, step decay, beta annealing."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import Dataset, rgb_to_y, sample_patches
from .dct import batch_dct_masks
from .losses import LossConfig, beta_schedule, total_loss
from .model import FadnModel, forward, save_checkpoint
from .tensor import Tensor

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    total_iters: int = 20000
    batch_size: int = 8
    patch_size: int = 32
    lr_body: float = 1e-4
    lr_predictor: float = 1e-2
    lr_halving_interval: Optional[int] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    log_interval: int = 100
    checkpoint_interval: Optional[int] = None
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.lr_halving_interval is None:
            self.lr_halving_interval = max(1, self.total_iters // 4)
        if self.total_iters <= 0:
            raise ValueError("total_iters must be positive")
        for name in ("lr_body", "lr_predictor", "batch_size", "patch_size", "lr_halving_interval", "log_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: list, grads: dict, state: AdamState, lr, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected ADAM update in place.

    ``params`` is a list of (name, Tensor); ``lr`` is a float or a dict keyed by name.
    """
    for name, p in params:
        g = grads[p]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params:
        g = grads[p]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step_lr = lr[name] if isinstance(lr, dict) else lr
        p.data -= (step_lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


def lr_schedule(iteration: int, cfg: TrainConfig, group: str = "body") -> float:
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    base = {"body": cfg.lr_body, "predictor": cfg.lr_predictor}[group]
    return base * 0.5 ** (iteration // cfg.lr_halving_interval)


def param_groups(model: FadnModel) -> dict:
    """Name -> group; predictor 1x1 convs train at the high rate."""
    return {name: "predictor" if name.startswith("predictors.") else "body"
            for name, _ in model.named_parameters()}


@dataclass
class TrainResult:
    model: FadnModel
    log: list
    checkpoints: list
    seconds: float


def make_batch(pairs: list, cfg: TrainConfig, scale: int, rng: np.random.Generator) -> tuple:
    lrs, hrs = [], []
    for _ in range(cfg.batch_size):
        hr, lr = pairs[int(rng.integers(len(pairs)))]
        a, b = sample_patches(hr, scale, cfg.patch_size, rng, cfg.augment, lr=lr)
        lrs.append(a)
        hrs.append(b)
    return np.stack(lrs), np.stack(hrs)


def train_loop(model: FadnModel, dataset: Dataset, cfg: TrainConfig, out_dir=None,
               log_path=None, on_log: Optional[Callable] = None) -> TrainResult:
    """Optimize ``model`` in place; fully deterministic for a fixed ``cfg.seed``."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    ncfg = model.config
    pairs = [dataset.pair(i) for i in range(len(dataset))]
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    data_rng, noise_rng, mask_rng = (np.random.default_rng(s) for s in seeds)
    named = model.named_parameters()
    groups = param_groups(model)
    params = [t for _, t in named]
    state = AdamState()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "w") if log_path is not None else None
    guided = ncfg.mask_mode == "learned"
    needs_dct = ncfg.mask_mode in ("learned", "dct_fixed")
    log, checkpoints = [], []
    start = time.perf_counter()
    try:
        for it in range(cfg.total_iters):
            lr_b, hr_b = make_batch(pairs, cfg, ncfg.scale, data_rng)
            dct_labels = None
            if needs_dct:
                luma = rgb_to_y(lr_b, channel_axis=1)
                dct_labels = batch_dct_masks(luma, ncfg.dct_config).labels
            beta = beta_schedule(it, cfg.total_iters, cfg.loss) if guided else 0.0
            rng = noise_rng if ncfg.mask_mode in ("learned", "learned_no_guidance") else mask_rng
            with T.Tape() as tape:
                res = forward(model, lr_b, "train", rng, tau=cfg.loss.tau, dct_labels=dct_labels)
                dists = [d.relaxed for d in res.distributions]
                loss, parts = total_loss(res.sr, Tensor(hr_b), dists, res.routings,
                                         dct_labels if guided else None, model.specs,
                                         cfg.loss.alpha, beta)
            if not np.isfinite(parts["loss"]):
                if out_dir is not None:
                    save_checkpoint(model, out_dir / "abort.fadn")
                raise NonFiniteLossError(f"non-finite loss at iteration {it + 1}: {parts}")
            grads = T.backward(tape, loss, params)
            lrs = {name: lr_schedule(it, cfg, groups[name]) for name, _ in named}
            adam_step(named, grads, state, lrs, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

            step = it + 1
            if step % cfg.log_interval == 0:
                counts = sum(m.counts() for m in res.masks)
                costs = np.array([s.per_pixel_cost for s in model.specs], dtype=np.float64)
                ratio = float(counts @ costs / (counts.sum() * costs[-1]))
                entry = {"iter": step, "L_sr": parts["L_sr"], "L_dct": parts["L_dct"],
                         "L_spa": parts["L_spa"], "beta": beta, "flops_ratio": ratio,
                         "loss": parts["loss"]}
                log.append(entry)
                if log_file is not None:
                    log_file.write(json.dumps(entry) + "\n")
                    log_file.flush()
                if on_log is not None:
                    on_log(entry)
            if out_dir is not None and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                path = out_dir / f"iter_{step:07d}.fadn"
                save_checkpoint(model, path)
                checkpoints.append(path)
        if out_dir is not None:
            path = out_dir / "final.fadn"
            save_checkpoint(model, path, {"train": cfg.to_dict()})
            checkpoints.append(path)
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model, log, checkpoints, time.perf_counter() - start)
