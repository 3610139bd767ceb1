"""Per-image PSNR/SSIM/FLOPs evaluation of a model or the bicubic baseline."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, ImageBuffer, bicubic_resize, psnr, ssim
from .dct import FrequencyMask
from .model import FadnModel, forward, network_flops


@dataclass
class EvalRow:
    name: str
    psnr: float = float("nan")
    ssim: float = float("nan")
    flops_ratio: float = float("nan")
    dynamic_flops: float = float("nan")
    total_flops: float = float("nan")
    error: str = ""


@dataclass
class EvalReport:
    rows: list
    scale: int
    masks: dict = field(default_factory=dict, repr=False)

    @property
    def ok_rows(self) -> list:
        return [r for r in self.rows if not r.error]

    def mean(self) -> EvalRow:
        ok = self.ok_rows
        if not ok:
            return EvalRow("mean", error="no image evaluated")
        avg = lambda key: float(np.mean([getattr(r, key) for r in ok]))
        return EvalRow("mean", avg("psnr"), avg("ssim"), avg("flops_ratio"), avg("dynamic_flops"),
                       avg("total_flops"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image", "psnr", "ssim", "flops_ratio", "dynamic_gflops", "total_gflops", "error"])
        for r in self.rows + [self.mean()]:
            writer.writerow([r.name, f"{r.psnr:.4f}", f"{r.ssim:.4f}", f"{r.flops_ratio:.6f}",
                             f"{r.dynamic_flops / 1e9:.6f}", f"{r.total_flops / 1e9:.6f}", r.error])
        return buf.getvalue()

    def pretty(self) -> str:
        lines = [f"{'image':<20} {'PSNR':>8} {'SSIM':>7} {'ratio':>6} {'GFLOPs':>9}"]
        for r in self.rows + [self.mean()]:
            if r.error:
                lines.append(f"{r.name:<20} error: {r.error}")
            else:
                lines.append(f"{r.name:<20} {r.psnr:8.3f} {r.ssim:7.4f} {r.flops_ratio:6.3f} "
                             f"{r.total_flops / 1e9:9.4f}")
        return "\n".join(lines)


def super_resolve(model: FadnModel, lr: ImageBuffer, path: str = "dense", rng=None) -> tuple:
    """Returns (SR ImageBuffer, list of FrequencyMask, forward result)."""
    x = lr.to_chw()[None]
    if rng is None:
        rng = np.random.default_rng(0)
    res = forward(model, x, "infer", rng=rng, path=path)
    sr = ImageBuffer.from_float(res.sr.data[0], channel_axis=0)
    masks = [FrequencyMask(m.labels[0], m.num_branches) for m in res.masks]
    return sr, masks, res


def evaluate(dataset: Dataset, model: Optional[FadnModel] = None, path: str = "dense",
             keep_masks: bool = False, seed: int = 0) -> EvalReport:
    """Evaluate on every image; ``model=None`` gives the bicubic baseline."""
    scale = dataset.scale
    rows, masks = [], {}
    for i in range(len(dataset)):
        name = dataset.name(i)
        try:
            hr, lr = dataset.pair(i)
            if model is None:
                sr = bicubic_resize(lr, hr.width, hr.height)
                row = EvalRow(name)
            else:
                sr, m, _ = super_resolve(model, lr, path, np.random.default_rng(seed + i))
                fl = network_flops(m, model.config, model.specs)
                row = EvalRow(name, flops_ratio=fl["ratio"], dynamic_flops=fl["dynamic_total"],
                              total_flops=fl["dynamic_total"] + fl["static_total"] + fl["predictor_total"])
                if keep_masks:
                    masks[name] = m
            row.psnr = psnr(sr, hr, shave=scale)
            row.ssim = ssim(sr, hr, shave=scale)
        except (ValueError, OSError) as exc:
            row = EvalRow(name, error=str(exc))
        rows.append(row)
    return EvalReport(rows, scale, masks)
