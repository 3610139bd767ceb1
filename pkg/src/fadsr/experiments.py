"""Desk-scale experiments shared by the CLI and the acceptance suite.

Every training run is cached on disk under a key derived from the network
config, the training config, the dataset contents and the source of the
modules that influence training.  Re-running an ablation with an unchanged
setup only re-reads ``result.json``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, ImageBuffer, rgb_to_y
from .dct import generate_dct_mask
from .evaluate import evaluate
from .model import FadnModel, NetworkConfig, build_model, forward, load_checkpoint
from .train import TrainConfig, train_loop

logger = logging.getLogger(__name__)

MASK_STRATEGIES = ("random_per_block", "random_per_image", "dct_fixed", "learned_no_guidance", "learned")
_TRAINING_SOURCES = ("tensor.py", "dct.py", "block.py", "model.py", "losses.py", "train.py", "data.py")


def code_digest() -> str:
    """sha256 over the modules whose behaviour changes a training result."""
    h = hashlib.sha256()
    here = Path(__file__).parent
    for name in _TRAINING_SOURCES:
        h.update((here / name).read_bytes())
    return h.hexdigest()


def dataset_digest(dataset: Dataset) -> str:
    h = hashlib.sha256(f"scale={dataset.scale}".encode())
    for paths in (dataset.hr_paths, dataset.lr_paths or []):
        for p in paths:
            if p is not None:
                h.update(Path(p).read_bytes())
    return h.hexdigest()


def experiment_key(network: NetworkConfig, train: TrainConfig, train_set: Dataset) -> str:
    doc = {"network": network.to_dict(), "train": train.to_dict(),
           "data": dataset_digest(train_set), "code": code_digest()}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class ExperimentResult:
    name: str
    key: str
    network: dict
    train: dict
    psnr: float
    ssim: float
    flops_ratio: float
    bicubic_psnr: float
    train_flops_ratio: float
    train_seconds: float
    checkpoint: str
    log_path: str
    per_image: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def gain_over_bicubic(self) -> float:
        return self.psnr - self.bicubic_psnr


def _final_train_ratio(log: list) -> float:
    # average the last few logged ratios to damp per-batch noise
    tail = [e["flops_ratio"] for e in log[-5:]]
    return float(np.mean(tail)) if tail else float("nan")


def run_experiment(name: str, network: NetworkConfig, train: TrainConfig, train_set: Dataset,
                   val_set: Dataset, cache_dir, force: bool = False) -> ExperimentResult:
    """Train (or reuse a cached run) and evaluate on ``val_set`` in inference mode."""
    key = experiment_key(network, train, train_set)
    run_dir = Path(cache_dir) / f"{name}-{key[:12]}"
    result_path = run_dir / "result.json"
    if result_path.exists() and not force:
        doc = json.loads(result_path.read_text())
        if doc.get("key") == key:
            logger.info("reusing cached run %s", run_dir)
            return ExperimentResult(**doc)
    run_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(network, seed=train.seed)
    log_path = run_dir / "train_log.jsonl"
    logger.info("training %s for %d iterations into %s", name, train.total_iters, run_dir)
    res = train_loop(model, train_set, train, out_dir=run_dir, log_path=log_path)
    report = evaluate(val_set, model)
    bicubic = evaluate(val_set).mean()
    mean = report.mean()
    result = ExperimentResult(
        name=name, key=key, network=network.to_dict(), train=train.to_dict(),
        psnr=mean.psnr, ssim=mean.ssim, flops_ratio=mean.flops_ratio, bicubic_psnr=bicubic.psnr,
        train_flops_ratio=_final_train_ratio(res.log), train_seconds=res.seconds,
        checkpoint=str(run_dir / "final.fadn"), log_path=str(log_path),
        per_image=[asdict(r) for r in report.rows],
    )
    (run_dir / "eval.csv").write_text(report.to_csv())
    result_path.write_text(json.dumps(result.to_dict(), indent=2))
    return result


def load_result_model(result: ExperimentResult) -> FadnModel:
    model, _ = load_checkpoint(result.checkpoint)
    return model


# ---------------------------------------------------------------------------
# ablations


def mask_strategy_ablation(network: NetworkConfig, train: TrainConfig, train_set: Dataset,
                           val_set: Dataset, cache_dir,
                           strategies: Sequence[str] = MASK_STRATEGIES) -> list:
    return [run_experiment(s, replace(network, mask_mode=s), train, train_set, val_set, cache_dir)
            for s in strategies]


def matched_alpha(alpha: float, reference_k: int, k: int, channels: int) -> float:
    """Target ratio giving K branches the same absolute per-pixel budget as the reference K."""
    from .block import make_branch_specs

    ref = make_branch_specs(channels, reference_k)[-1].per_pixel_cost
    heavy = make_branch_specs(channels, k)[-1].per_pixel_cost
    return min(1.0, alpha * ref / heavy)


def branch_count_ablation(network: NetworkConfig, train: TrainConfig, train_set: Dataset,
                          val_set: Dataset, cache_dir, counts: Sequence[int] = (2, 3, 4)) -> list:
    results = []
    for k in counts:
        alpha = matched_alpha(train.loss.alpha, network.num_branches, k, network.channels)
        net = replace(network, num_branches=k, branch_ratios=None, dct_thresholds=None)
        cfg = replace(train, loss=replace(train.loss, alpha=alpha))
        results.append(run_experiment(f"K{k}", net, cfg, train_set, val_set, cache_dir))
    return results


def predictor_count_ablation(network: NetworkConfig, train: TrainConfig, train_set: Dataset,
                             val_set: Dataset, cache_dir, counts: Optional[Sequence[int]] = None) -> list:
    if counts is None:
        counts = [p for p in range(1, network.num_blocks + 1) if network.num_blocks % p == 0]
    return [run_experiment(f"P{p}", replace(network, predictor_count=p), train, train_set, val_set,
                           cache_dir) for p in counts]


def results_csv(results: Sequence[ExperimentResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "mask_mode", "num_branches", "predictor_count", "alpha", "psnr", "ssim",
                "flops_ratio", "train_flops_ratio", "bicubic_psnr", "train_seconds"])
    for r in results:
        w.writerow([r.name, r.network["mask_mode"], r.network["num_branches"],
                    r.network["predictor_count"], f"{r.train['loss']['alpha']:.4f}", f"{r.psnr:.4f}",
                    f"{r.ssim:.4f}", f"{r.flops_ratio:.4f}", f"{r.train_flops_ratio:.4f}",
                    f"{r.bicubic_psnr:.4f}", f"{r.train_seconds:.1f}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# confusion between DCT labels and learned masks


def confusion_counts(model: FadnModel, dataset: Dataset) -> np.ndarray:
    """(B, K, K) counts; axis 1 is the DCT label of the LR input, axis 2 the learned label."""
    cfg = model.config
    k = cfg.num_branches
    counts = np.zeros((cfg.num_blocks, k, k), dtype=np.int64)
    for i in range(len(dataset)):
        _, lr = dataset.pair(i)
        x = lr.to_chw()[None]
        dct = generate_dct_mask(rgb_to_y(lr.to_float()), cfg.dct_config).labels
        res = forward(model, x, "infer", rng=np.random.default_rng(i))
        for b, m in enumerate(res.masks):
            counts[b] += np.bincount(dct.ravel() * k + m.labels[0].ravel(),
                                     minlength=k * k).reshape(k, k)
    return counts


def row_normalize(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=-1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros(counts.shape, dtype=np.float64), where=totals > 0)


def diagonal_mass(counts: np.ndarray) -> float:
    """Share of positions, pooled over blocks, where the learned label equals the DCT label."""
    pooled = counts.reshape(-1, *counts.shape[-2:]).sum(axis=0)
    total = pooled.sum()
    return float(np.trace(pooled) / total) if total else float("nan")


def confusion_csv(matrix: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = matrix.shape[0]
    w.writerow(["dct_label"] + [f"learned_{j}" for j in range(k)])
    for i in range(k):
        w.writerow([i] + [f"{v:.4f}" for v in matrix[i]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# dense vs sparse dispatch timing


def synthetic_masks(cfg: NetworkConfig, h: int, w: int, cheap_fraction: float,
                    rng: np.random.Generator) -> list:
    """Per-block masks with the requested share of cheapest-branch positions, the rest uniform."""
    k = cfg.num_branches
    masks = []
    for _ in range(cfg.num_blocks):
        labels = rng.integers(1, k, size=(1, h, w))
        labels[rng.random((1, h, w)) < cheap_fraction] = 0
        masks.append(labels)
    return masks


def _time_once(model: FadnModel, x: np.ndarray, path: str, masks: Optional[list]) -> float:
    start = time.perf_counter()
    forward(model, x, "infer", rng=np.random.default_rng(0), path=path, masks=masks)
    return time.perf_counter() - start


def benchmark(model: FadnModel, lr: ImageBuffer, repeats: int = 10, masks: Optional[list] = None,
              warmup: int = 1) -> dict:
    """Median wall time of dense and sparse inference on one image.

    With ``masks`` (list of (1, h, w) label arrays, one per block) both paths
    use those masks; otherwise the model's own masks are used.
    """
    if repeats < 1:
        raise ValueError("repeats must be positive")
    x = lr.to_chw()[None]
    for _ in range(warmup):
        _time_once(model, x, "dense", masks)
        _time_once(model, x, "sparse", masks)
    # interleave the two paths so background load hits both alike
    dense, sparse = [], []
    for _ in range(repeats):
        dense.append(_time_once(model, x, "dense", masks))
        sparse.append(_time_once(model, x, "sparse", masks))
    dense_ms = 1e3 * float(np.median(dense))
    sparse_ms = 1e3 * float(np.median(sparse))
    if masks is not None:
        labels = np.stack([m.ravel() for m in masks])
    else:
        res = forward(model, x, "infer", rng=np.random.default_rng(0))
        labels = np.stack([m.labels.ravel() for m in res.masks])
    return {"dense_ms": dense_ms, "sparse_ms": sparse_ms, "ratio": dense_ms / sparse_ms,
            "repeats": repeats, "cheap_fraction": float(np.mean(labels == 0)),
            "height": lr.height, "width": lr.width}


# ---------------------------------------------------------------------------
# desk-scale acceptance setup

DESK_NETWORK = NetworkConfig(scale=2, num_blocks=4, channels=16, num_branches=3, predictor_count=4)


def desk_train_config(alpha: float = 0.4, total_iters: int = 20000, seed: int = 0) -> TrainConfig:
    """Desk schedule; the body rate is raised to 1e-3 so 20k iterations move past bicubic."""
    from .losses import LossConfig

    return TrainConfig(total_iters=total_iters, batch_size=8, patch_size=32, lr_body=1e-3,
                       lr_predictor=1e-2, seed=seed, log_interval=100,
                       loss=LossConfig(alpha=alpha))


DESK_RUNS = {
    "guided_a0.4": ("learned", 0.4),
    "guided_a0.8": ("learned", 0.8),
    "no_guidance": ("learned_no_guidance", 0.4),
    "random_per_image": ("random_per_image", 0.4),
}


def desk_runs(train_set: Dataset, val_set: Dataset, cache_dir, names: Optional[Sequence[str]] = None,
              total_iters: int = 20000) -> dict:
    """Train (or reuse) the desk runs behind the sparsity, guidance and learning checks."""
    out = {}
    for name in names or DESK_RUNS:
        mode, alpha = DESK_RUNS[name]
        out[name] = run_experiment(name, replace(DESK_NETWORK, mask_mode=mode),
                                   desk_train_config(alpha, total_iters), train_set, val_set, cache_dir)
    return out
