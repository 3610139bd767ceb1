"""Command-line entry point: ``fadsr <command> ...``.

Every command writes ``manifest.json`` (resolved config, seed, paths,
command line and sha256 digests of produced files) into its output
directory.  Exit codes: 0 success, 1 runtime failure, 2 bad config,
manifest, checkpoint or arguments, 3 non-finite training loss.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import experiments as X
from . import plotting
from .data import ImageBuffer, load_png, read_manifest, rgb_to_y, save_png
from .dct import generate_dct_mask
from .evaluate import evaluate, super_resolve
from .losses import LossConfig
from .model import MASK_MODES, CheckpointError, NetworkConfig, build_model, load_checkpoint, network_flops
from .tensor import configure_threads
from .train import NonFiniteLossError, TrainConfig, train_loop

logger = logging.getLogger("fadsr")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NONFINITE = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid configuration, manifest or checkpoint; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config handling


def load_config(path: Optional[str]) -> dict:
    """Read a JSON config with optional sections network, train, loss and dct."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    unknown = set(doc) - {"network", "train", "loss", "dct"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return doc


def resolve_config(doc: dict, args: argparse.Namespace) -> tuple:
    """Merge file values with CLI overrides into (NetworkConfig, TrainConfig)."""
    net = dict(doc.get("network", {}))
    train = dict(doc.get("train", {}))
    loss = dict(train.pop("loss", {}))
    loss.update(doc.get("loss", {}))
    dct = doc.get("dct", {})
    if "band_thresholds" in dct:
        net["dct_thresholds"] = dct["band_thresholds"]
    if "magnitude_threshold" in dct:
        net["dct_magnitude"] = dct["magnitude_threshold"]
    if getattr(args, "scale", None) is not None:
        net["scale"] = args.scale
    if getattr(args, "mask_mode", None) is not None:
        net["mask_mode"] = args.mask_mode
    if getattr(args, "alpha", None) is not None:
        loss["alpha"] = args.alpha
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    if getattr(args, "iters", None) is not None:
        train["total_iters"] = args.iters
    try:
        network = NetworkConfig.from_dict(net)
        train["loss"] = LossConfig(**loss)
        tcfg = TrainConfig.from_dict(train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return network, tcfg


def resolved_doc(network: NetworkConfig, train: Optional[TrainConfig]) -> dict:
    doc = {"network": network.to_dict()}
    if train is not None:
        t = train.to_dict()
        doc["loss"] = t.pop("loss")
        doc["train"] = t
    doc["dct"] = {"band_thresholds": list(network.dct_config.band_thresholds),
                  "magnitude_threshold": network.dct_magnitude}
    return doc


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out_dir: Path, command: str, argv: Sequence[str], config: Optional[dict],
                       seed: Optional[int], inputs: dict) -> Path:
    """Record everything needed to re-run a command next to its outputs."""
    out_dir = Path(out_dir)
    artifacts = {str(p.relative_to(out_dir)): _digest(p)
                 for p in sorted(out_dir.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    doc = {"command": command, "argv": list(argv), "version": __version__, "seed": seed,
           "config": config, "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
           "output_dir": str(out_dir), "artifacts": artifacts}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _load_dataset(path, scale: int, split: str):
    try:
        return read_manifest(path, scale, split)
    except (FileNotFoundError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {path}") from exc
    except CheckpointError as exc:
        raise ConfigError(f"bad checkpoint {path}: {exc}") from exc


def _load_image(path) -> ImageBuffer:
    try:
        return load_png(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"input image not found: {path}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, argv) -> int:
    network, tcfg = resolve_config(load_config(args.config), args)
    if args.log_interval is not None:
        tcfg = replace(tcfg, log_interval=args.log_interval)
    dataset = _load_dataset(args.data, network.scale, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(network, seed=tcfg.seed)
    log_path = out / "train_log.jsonl"

    def echo(entry):
        logger.info("iter %d  L_sr %.5f  L_dct %.4f  L_spa %.6f  ratio %.3f", entry["iter"],
                    entry["L_sr"], entry["L_dct"], entry["L_spa"], entry["flops_ratio"])

    try:
        result = train_loop(model, dataset, tcfg, out_dir=out, log_path=log_path, on_log=echo)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        write_run_manifest(out, "train", argv, resolved_doc(network, tcfg), tcfg.seed,
                           {"config": args.config, "data": args.data})
        return EXIT_NONFINITE
    if result.log:
        plotting.plot_training_log(result.log, out / "train_log.png")
    if args.val:
        report = evaluate(_load_dataset(args.val, network.scale, "val"), model)
        (out / "eval.csv").write_text(report.to_csv())
        print(report.pretty())
    write_run_manifest(out, "train", argv, resolved_doc(network, tcfg), tcfg.seed,
                       {"config": args.config, "data": args.data, "val": args.val})
    print(f"trained {tcfg.total_iters} iterations in {result.seconds:.1f}s; checkpoint {out / 'final.fadn'}")
    return EXIT_OK


def _dump_masks(masks: list, lr: ImageBuffer, cfg: NetworkConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for b, m in enumerate(masks):
        plotting.save_mask_png(m, out / f"block{b}.png")
        plotting.save_mask_grid(m, out / f"block{b}.txt")
    dct = generate_dct_mask(rgb_to_y(lr.to_float()), cfg.dct_config)
    plotting.save_mask_png(dct, out / "dct.png")
    plotting.save_mask_grid(dct, out / "dct.txt")
    plotting.plot_masks(list(masks) + [dct], out / "masks_panel.png",
                        titles=[f"block {b}" for b in range(len(masks))] + ["DCT"])


def cmd_infer(args, argv) -> int:
    model, doc = _load_model(args.checkpoint)
    if args.mask_mode is not None:
        model.config = replace(model.config, mask_mode=args.mask_mode)
    lr = _load_image(args.input)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    sr, masks, _ = super_resolve(model, lr, args.path, rng)
    output = Path(args.output)
    save_png(sr, output)
    out_dir = output.parent
    dump = args.dump_masks
    if dump is not None:
        _dump_masks(masks, lr, model.config, Path(dump))
        out_dir = Path(dump)
    flops = network_flops(masks, model.config, model.specs)
    print(json.dumps({"output": str(output), "size": [sr.width, sr.height],
                      "flops_ratio": flops["ratio"]}))
    write_run_manifest(out_dir, args.command, argv, resolved_doc(model.config, None), args.seed,
                       {"checkpoint": args.checkpoint, "input": args.input, "output": str(output)})
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    scale = args.scale
    model = None
    if args.checkpoint:
        model, _ = _load_model(args.checkpoint)
        if scale is not None and scale != model.config.scale:
            raise ConfigError(f"--scale {scale} differs from checkpoint scale {model.config.scale}")
        scale = model.config.scale
        if args.mask_mode is not None:
            model.config = replace(model.config, mask_mode=args.mask_mode)
    scale = scale or 2
    dataset = _load_dataset(args.data, scale, "val")
    report = evaluate(dataset, model, path=args.path, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(report.to_csv())
    if report.ok_rows:
        plotting.plot_eval(report, out / "eval.png")
    print(report.pretty())
    config = resolved_doc(model.config, None) if model else {"bicubic": True, "scale": scale}
    write_run_manifest(out, "eval", argv, config, args.seed,
                       {"checkpoint": args.checkpoint, "data": args.data})
    return EXIT_OK if report.ok_rows else EXIT_FAIL


def cmd_ablate(args, argv) -> int:
    network, tcfg = resolve_config(load_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = Path(args.cache) if args.cache else out / "runs"
    if args.mode == "confusion":
        if args.checkpoint:
            model, _ = _load_model(args.checkpoint)
        else:
            train_set = _load_dataset(args.data, network.scale, "train")
            val_set = _load_dataset(args.val, network.scale, "val")
            guided = replace(network, mask_mode="learned")
            res = X.run_experiment("learned", guided, tcfg, train_set, val_set, cache)
            model = X.load_result_model(res)
        val_set = _load_dataset(args.val, model.config.scale, "val")
        counts = X.confusion_counts(model, val_set)
        for b, c in enumerate(counts):
            norm = X.row_normalize(c)
            (out / f"confusion_block{b}.csv").write_text(X.confusion_csv(norm))
            plotting.plot_confusion(norm, out / f"confusion_block{b}.png", title=f"block {b}")
        pooled = X.row_normalize(counts.sum(axis=0))
        (out / "confusion_all.csv").write_text(X.confusion_csv(pooled))
        plotting.plot_confusion(pooled, out / "confusion_all.png", title="all blocks")
        mass = X.diagonal_mass(counts)
        (out / "summary.json").write_text(json.dumps({"diagonal_mass": mass}, indent=2))
        print(f"diagonal mass {mass:.3f}")
    else:
        train_set = _load_dataset(args.data, network.scale, "train")
        val_set = _load_dataset(args.val, network.scale, "val")
        runner = {"mask_strategy": X.mask_strategy_ablation, "branch_count": X.branch_count_ablation,
                  "predictor_count": X.predictor_count_ablation}[args.mode]
        results = runner(network, tcfg, train_set, val_set, cache)
        (out / f"{args.mode}.csv").write_text(X.results_csv(results))
        names = [r.name for r in results]
        plotting.plot_bars(names, [r.psnr for r in results], out / f"{args.mode}.png", "PSNR (dB, Y)",
                           title=args.mode.replace("_", " "), reference=results[0].bicubic_psnr,
                           secondary=[r.flops_ratio for r in results], secondary_label="FLOPs ratio")
        print(X.results_csv(results), end="")
    write_run_manifest(out, "ablate", argv, resolved_doc(network, tcfg), tcfg.seed,
                       {"config": args.config, "data": args.data, "val": args.val,
                        "checkpoint": args.checkpoint, "mode": args.mode})
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    if args.checkpoint:
        model, _ = _load_model(args.checkpoint)
    else:
        network, _ = resolve_config(load_config(args.config), args)
        model = build_model(network, seed=args.seed or 0)
    if args.mask_mode is not None:
        model.config = replace(model.config, mask_mode=args.mask_mode)
    lr = _load_image(args.input)
    masks = None
    if args.cheap_fraction is not None:
        rng = np.random.default_rng(args.seed or 0)
        masks = X.synthetic_masks(model.config, lr.height, lr.width, args.cheap_fraction, rng)
    report = X.benchmark(model, lr, repeats=args.repeats, masks=masks)
    if not args.compare_dense:
        report = {k: v for k, v in report.items() if k not in ("dense_ms", "ratio")}
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(text + "\n")
        write_run_manifest(out, "bench", argv, resolved_doc(model.config, None), args.seed,
                           {"checkpoint": args.checkpoint, "input": args.input})
    return EXIT_OK


def cmd_prepare_corpus(args, argv) -> int:
    from .corpus import export_corpus

    out = Path(args.out)
    manifests = export_corpus(out)
    for split, path in manifests.items():
        print(f"{split}: {path}")
    write_run_manifest(out, "prepare-corpus", argv, None, None, {})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fadsr", description="Frequency-aware dynamic super-resolution")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config with network/train/loss/dct sections")
        p.add_argument("--seed", type=int)
        p.add_argument("--scale", type=int, choices=(2, 3, 4))
        p.add_argument("--mask-mode", choices=MASK_MODES)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--val", help="optional validation manifest evaluated after training")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--log-interval", type=int)
    p.set_defaults(func=cmd_train)

    for name in ("infer", "mask-viz"):
        p = sub.add_parser(name, help="super-resolve one image" if name == "infer"
                           else "super-resolve one image and dump its masks")
        common(p, config=False)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--input", required=True)
        p.add_argument("--output", required=True)
        p.add_argument("--path", choices=("dense", "sparse"), default="dense")
        if name == "infer":
            p.add_argument("--dump-masks", metavar="DIR")
        else:
            p.add_argument("--dump-masks", metavar="DIR", required=True)
        p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM/FLOPs report; bicubic baseline without --checkpoint")
    common(p, config=False)
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--path", choices=("dense", "sparse"), default="dense")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="desk-scale ablation experiments")
    p.add_argument("mode", help="mask_strategy, branch_count, predictor_count or confusion")
    common(p)
    p.add_argument("--data", help="training manifest")
    p.add_argument("--val", required=True, help="validation manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--cache", help="directory for cached training runs (default OUT/runs)")
    p.add_argument("--checkpoint", help="confusion: analyse this model instead of training one")
    p.add_argument("--alpha", type=float)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="dense vs sparse inference timing")
    common(p)
    p.add_argument("--checkpoint", help="model to time (default: freshly initialized from --config)")
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--compare-dense", action="store_true")
    p.add_argument("--cheap-fraction", type=float,
                   help="use synthetic masks with this share of cheapest-branch positions")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("prepare-corpus", help="export the bundled desk-scale image corpus")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_corpus)
    return parser


ABLATION_MODES = ("mask_strategy", "branch_count", "predictor_count", "confusion")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    if args.command == "ablate":
        if args.mode not in ABLATION_MODES:
            print(f"error: unknown ablation mode {args.mode!r}; choose from {ABLATION_MODES}",
                  file=sys.stderr)
            return EXIT_CONFIG
        if args.mode != "confusion" or not args.checkpoint:
            if not args.data:
                print("error: --data is required to train ablation models", file=sys.stderr)
                return EXIT_CONFIG
    try:
        return args.func(args, argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
