"""Command-line entry point: ``ctxmim {pretrain,reconstruct,probe,coverage}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid arguments or config.
Every command validates its inputs before touching the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone import forward_reconstructive
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DatasetConfig, ProbeConfig, load_run_config
from .datasets import load_image_folder, load_png, synth_generate
from .errors import ConfigError, CtxMIMError, RangeError
from .evalsuite import (
    CoverageQuery,
    coverage_closed_form,
    coverage_monte_carlo,
    dump_json,
    linear_probe,
    recon_metrics,
)
from .patchgrid import generate_grid_mask, masked_count_for, patchify, unpatchify
from .trainer import pretrain, write_metrics_jsonl

log = logging.getLogger("ctxmim")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_dataset(cfg: DatasetConfig, size, channels, count: int | None = None, seed=None):
    if cfg.kind == "folder":
        return list(load_image_folder(cfg.path, size, channels))
    return list(synth_generate(cfg.synth, cfg.seed if seed is None else seed,
                               cfg.count if count is None else count))


def cmd_pretrain(config_path: str, out_dir: str) -> int:
    try:
        run_cfg = load_run_config(config_path)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    out = Path(out_dir)
    dataset = _load_dataset(run_cfg.dataset, run_cfg.backbone.image_size, run_cfg.backbone.channels)
    result = pretrain(run_cfg.train, run_cfg.optimizer, run_cfg.backbone, dataset)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run_cfg.to_dict(), indent=2) + "\n")
    write_metrics_jsonl(result.log, out / "metrics.jsonl")
    save_checkpoint(result.params, result.opt_state, run_cfg, out / "checkpoint.ckpt")
    if result.log:
        log.info("final step %s", json.dumps(result.log[-1]))
    return EXIT_OK


def _to_uint8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) floats in [0, 1] -> (H, W) or (H, W, 3) uint8."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


def reconstruct_panels(params, config, image: np.ndarray, ratio: float, seed: int,
                       mask_unit: int = 1):
    """Return (masked, reconstruction, truth, metrics) for one image and ratio.

    The masked panel zeroes hidden patches; the reconstruction keeps visible
    patches from the input and fills hidden ones with the model's prediction.
    ``metrics`` is None when the mask is empty.
    """
    x = torch.as_tensor(image, dtype=torch.float64)
    seq = patchify(x, config.patch_size)
    mask = generate_grid_mask(seq.grid, ratio, seed, mask_unit)
    m = torch.from_numpy(mask.indicator)[:, None]
    with torch.no_grad():
        pred = forward_reconstructive(x, mask, config, params).predicted
    masked = seq.values.masked_fill(m, 0.0)
    filled = torch.where(m, pred.values.clamp(0.0, 1.0), seq.values)
    to_img = lambda v: unpatchify(type(seq)(seq.grid, v)).numpy()  # noqa: E731
    metrics = recon_metrics(pred, seq, mask) if mask.masked_count else None
    return to_img(masked), to_img(filled), image, metrics


def _parse_ratios(text: str) -> list[float]:
    try:
        ratios = [float(r) for r in text.split(",") if r.strip()]
    except ValueError:
        raise UsageError(f"bad ratio list {text!r}") from None
    if not ratios:
        raise UsageError("no ratios given")
    for r in ratios:
        try:
            masked_count_for(1, r)
        except RangeError as exc:
            raise UsageError(str(exc)) from None
    return ratios


def cmd_reconstruct(ckpt: str, image_path: str, ratios: str, seed: int, out_dir: str) -> int:
    ratio_list = _parse_ratios(ratios)
    params, _, run_cfg = load_checkpoint(ckpt)
    cfg = params.config
    image = load_png(image_path, cfg.image_size, cfg.channels)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for ratio in ratio_list:
        masked, filled, truth, metrics = reconstruct_panels(
            params, cfg, image, ratio, seed, run_cfg.train.mask_unit)
        strip = np.concatenate([masked, filled, truth], axis=-1)
        tag = f"{ratio:.2f}"
        Image.fromarray(_to_uint8(strip)).save(out / f"recon_{tag}.png")
        record = {"ratio": ratio, "masked_count": masked_count_for(cfg.n_patches, ratio)}
        if metrics is None:
            record.update({"masked_l1": None, "masked_psnr_db": None})
        else:
            record.update(metrics)
        dump_json(record, out / f"recon_{tag}.json")
        results.append(record)
    print(json.dumps(results))
    return EXIT_OK


def cmd_probe(ckpt: str, data: str, out_dir: str, config_path: str | None = None,
              count: int | None = None, seed: int | None = None) -> int:
    probe_cfg = ProbeConfig()
    dataset_cfg = None
    if config_path is not None:
        try:
            override = load_run_config(config_path)
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
        probe_cfg, dataset_cfg = override.probe, override.dataset
    if seed is not None:
        probe_cfg = ProbeConfig(**{**probe_cfg.__dict__, "seed": seed})
    params, _, run_cfg = load_checkpoint(ckpt)
    cfg = params.config
    if data == "synth":
        ds_cfg = dataset_cfg or run_cfg.dataset
        if ds_cfg.kind != "synth":
            ds_cfg = DatasetConfig()
        # held-out images: a seed disjoint from the pretraining stream
        items = list(synth_generate(ds_cfg.synth, ds_cfg.seed + 1_000_003,
                                    count or min(ds_cfg.count, 1000) or 1000))
    else:
        items = list(load_image_folder(data, cfg.image_size, cfg.channels))
    acc = linear_probe(params, cfg, items, probe_cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = dump_json({"top1": acc, "n_images": len(items), "mode": probe_cfg.mode,
                      "seed": probe_cfg.seed}, out / "probe.json")
    print(text, end="")
    return EXIT_OK


def cmd_coverage(n: int, k: int, m: int | None, ratio: float | None, trials: int,
                 seed: int = 0) -> int:
    if (m is None) == (ratio is None):
        raise UsageError("give exactly one of --m or --ratio")
    try:
        if ratio is not None:
            m = masked_count_for(n, ratio)
        q = CoverageQuery(n, k, m)
        if trials < 1:
            raise RangeError("trials must be >= 1")
    except RangeError as exc:
        raise UsageError(str(exc)) from None
    result = {
        "n": n, "k": k, "m": m,
        "closed_form": coverage_closed_form(q),
        "monte_carlo": coverage_monte_carlo(q, trials, seed),
        "trials": trials,
    }
    print(json.dumps(result))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctxmim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="pretrain an encoder from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("reconstruct", help="write masked/reconstructed/truth triptychs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--ratios", default="0.70,0.75,0.80,0.85")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("probe", help="linear-probe a checkpoint's frozen encoder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="PNG class-folder tree, or 'synth'")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run config supplying probe/dataset sections")
    p.add_argument("--count", type=int, help="number of synthetic probe images")
    p.add_argument("--seed", type=int, help="probe seed override")

    p = sub.add_parser("coverage", help="probability that an object is fully masked")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--m", type=int)
    g.add_argument("--ratio", type=float)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ctxmim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "pretrain":
            return cmd_pretrain(args.config, args.out)
        if args.command == "reconstruct":
            return cmd_reconstruct(args.ckpt, args.image, args.ratios, args.seed, args.out)
        if args.command == "probe":
            return cmd_probe(args.ckpt, args.data, args.out, args.config, args.count, args.seed)
        return cmd_coverage(args.n, args.k, args.m, args.ratio, args.trials, args.seed)
    except UsageError as exc:
        print(f"ctxmim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CtxMIMError, OSError) as exc:
        print(f"ctxmim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
