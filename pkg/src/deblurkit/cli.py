"""Command-line entry point wiring all modules together.

Subcommands: synth, train-stage1, train-stage2, deblur, reblur, eval,
interpolate, swap, decouple. Exit codes: 0 success, 2 usage/config error,
3 training divergence, 4 I/O error. All artifacts land under --out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np
import torch
import yaml

from . import analysis, blursynth, training
from .exceptions import CheckpointError, DimensionError, ImageIOError, TrainingDiverged
from .imaging import Image, load_image, psnr, save_image, ssim
from .losses import default_feature_extractor

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


class UsageError(Exception):
    pass


def _emit(record: dict):
    print(json.dumps(record))


def _write_json(path, payload, lines=False):
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w") as f:
        if lines:
            for row in payload:
                f.write(json.dumps(row) + "\n")
        else:
            json.dump(payload, f, indent=2)
    os.replace(tmp, path)


def _load_yaml(path) -> dict:
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except OSError as exc:
        raise ImageIOError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return data


def _dataset_config(doc: dict) -> blursynth.DatasetConfig:
    section = doc.get("dataset", doc)
    try:
        return blursynth.DatasetConfig(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid dataset config: {exc}") from exc


def _train_config(doc: dict, stage: int) -> training.TrainConfig:
    try:
        cfg = training.TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc
    if cfg.stage != stage:
        cfg = replace(cfg, stage=stage)
    return cfg


def _png_inputs(path) -> list:
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, n) for n in os.listdir(path)
            if n.lower().endswith(".png")
        )
        if not files:
            raise UsageError(f"no PNG files under {path}")
        return files
    return [path]


def _pad_to_multiple(arr: np.ndarray, multiple: int = 16):
    """Reflective-pad (3, H, W) up to the next multiple; returns crop info."""
    h, w = arr.shape[1:]
    if h < 16 or w < 16:
        raise DimensionError(f"image {h}x{w} too small for the 5-scale model")
    target_h = max(32, -(-h // multiple) * multiple)
    target_w = max(32, -(-w // multiple) * multiple)
    padded = np.pad(arr, ((0, 0), (0, target_h - h), (0, target_w - w)),
                    mode="reflect")
    return padded, (h, w)


def cmd_synth(args) -> int:
    cfg = _dataset_config(_load_yaml(args.config))
    pairs = blursynth.make_dataset(cfg)
    blursynth.save_dataset(pairs, cfg, args.out)
    mean_psnr = float(np.mean([psnr(p.blurry, p.sharp) for p in pairs]))
    _emit({"pairs": len(pairs), "mean_input_psnr": mean_psnr, "out": args.out})
    return EXIT_OK


def _run_training(args, stage: int) -> int:
    cfg = _train_config(_load_yaml(args.config), stage)
    if args.ablation:
        cfg = training.apply_ablation(cfg, args.ablation)
    train_pairs = blursynth.load_dataset(args.data)
    val_pairs = blursynth.load_dataset(args.val_data) if args.val_data else None
    resume_state = training.load_checkpoint(args.resume) if args.resume else None
    os.makedirs(args.out, exist_ok=True)

    def log(entry):
        _emit({"eval": entry})

    if stage == 1:
        result = training.train_stage1(cfg, train_pairs, val_pairs,
                                       out_dir=args.out,
                                       resume_state=resume_state, log_fn=log)
    else:
        encoder = None
        if args.encoder:
            encoder = training.encoder_from_state(
                training.load_checkpoint(args.encoder))
        elif cfg.model.uses_degradation():
            raise UsageError("train-stage2 requires --encoder "
                             "(a stage-1 checkpoint) unless the ablation "
                             "removes degradation injection")
        result = training.train_stage2(cfg, train_pairs, encoder, val_pairs,
                                       out_dir=args.out,
                                       resume_state=resume_state, log_fn=log)
    final = os.path.join(args.out, "checkpoint.pt")
    training.save_checkpoint(result.state, final)
    _emit({"done": True, "iterations": cfg.total_iters, "checkpoint": final,
           "config_hash": cfg.config_hash()})
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    return _run_training(args, 1)


def cmd_train_stage2(args) -> int:
    return _run_training(args, 2)


def _restore(args):
    state = training.load_checkpoint(args.ckpt)
    return training.models_from_state(state)


@torch.no_grad()
def cmd_deblur(args) -> int:
    models = _restore(args)
    use_deg = models.deblur_gen.config.uses_degradation()
    os.makedirs(args.out, exist_ok=True)
    for path in _png_inputs(args.input):
        img = load_image(path)
        padded, (h, w) = _pad_to_multiple(img.data)
        y = torch.from_numpy(padded).float().unsqueeze(0)
        deg = models.encoder(y)[1] if use_deg else None
        out = models.deblur_gen(y, deg)[-1][0, :, :h, :w].clamp(0.0, 1.0)
        dest = os.path.join(args.out, os.path.basename(path))
        save_image(Image.from_tensor(out), dest)
        _emit({"input": path, "output": dest})
    return EXIT_OK


@torch.no_grad()
def cmd_reblur(args) -> int:
    models = _restore(args)
    if models.reblur_gen is None:
        raise UsageError("checkpoint has no reblurring generator "
                         "(use a stage-1 checkpoint)")
    os.makedirs(args.out, exist_ok=True)
    deg_src = load_image(args.degradation_source)
    padded_src, _ = _pad_to_multiple(deg_src.data)
    src = torch.from_numpy(padded_src).float().unsqueeze(0)
    for path in _png_inputs(args.input):
        img = load_image(path)
        padded, (h, w) = _pad_to_multiple(img.data)
        if padded.shape != padded_src.shape:
            raise DimensionError(
                "degradation source must match the input size")
        x = torch.from_numpy(padded).float().unsqueeze(0)
        deg = models.encoder(src)[1]
        out = models.reblur_gen(x, deg)[-1][0, :, :h, :w].clamp(0.0, 1.0)
        dest = os.path.join(args.out, os.path.basename(path))
        save_image(Image.from_tensor(out), dest)
        _emit({"input": path, "output": dest,
               "degradation_source": args.degradation_source})
    return EXIT_OK


@torch.no_grad()
def cmd_eval(args) -> int:
    models = _restore(args)
    pairs = blursynth.load_dataset(args.data)
    if not pairs:
        raise UsageError(f"no pairs under {args.data}")
    report = training.evaluate_deblur(models, pairs)
    use_deg = models.deblur_gen.config.uses_degradation()

    def subset_psnr(subset):
        vals = []
        for p in subset:
            y = p.blurry.tensor().unsqueeze(0)
            deg = models.encoder(y)[1] if use_deg else None
            out = models.deblur_gen(y, deg)[-1][0].clamp(0.0, 1.0)
            vals.append(psnr(p.sharp, Image.from_tensor(out)))
        return float(np.mean(vals))

    blurriest, sharpest = analysis.percentile_split(pairs, args.fraction)
    record = {
        "psnr": report.psnr_db,
        "ssim": report.ssim,
        "blurriest_psnr": subset_psnr(blurriest),
        "sharpest_psnr": subset_psnr(sharpest),
        "n": len(pairs),
        "fraction": args.fraction,
    }
    _emit(record)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "eval.json"), record)
    return EXIT_OK


def _require_reblur(models):
    if models.reblur_gen is None:
        raise UsageError("this analysis needs a stage-1 checkpoint "
                         "containing the reblurring generator")


@torch.no_grad()
def cmd_interpolate(args) -> int:
    models = _restore(args)
    _require_reblur(models)
    alphas = [float(a) for a in args.alphas.split(",")]
    pairs = blursynth.load_dataset(args.data)
    if not pairs:
        raise UsageError(f"no pairs under {args.data}")
    os.makedirs(args.out, exist_ok=True)
    for p in pairs:
        outs = analysis.interpolate_degradations(
            p.sharp, p.blurry, models.encoder, models.reblur_gen, alphas)
        sheet_path = os.path.join(args.out, f"interp_{p.id}.png")
        analysis.contact_sheet([outs], sheet_path)
        from .imaging import sharpness
        _emit({"pair": p.id, "alphas": alphas,
               "sharpness": [sharpness(o) for o in outs],
               "sheet": sheet_path})
    return EXIT_OK


@torch.no_grad()
def cmd_swap(args) -> int:
    models = _restore(args)
    _require_reblur(models)
    pairs = blursynth.load_dataset(args.data)
    if len(pairs) < 2:
        raise UsageError("swap needs at least two pairs")
    os.makedirs(args.out, exist_ok=True)
    extractor = default_feature_extractor()
    from .imaging import contextual_similarity
    for i in range(0, len(pairs) - 1, 2):
        a, b = pairs[i], pairs[i + 1]
        swapped = analysis.swap_reblur(a.sharp, b.blurry,
                                       models.encoder, models.reblur_gen)
        sheet_path = os.path.join(args.out, f"swap_{a.id}_{b.id}.png")
        analysis.contact_sheet([[a.sharp, b.blurry, swapped]], sheet_path)
        _emit({"a": a.id, "b": b.id,
               "cx_swap_vs_a": contextual_similarity(swapped, a.sharp, extractor),
               "cx_swap_vs_b": contextual_similarity(swapped, b.sharp, extractor),
               "sheet": sheet_path})
    return EXIT_OK


@torch.no_grad()
def cmd_decouple(args) -> int:
    models = _restore(args)
    _require_reblur(models)
    pairs = blursynth.load_dataset(args.data)
    if len(pairs) % 2:
        pairs = pairs[:-1]
    if not pairs:
        raise UsageError("decouple needs at least two pairs")
    report = analysis.decoupleness_report(pairs, models.encoder,
                                          models.reblur_gen)
    _emit(report.as_dict())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "cx_table.jsonl"),
                    report.per_pair + [report.as_dict()], lines=True)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deblurkit",
        description="Synthetic spatially varying deblurring with learned "
                    "degradation representations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a paired synthetic dataset")
    p.add_argument("--config", required=True, help="dataset YAML config")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_synth)

    for name, fn in (("train-stage1", cmd_train_stage1),
                     ("train-stage2", cmd_train_stage2)):
        p = sub.add_parser(name, help=f"run {name.replace('-', ' ')}")
        p.add_argument("--config", required=True, help="training YAML config")
        p.add_argument("--data", required=True, help="training dataset dir")
        p.add_argument("--val-data", default=None, help="held-out dataset dir")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--resume", default=None, help="checkpoint to resume")
        p.add_argument("--ablation", default=None,
                       choices=list(training.ABLATIONS),
                       help="named model variant")
        if name == "train-stage2":
            p.add_argument("--encoder", default=None,
                           help="stage-1 checkpoint providing the frozen encoder")
        p.set_defaults(fn=fn)

    p = sub.add_parser("deblur", help="deblur PNGs with a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_deblur)

    p = sub.add_parser("reblur", help="reblur sharp PNGs under a chosen degradation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="sharp PNG file or directory")
    p.add_argument("--degradation-source", required=True,
                   help="blurry PNG whose degradation is encoded")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_reblur)

    p = sub.add_parser("eval", help="mean PSNR/SSIM plus percentile split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--fraction", type=float, default=0.1)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("interpolate", help="latent interpolation sweeps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    p.set_defaults(fn=cmd_interpolate)

    p = sub.add_parser("swap", help="cross-scene blur transfer sheets")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_swap)

    p = sub.add_parser("decouple", help="content/blur decoupling CX table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_decouple)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ImageIOError, CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
