"""Command-line entry point: ``patchbook <command> [options]``.

Every command accepts ``--config``, ``--preset`` (a config preset; ``--config-preset`` for
``ablate``, whose ``--preset`` names the experiment grid), ``--set key=value``, ``--seed`` and
``--out``. On success a RunSummary JSON object is printed on stdout and written to
``<out>/run_summary.json``. On failure a one-line JSON error goes to stderr and the
exit code is 1 (runtime failure) or 2 (usage or configuration error).

Relative ``--data``/``--ckpt``/``--manifest`` paths that do not exist are looked up under
``$PACO_CACHE_DIR``; when ``--out`` is omitted, outputs go to ``$PACO_CACHE_DIR/<command>``
(or ``./runs/<command>``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
import torch

from .checkpoint import CheckpointError
from .codebook import substitute
from .core import PRESETS as CONFIG_PRESETS
from .core import (ConfigError, PatchGrid, RunConfig, ShapeError, dump_config, make_generator, parse_overrides,
                   patchify, sample_mask_batch, unpatchify)
from .data import (CLASS_NAMES, AlignmentError, AlignTemplate, DataError, load_dataset, prepare_dataset, stack_images,
                   generate_synthetic, read_png, write_png, write_synthetic_dataset)
from .evaluate import MetricError, ProbeSettings, run_probe
from .experiments import PRESETS as EXPERIMENT_PRESETS
from .experiments import format_table, run_ablation, setup_from_preset
from .pretrain import SELECTION_MODES, AblationSpec, TrainingDiverged, select_tokens, load_state, run_pretraining

CACHE_ENV = "PACO_CACHE_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        sys.exit(2)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")


# --------------------------------------------------------------------------
# helpers

def _cache_dir() -> Optional[Path]:
    raw = os.environ.get(CACHE_ENV)
    return Path(raw) if raw else None


def _resolve_input(path: Optional[str]) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    cache = _cache_dir()
    if not p.exists() and not p.is_absolute() and cache is not None and (cache / p).exists():
        return cache / p
    return p


def _out_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = (_cache_dir() or Path("runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _explicit_values(args) -> dict:
    """Config values given on the command line: preset, then file, then ``--set``."""
    values = dict(CONFIG_PRESETS[args.config_preset]) if args.config_preset else {}
    if args.config:
        path = _resolve_input(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {args.config}")
        lines = [ln.split("#", 1)[0].strip() for ln in path.read_text().splitlines()]
        values.update(parse_overrides([ln for ln in lines if ln]))
    values.update(parse_overrides(args.set))
    if args.seed is not None:
        values["seed"] = args.seed
    return values


def _config(args, base: Optional[RunConfig] = None) -> RunConfig:
    start = base.to_dict() if base is not None else {}
    explicit = _explicit_values(args)
    if "encoder_depth" in explicit and "feature_tap_layers" not in explicit:
        start.pop("feature_tap_layers", None)  # re-derive taps for the new depth
    return RunConfig.from_dict({**start, **explicit})


def _load_images(data: Path, split: str, config: RunConfig) -> torch.Tensor:
    samples = list(load_dataset(data, split))
    if not samples:
        raise DataError(f"split {split!r} of {data} is empty")
    shape = samples[0].image.shape
    if shape != (config.image_size, config.image_size, config.channels):
        raise DataError(f"images are {shape} but the config expects "
                        f"{(config.image_size, config.image_size, config.channels)}; adjust --set image_size/channels")
    return stack_images(samples)


def _panel_row(images: Sequence[np.ndarray], gap: int = 2) -> np.ndarray:
    h, _, c = images[0].shape
    spacer = np.ones((h, gap, c), np.float32)
    parts = []
    for i, img in enumerate(images):
        if i:
            parts.append(spacer)
        parts.append(img)
    return np.concatenate(parts, axis=1)


def _write_csv(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        writer.writeheader()
        writer.writerows(rows)


# --------------------------------------------------------------------------
# commands; each returns (config echo, outputs, metrics)

def cmd_pretrain(args, out: Path):
    config = _config(args)
    ablation = AblationSpec(args.ablation, args.ablation_n, not args.no_incubation)
    if args.data is not None:
        images = _load_images(_resolve_input(args.data), "train", config)
    elif args.synthetic:
        images = stack_images(generate_synthetic(args.synthetic, config.seed, config.image_size, config.channels))
    else:
        raise UsageError("pretrain needs --data DIR or --synthetic N")
    resume = _resolve_input(args.resume)
    result = run_pretraining(config, ablation, images, out, resume=resume)
    outputs = {"checkpoint": result.checkpoint, "log": out / "train_log.csv", "summary": result.summary_path}
    metrics = {"final_mse": result.epoch_mse[-1] if result.epoch_mse else None,
               "ablation": ablation.label, "images": int(images.shape[0])}
    return ablation.apply(config), outputs, metrics


def cmd_evaluate(args, out: Path):
    ckpt = _resolve_input(args.ckpt)
    config = load_state(ckpt).config if ckpt is not None else _config(args)
    data = _resolve_input(args.data)
    train, test = list(load_dataset(data, "train")), list(load_dataset(data, "test"))
    if not train or not test:
        raise DataError(f"{data} needs non-empty train and test splits")
    settings = ProbeSettings(steps=args.steps, lr=args.lr, batch_size=args.batch_size, hidden=args.hidden,
                             seed=config.seed if args.seed is None else args.seed)
    report = run_probe(ckpt, args.task, args.mode, train, test, settings, config=config)
    (out / "metrics.json").write_text(json.dumps(report, indent=1))
    if args.task == "parsing":
        rows = [{"class": name, "f1": f} for name, f in zip(CLASS_NAMES, report["f1_per_class"])]
        _write_csv(out / "breakdown.csv", ["class", "f1"], rows)
        metrics = {"f1_mean": report["f1_mean"]}
    else:
        rows = [{"sample": i, "nme_diag": v} for i, v in enumerate(report["per_sample_nme_diag"])]
        _write_csv(out / "breakdown.csv", ["sample", "nme_diag"], rows)
        metrics = {k: report[k] for k in ("nme_inter_ocular", "nme_diag", "nme_box", "auc_diag", "fr_diag")}
    return config, {"report": out / "metrics.json", "breakdown": out / "breakdown.csv"}, metrics


@torch.no_grad()
def _reconstruct_one(state, image: torch.Tensor, mask: torch.Tensor) -> tuple[np.ndarray, np.ndarray, float]:
    cfg = state.config
    state.model.eval()
    patches = patchify(image[None].to(cfg.torch_dtype), cfg.patch_size).patches
    selection = select_tokens(state, patches, mask)
    pred = state.model.reconstruct(substitute(state.model.embed(patches), state.codebook, selection.alpha, mask))
    if cfg.norm_pix_loss:
        mean = patches.mean(dim=-1, keepdim=True)
        std = (patches.var(dim=-1, keepdim=True) + 1e-6) ** 0.5
        pred = pred * std + mean
    err = float(((pred - patches) ** 2)[mask].mean())
    grid = cfg.grid_size
    masked = torch.where(mask[..., None], torch.full_like(patches, 0.5), patches)
    to_img = lambda p: unpatchify(PatchGrid(p, grid, grid, cfg.patch_size))[0].clamp(0, 1).float().numpy()
    return to_img(masked), to_img(pred), err


def cmd_reconstruct(args, out: Path):
    if not args.ckpt:
        raise UsageError("reconstruct needs at least one --ckpt")
    states = [load_state(_resolve_input(p)) for p in args.ckpt]
    cfg = states[0].config
    for s in states[1:]:
        if (s.config.image_size, s.config.patch_size, s.config.channels) != (cfg.image_size, cfg.patch_size,
                                                                             cfg.channels):
            raise UsageError("all checkpoints must share image size, patch size and channels")
    seed = cfg.seed if args.seed is None else args.seed
    if args.image:
        img = read_png(_resolve_input(args.image))
        if img.shape[2] != cfg.channels:
            img = img.mean(axis=2, keepdims=True) if cfg.channels == 1 else np.repeat(img, 3, axis=2)
        if img.shape[:2] != (cfg.image_size, cfg.image_size):
            img = cv2.resize(img, (cfg.image_size, cfg.image_size), interpolation=cv2.INTER_AREA)
            img = img.reshape(cfg.image_size, cfg.image_size, cfg.channels)
    else:
        img = generate_synthetic(1, seed, cfg.image_size, cfg.channels)[0].image
    image = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    mask = sample_mask_batch(1, cfg.num_patches, cfg.mask_ratio, make_generator(seed))
    rows, errors = [], {}
    for path, state in zip(args.ckpt, states):
        state.rng = make_generator(seed)
        masked, recon, err = _reconstruct_one(state, image, mask)
        rows.append(_panel_row([img.astype(np.float32), masked, recon]))
        errors[f"{path} (n={state.codebook.n_tokens})"] = err
    panel = np.concatenate([np.concatenate([r, np.ones((2, r.shape[1], r.shape[2]), np.float32)]) for r in rows])
    panel = panel[:-2]
    write_png(out / "panel.png", panel)
    np.save(out / "mask.npy", mask[0].numpy())
    return cfg, {"panel": out / "panel.png", "mask": out / "mask.npy"}, {"masked_mse": errors}


@torch.no_grad()
def cmd_codebook_dump(args, out: Path):
    if not args.ckpt:
        raise UsageError("codebook-dump needs --ckpt")
    state = load_state(_resolve_input(args.ckpt))
    cfg = state.config
    seed = cfg.seed if args.seed is None else args.seed
    if args.data:
        images = _load_images(_resolve_input(args.data), args.split, cfg)
    else:
        images = stack_images(generate_synthetic(args.count, seed, cfg.image_size, cfg.channels))
    patches = patchify(images.to(cfg.torch_dtype), cfg.patch_size).patches
    mask = torch.ones(patches.shape[:2], dtype=torch.bool)
    state.rng = make_generator(seed)
    alpha = select_tokens(state, patches, mask).alpha  # [N, K]
    tokens = state.codebook.tokens.detach().float().numpy()
    np.save(out / "tokens.npy", tokens)
    n = state.codebook.n_tokens
    grid = cfg.grid_size
    entropies = []
    with open(out / "selection_hist.jsonl", "w") as fh:
        for k in range(cfg.num_patches):
            counts = torch.bincount(alpha[:, k], minlength=n).tolist()
            p = np.asarray(counts, dtype=np.float64) / max(sum(counts), 1)
            entropy = float(-(p[p > 0] * np.log(p[p > 0])).sum())
            entropies.append(entropy)
            fh.write(json.dumps({"position": k, "row": k // grid, "col": k % grid, "counts": counts,
                                 "total": int(sum(counts)), "entropy": entropy,
                                 "token_norms": np.linalg.norm(tokens[k], axis=-1).tolist()}) + "\n")
    metrics = {"num_patches": cfg.num_patches, "n_tokens": n, "images": int(images.shape[0]),
               "mean_selection_entropy": float(np.mean(entropies))}
    return cfg, {"tokens": out / "tokens.npy", "histograms": out / "selection_hist.jsonl"}, metrics


def cmd_data_synth(args, out: Path):
    config = _config(args)
    seed = config.seed
    manifest = write_synthetic_dataset(out, args.count, seed, config.image_size, config.channels,
                                       args.test_fraction)
    return config, {"manifest": manifest}, {"count": args.count}


def cmd_data_prep(args, out: Path):
    config = _config(args)
    manifest = _resolve_input(args.manifest)
    if manifest is None:
        raise UsageError("data-prep needs --manifest")
    template = AlignTemplate.from_json(_resolve_input(args.template)) if args.template else None
    if out.resolve() == (manifest if manifest.is_dir() else manifest.parent).resolve():
        raise UsageError("--out must differ from the input dataset directory")
    path = prepare_dataset(manifest, out, template, args.output_size)
    count = sum(1 for line in path.read_text().splitlines() if line.strip())
    return config, {"manifest": path}, {"count": count}


def cmd_ablate(args, out: Path):
    setup, arms, seeds = setup_from_preset(args.grid)
    setup.config = _config(args, base=setup.config)
    if args.seed is not None:
        seeds = tuple(s + args.seed for s in seeds)
    if args.arms:
        unknown = [a for a in args.arms if a not in arms]
        if unknown:
            raise UsageError(f"unknown arms {unknown}; choose from {arms}")
        arms = args.arms
    rows = run_ablation(setup, arms, seeds, out / "arms")
    table = format_table(rows)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1))
    (out / "table.txt").write_text(table + "\n")
    print(table, file=sys.stderr)
    metrics = {row["arm"]: {k: v for k, v in row.items() if k not in ("arm", "ablation", "per_seed")}
               for row in rows}
    return setup.config, {"rows": out / "ablation.json", "table": out / "table.txt"}, metrics


HANDLERS = {"pretrain": cmd_pretrain, "evaluate": cmd_evaluate, "reconstruct": cmd_reconstruct,
            "codebook-dump": cmd_codebook_dump, "data-synth": cmd_data_synth, "data-prep": cmd_data_prep,
            "ablate": cmd_ablate}


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patchbook", description="Patch-codebook masked image modeling on face images.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text, preset_flag="--preset"):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument(preset_flag, dest="config_preset", choices=sorted(CONFIG_PRESETS),
                       help="config preset applied before --config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int, help="random seed (overrides the config seed)")
        p.add_argument("--out", help=f"output directory (default ${CACHE_ENV}/<command> or runs/<command>)")
        p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        return p

    p = command("pretrain", "Pretrain the encoder, codebook and belief predictor.")
    p.add_argument("--data", help="dataset directory or manifest.jsonl (train split is used)")
    p.add_argument("--synthetic", type=int, default=0, metavar="N", help="train on N generated faces instead")
    p.add_argument("--ablation", choices=SELECTION_MODES, default="belief", help="token selection mode")
    p.add_argument("--ablation-n", type=int, default=0, metavar="N", help="override tokens per position")
    p.add_argument("--no-incubation", action="store_true", help="skip the incubation epoch")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = command("evaluate", "Train a probe head on a checkpoint and report task metrics.")
    p.add_argument("--ckpt", help="checkpoint (omit for a randomly initialised encoder)")
    p.add_argument("--task", choices=["parsing", "alignment"], required=True)
    p.add_argument("--mode", choices=["frozen", "finetune"], default="frozen")
    p.add_argument("--data", required=True, help="dataset with train and test splits")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)

    p = command("reconstruct", "Write original / masked / reconstructed panels, one row per checkpoint.")
    p.add_argument("--ckpt", action="append", default=[], help="checkpoint (repeat to compare)")
    p.add_argument("--image", help="PNG image (default: a generated face)")

    p = command("codebook-dump", "Dump codebook tokens and per-position selection histograms.")
    p.add_argument("--ckpt", help="checkpoint")
    p.add_argument("--data", help="dataset to histogram (default: generated faces)")
    p.add_argument("--split", default="train")
    p.add_argument("--count", type=int, default=64, help="number of generated faces when --data is absent")

    p = command("data-synth", "Render a synthetic face dataset.")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)

    p = command("data-prep", "Align, crop and pad a dataset to the face template.")
    p.add_argument("--manifest", required=True, help="input manifest.jsonl or its directory")
    p.add_argument("--template", help="template JSON (points, crop_size, pad_size, background)")
    p.add_argument("--output-size", type=int, help="resize the padded canvas to this size")

    p = command("ablate", "Run the token-configuration / selection / incubation grid.", "--config-preset")
    p.add_argument("--preset", dest="grid", choices=sorted(EXPERIMENT_PRESETS), required=True,
                   help="experiment grid")
    p.add_argument("--arms", nargs="+", help="subset of arms to run")
    return parser


def _relative(path, out: Path):
    # output paths are reported relative to --out so identical runs give identical trees
    try:
        return str(Path(path).relative_to(out))
    except ValueError:
        return str(path)


def _jsonable(obj):
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        out = _out_dir(args)
        config, outputs, metrics = HANDLERS[args.command](args, out)
    except (UsageError, ConfigError) as exc:
        _emit_error("usage", str(exc))
        return 2
    except (DataError, AlignmentError, CheckpointError, TrainingDiverged, MetricError, ShapeError, OSError,
            ValueError, RuntimeError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 1
    summary = {"command": args.command, "config": config.to_dict() if config is not None else None,
               "seed": config.seed if config is not None else args.seed,
               "wall_time_s": round(time.perf_counter() - start, 3),
               "out": str(out), "outputs": _jsonable({k: _relative(v, out) for k, v in outputs.items()}),
               "metrics": _jsonable(metrics)}
    (out / "config.txt").write_text(dump_config(config))
    text = json.dumps(summary, sort_keys=True)
    (out / "run_summary.json").write_text(text + "\n")
    print(text)
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
