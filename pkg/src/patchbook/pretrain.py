"""Two-phase pre-training: an incubation epoch for the Belief Predictor, then main training."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import torch

from .checkpoint import read_checkpoint, write_checkpoint
from .codebook import (BeliefPredictor, PatchCodebook, TokenSelection, fixed_selection, incubation_corrupt,
                       incubation_labels, predict_beliefs, random_selection, substitute)
from .core import RunConfig, make_generator, patchify, sample_mask_batch, tensor_checksum, unpatchify, PatchGrid
from .losses import (LossReport, average_reports, belief_ce_loss, mse_loss, normalize_patches, perceptual_loss,
                     total_loss)
from .model import MaskedReconstructor, PerceptualBackbone

log = logging.getLogger(__name__)

INCUBATION = "incubation"
MAIN = "main"
SELECTION_MODES = ("belief", "random", "single_token")


class TrainingDiverged(RuntimeError):
    pass


class PhaseError(RuntimeError):
    pass


@dataclass
class AblationSpec:
    selection_mode: str = "belief"
    n_override: int = 0
    incubation_enabled: bool = True

    def __post_init__(self):
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}")
        if self.selection_mode == "single_token":
            self.n_override = 1

    def apply(self, config: RunConfig) -> RunConfig:
        if self.n_override:
            return config.replace(n_tokens=self.n_override, predictor_hidden=0)
        return config

    @property
    def label(self) -> str:
        parts = [self.selection_mode]
        if self.n_override:
            parts.append(f"n{self.n_override}")
        if not self.incubation_enabled:
            parts.append("no-incubation")
        return "+".join(parts)


@dataclass
class TrainState:
    config: RunConfig
    ablation: AblationSpec
    model: MaskedReconstructor
    codebook: PatchCodebook
    predictor: BeliefPredictor
    backbone: PerceptualBackbone
    optimizer: torch.optim.Optimizer
    rng: torch.Generator
    epoch: int = 0
    step: int = 0
    phase: str = INCUBATION
    steps_per_epoch: int = 1
    # mask and token indices actually substituted in the latest step
    last_mask: Optional[torch.Tensor] = None
    last_alpha: Optional[torch.Tensor] = None
    dump_dir: Optional[Path] = None

    def trainable_modules(self):
        return self.model, self.codebook, self.predictor

    def phase_for_epoch(self, epoch: int) -> str:
        return INCUBATION if epoch == 0 and self.ablation.incubation_enabled else MAIN

    @property
    def predictor_trains_in_main(self) -> bool:
        # the no-incubation ablation keeps updating the predictor alongside reconstruction
        return not self.ablation.incubation_enabled and self.ablation.selection_mode == "belief"

    def set_phase(self, phase: str) -> None:
        self.phase = phase
        trainable = phase == INCUBATION or self.predictor_trains_in_main
        for p in self.predictor.parameters():
            p.requires_grad_(trainable)


def _param_groups(model, codebook, predictor, weight_decay):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.dim() >= 2 and "pos_embed" not in name else no_decay).append(p)
    pred_decay = [p for n, p in predictor.named_parameters() if p.dim() >= 2 and "pos_embed" not in n]
    pred_rest = [p for n, p in predictor.named_parameters() if not (p.dim() >= 2 and "pos_embed" not in n)]
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay + [codebook.tokens], "weight_decay": 0.0},
        {"params": pred_decay, "weight_decay": weight_decay},
        {"params": pred_rest, "weight_decay": 0.0},
    ]


def build_state(config: RunConfig, ablation: Optional[AblationSpec] = None) -> TrainState:
    ablation = ablation or AblationSpec()
    config = ablation.apply(config)
    dtype = config.torch_dtype
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = MaskedReconstructor(config).to(dtype)
        codebook = PatchCodebook(config.num_patches, config.n_tokens, config.embed_dim).to(dtype)
        predictor = BeliefPredictor(config.patch_dim, config.num_patches, config.n_tokens,
                                    config.predictor_hidden).to(dtype)
    backbone = PerceptualBackbone.from_config(config)
    optimizer = torch.optim.AdamW(_param_groups(model, codebook, predictor, config.weight_decay),
                                  lr=config.lr, betas=(config.beta1, config.beta2))
    state = TrainState(config, ablation, model, codebook, predictor, backbone, optimizer,
                       make_generator(config.seed + 1))
    state.set_phase(state.phase_for_epoch(0))
    return state


def lr_at(step: int, config: RunConfig, steps_per_epoch: int) -> float:
    """Per-step linear warmup across the first epoch, cosine decay afterwards."""
    warmup = steps_per_epoch
    total = max(config.epochs * steps_per_epoch, warmup + 1)
    if step < warmup:
        return config.lr * (step + 1) / warmup
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return config.min_lr + (config.lr - config.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def _set_lr(state: TrainState, lr: float) -> None:
    for group in state.optimizer.param_groups:
        group["lr"] = lr


def select_tokens(state: TrainState, patches: torch.Tensor, mask: torch.Tensor) -> TokenSelection:
    mode = state.ablation.selection_mode
    n = state.codebook.n_tokens
    if mode == "random":
        return random_selection(mask, n, state.rng)
    if mode == "single_token" or n == 1:
        return fixed_selection(mask, n)
    return predict_beliefs(state.predictor, patches, mask)


def _reconstruction_terms(state: TrainState, images: torch.Tensor, patches: torch.Tensor,
                          mask: torch.Tensor, alpha: torch.Tensor):
    cfg = state.config
    state.last_mask, state.last_alpha = mask, torch.where(mask, alpha, torch.zeros_like(alpha))
    embedded = state.model.embed(patches)
    pred = state.model.reconstruct(substitute(embedded, state.codebook, alpha, mask))
    target = normalize_patches(patches) if cfg.norm_pix_loss else patches
    mse = mse_loss(pred, target)
    if cfg.loss_weight_perceptual:
        grid = state.config.grid_size
        pred_img = unpatchify(PatchGrid(pred, grid, grid, cfg.patch_size))
        perc = perceptual_loss(state.backbone, pred_img, images)
    else:
        perc = mse.new_zeros(())
    return mse, perc


def _apply_update(state: TrainState, loss: torch.Tensor, report: LossReport) -> None:
    if not report.is_finite():
        msg = (f"non-finite loss at step {state.step} (epoch {state.epoch}, phase {state.phase}): "
               f"{asdict(report)}")
        if state.dump_dir is not None:
            dump = save_state(state, Path(state.dump_dir) / f"diverged_step{state.step}.pt")
            msg += f"; state dumped to {dump}"
        raise TrainingDiverged(msg)
    _set_lr(state, lr_at(state.step, state.config, state.steps_per_epoch))
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1


def _prepare(state: TrainState, batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    images = torch.stack(list(batch)) if not torch.is_tensor(batch) else batch
    images = images.to(state.config.torch_dtype)
    patches = patchify(images, state.config.patch_size).patches
    mask = sample_mask_batch(images.shape[0], state.config.num_patches, state.config.mask_ratio, state.rng)
    return images, patches, mask


def train_step_main(state: TrainState, batch) -> LossReport:
    """One main-phase update of encoder, decoder and codebook (predictor frozen)."""
    if state.phase != MAIN:
        raise PhaseError(f"train_step_main called in phase {state.phase!r}")
    state.model.train()
    images, patches, mask = _prepare(state, batch)
    selection = select_tokens(state, patches, mask)
    ce = None
    if state.predictor_trains_in_main and state.codebook.n_tokens > 1:
        labels = incubation_labels(patches, mask, state.codebook, state.model)
        ce = belief_ce_loss(selection, labels, state.config.ce_reduction)
    mse, perc = _reconstruction_terms(state, images, patches, mask, selection.alpha)
    loss, report = total_loss(mse, perc, ce, weight_perceptual=state.config.loss_weight_perceptual,
                              phase=MAIN, include_ce=ce is not None)
    _apply_update(state, loss, report)
    return report


def train_step_incubation(state: TrainState, batch) -> LossReport:
    """One incubation update: CE on fresh cosine labels for the predictor, jointly with reconstruction."""
    if state.phase != INCUBATION:
        raise PhaseError(f"train_step_incubation called in phase {state.phase!r}")
    cfg = state.config
    state.model.train()
    images, patches, mask = _prepare(state, batch)
    labels = incubation_labels(patches, mask, state.codebook, state.model)
    selection = predict_beliefs(state.predictor, patches, mask)
    if state.ablation.selection_mode == "random":
        used = random_selection(mask, state.codebook.n_tokens, state.rng)
    else:
        used = incubation_corrupt(selection, cfg.incubation_random_fraction, state.rng)
    ce = belief_ce_loss(selection, labels, cfg.ce_reduction)
    mse, perc = _reconstruction_terms(state, images, patches, mask, used.alpha)
    if cfg.incubation_ce_only:
        mse, perc = mse.detach(), perc.detach()
    loss, report = total_loss(mse, perc, ce, weight_perceptual=cfg.loss_weight_perceptual, phase=INCUBATION)
    if cfg.incubation_ce_only:
        loss = ce
    _apply_update(state, loss, report)
    return report


def train_step(state: TrainState, batch) -> LossReport:
    if state.phase == INCUBATION:
        return train_step_incubation(state, batch)
    return train_step_main(state, batch)


# --------------------------------------------------------------------------
# checkpoints

def state_payload(state: TrainState) -> dict:
    params = {}
    for prefix, module in (("model", state.model), ("codebook", state.codebook),
                           ("predictor", state.predictor), ("backbone", state.backbone)):
        for name, tensor in module.state_dict().items():
            params[f"{prefix}.{name}"] = tensor.detach().clone()
    return {
        "format": "patchbook-checkpoint",
        "config": state.config.to_dict(),
        "ablation": asdict(state.ablation),
        "params": params,
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "phase": state.phase,
        "steps_per_epoch": state.steps_per_epoch,
        "rng_state": state.rng.get_state(),
    }


def save_state(state: TrainState, path: Union[str, Path]) -> Path:
    return write_checkpoint(state_payload(state), path)


def load_state(path: Union[str, Path]) -> TrainState:
    payload = read_checkpoint(path)
    config = RunConfig.from_dict(payload["config"])
    ablation = AblationSpec(**payload["ablation"])
    # config already carries the ablation's n override
    ablation_for_build = AblationSpec(ablation.selection_mode, 0, ablation.incubation_enabled)
    state = build_state(config, ablation_for_build)
    state.ablation = ablation
    params = payload["params"]
    for prefix, module in (("model", state.model), ("codebook", state.codebook),
                           ("predictor", state.predictor), ("backbone", state.backbone)):
        sub = {k[len(prefix) + 1:]: v for k, v in params.items() if k.startswith(prefix + ".")}
        module.load_state_dict(sub)
    state.backbone.freeze()
    state.optimizer.load_state_dict(payload["optimizer"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.steps_per_epoch = payload["steps_per_epoch"]
    state.rng.set_state(payload["rng_state"])
    state.set_phase(payload["phase"])
    return state


def load_encoder(path: Union[str, Path]):
    """Return ``(config, MaskedReconstructor)`` from a checkpoint, in eval mode."""
    state = load_state(path)
    state.model.eval()
    return state.config, state.model


# --------------------------------------------------------------------------
# full runs

LOG_FIELDS = ["step", "epoch", "phase", "mse", "perceptual", "belief_ce", "total"]


@dataclass
class PretrainResult:
    checkpoint: Path
    epoch_mse: list = field(default_factory=list)
    epoch_reports: list = field(default_factory=list)
    summary_path: Optional[Path] = None


def _epoch_order(n: int, seed: int, epoch: int) -> torch.Tensor:
    return torch.randperm(n, generator=make_generator(seed * 1_000_003 + epoch))


def run_pretraining(config: RunConfig, ablation: Optional[AblationSpec], dataset: torch.Tensor,
                    out_dir: Union[str, Path], resume: Union[str, Path, None] = None,
                    checkpoint_every_epoch: bool = True) -> PretrainResult:
    """Train for ``config.epochs`` epochs and write checkpoints, a CSV log and ``summary.json``.

    ``dataset`` is an image tensor ``[N, H, W, C]`` in [0, 1]. Epoch 0 is the incubation
    epoch when enabled. Resuming from a per-epoch checkpoint continues bit-exactly.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = dataset.to(config.torch_dtype)
    n = images.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)

    if resume is not None:
        state = load_state(resume)
        if state.steps_per_epoch != steps_per_epoch:
            raise ValueError("resumed run has a different dataset size / batch size")
    else:
        state = build_state(config, ablation)
        state.steps_per_epoch = steps_per_epoch
    cfg = state.config
    state.dump_dir = out_dir

    log_path = out_dir / "train_log.csv"
    history_path = out_dir / "epoch_history.json"
    history = json.loads(history_path.read_text()) if resume is not None and history_path.exists() else []
    history = history[:state.epoch]
    mode = "a" if resume is not None and log_path.exists() else "w"
    ckpt = out_dir / "checkpoint.pt"
    with open(log_path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if mode == "w":
            writer.writeheader()
        for epoch in range(state.epoch, cfg.epochs):
            state.set_phase(state.phase_for_epoch(epoch))
            order = _epoch_order(n, cfg.seed, epoch)
            reports = []
            for start in range(0, n, cfg.batch_size):
                batch = images[order[start:start + cfg.batch_size]]
                report = train_step(state, batch)
                reports.append(report)
                writer.writerow({"step": state.step, "epoch": epoch, "phase": report.phase,
                                 "mse": report.mse, "perceptual": report.perceptual,
                                 "belief_ce": report.belief_ce, "total": report.total})
            mean = average_reports(reports)
            history.append(asdict(mean))
            log.info("epoch %d [%s] mse=%.5f perc=%.4f ce=%.4f", epoch, state.phase, mean.mse,
                     mean.perceptual, mean.belief_ce)
            state.epoch = epoch + 1
            if state.epoch < cfg.epochs:
                state.set_phase(state.phase_for_epoch(state.epoch))
            history_path.write_text(json.dumps(history, indent=1))
            if checkpoint_every_epoch:
                save_state(state, out_dir / f"checkpoint_epoch{epoch:03d}.pt")
            fh.flush()
    save_state(state, ckpt)
    summary = {
        "checkpoint": ckpt.name,
        "config": cfg.to_dict(),
        "ablation": asdict(state.ablation),
        "epochs": history,
        "predictor_checksum": tensor_checksum(state.predictor),
        "backbone_checksum": tensor_checksum(state.backbone),
    }
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=1, default=list))
    return PretrainResult(ckpt, [h["mse"] for h in history], history, summary_path)
