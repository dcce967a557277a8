"""Parsing/alignment metrics and multi-level feature probes on a pretrained encoder."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import PatchGrid, RunConfig, patchify, tensor_checksum, unpatchify
from .data import EYE_CENTERS, NUM_CLASSES, NUM_LANDMARKS, FaceSample, stack_images
from .model import MaskedReconstructor

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


# --------------------------------------------------------------------------
# face parsing

@dataclass
class ParsingPrediction:
    labels: np.ndarray  # int [..., H, W]
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise MetricError("class id outside the vocabulary")


def f1_per_class(pred: Union[ParsingPrediction, np.ndarray], gt: Union[ParsingPrediction, np.ndarray],
                 num_classes: Optional[int] = None, exclude_background: bool = True,
                 absent_value: float = 1.0) -> dict:
    """Pixel-level ``F1_c = 2TP / (2TP + FP + FN)`` for each class, pooled over all images.

    A class missing from both prediction and ground truth scores ``absent_value``. The
    mean skips class 0 when ``exclude_background``.
    """
    if isinstance(pred, ParsingPrediction):
        num_classes = num_classes or pred.num_classes
        pred = pred.labels
    if isinstance(gt, ParsingPrediction):
        num_classes = num_classes or gt.num_classes
        gt = gt.labels
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {gt.shape}")
    num_classes = num_classes or int(max(pred.max(initial=0), gt.max(initial=0)) + 1)
    p, g = pred.ravel(), gt.ravel()
    scores = np.empty(num_classes)
    for c in range(num_classes):
        tp = np.count_nonzero((p == c) & (g == c))
        fp = np.count_nonzero((p == c) & (g != c))
        fn = np.count_nonzero((p != c) & (g == c))
        denom = 2 * tp + fp + fn
        scores[c] = absent_value if denom == 0 else 2 * tp / denom
    counted = scores[1:] if exclude_background else scores
    return {"per_class": scores, "mean": float(counted.mean())}


# --------------------------------------------------------------------------
# face alignment

NORM_MODES = ("inter_ocular", "diag", "box")


@dataclass
class LandmarkPrediction:
    """Predicted and true landmarks ``[N, L, 2]`` plus optional per-sample normalizers.

    Missing normalizers are derived from the ground truth: the eye-center distance, the
    landmark bounding-box diagonal, and ``sqrt(w * h)`` of that box.
    """

    pred: np.ndarray
    gt: np.ndarray
    inter_ocular: Optional[np.ndarray] = None
    diag: Optional[np.ndarray] = None
    box: Optional[np.ndarray] = None
    eye_indices: tuple = EYE_CENTERS

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.gt = np.asarray(self.gt, dtype=np.float64)
        if self.pred.ndim == 2:
            self.pred, self.gt = self.pred[None], self.gt[None]
        if self.pred.shape != self.gt.shape or self.pred.shape[-1] != 2:
            raise MetricError(f"landmark shapes differ: {self.pred.shape} vs {self.gt.shape}")

    def normalizer(self, mode: str) -> np.ndarray:
        if mode not in NORM_MODES:
            raise MetricError(f"unknown normalization {mode!r}")
        given = getattr(self, mode)
        if given is not None:
            return np.broadcast_to(np.asarray(given, dtype=np.float64), self.gt.shape[:1])
        if mode == "inter_ocular":
            a, b = self.eye_indices
            if self.gt.shape[1] <= max(a, b):
                raise MetricError("inter-ocular normalization needs the eye-center landmarks")
            return np.linalg.norm(self.gt[:, a] - self.gt[:, b], axis=-1)
        extent = self.gt.max(axis=1) - self.gt.min(axis=1)
        if mode == "diag":
            return np.linalg.norm(extent, axis=-1)
        return np.sqrt(extent[:, 0] * extent[:, 1])


def per_sample_nme(pred: LandmarkPrediction, norm_mode: str = "inter_ocular") -> np.ndarray:
    """Per-sample mean landmark error over the normalizer, as a fraction."""
    norm = pred.normalizer(norm_mode)
    if (norm <= 0).any():
        raise MetricError(f"zero {norm_mode} normalizer")
    err = np.linalg.norm(pred.pred - pred.gt, axis=-1).mean(axis=-1)
    return err / norm


def nme(pred: LandmarkPrediction, norm_mode: str = "inter_ocular") -> float:
    """Normalized mean error in percent, averaged over samples."""
    return float(100.0 * per_sample_nme(pred, norm_mode).mean())


def auc_fr(per_sample: Sequence[float], threshold: float) -> tuple[float, float]:
    """Area under the cumulative error distribution on ``[0, threshold]`` (divided by the
    threshold) and the fraction of samples above the threshold.

    The CED is the exact empirical step function, so the area is
    ``mean(max(0, threshold - e_i)) / threshold``.
    """
    errors = np.asarray(per_sample, dtype=np.float64)
    if errors.size == 0:
        raise MetricError("no errors given")
    if threshold <= 0:
        raise MetricError("threshold must be positive")
    auc = float(np.clip(threshold - errors, 0.0, None).mean() / threshold)
    fr = float((errors > threshold).mean())
    return auc, fr


# --------------------------------------------------------------------------
# probes

class ProbeHead(nn.Module):
    """Per-tap LayerNorm + linear projection, concatenated, then a task layer.

    ``parsing`` predicts per-pixel class logits patch by patch. ``alignment`` scores every
    token as a heatmap location for each landmark and adds a predicted offset; the
    soft-argmax over tokens gives coordinates normalized to [0, 1].
    """

    def __init__(self, task: str, num_taps: int, dim: int, num_patches: int, patch_size: int,
                 hidden: int = 32, num_classes: int = NUM_CLASSES, num_landmarks: int = NUM_LANDMARKS):
        super().__init__()
        self.task = task
        self.patch_size = patch_size
        self.num_classes = num_classes
        self.norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(num_taps))
        self.taps = nn.ModuleList(nn.Linear(dim, hidden) for _ in range(num_taps))
        fused = hidden * num_taps
        if task == "parsing":
            self.out = nn.Linear(fused, patch_size * patch_size * num_classes)
        elif task == "alignment":
            # per-token heatmap logit and (dx, dy) offset for each landmark
            self.out = nn.Linear(fused, num_landmarks * 3)
            side = int(round(num_patches ** 0.5))
            ys, xs = torch.meshgrid(torch.arange(side), torch.arange(side), indexing="ij")
            centers = torch.stack([xs.flatten(), ys.flatten()], dim=-1).float()
            self.register_buffer("centers", (centers + 0.5) / side)
        else:
            raise ValueError(f"unknown task {task!r}")

    def forward(self, pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
        x = torch.cat([tap(norm(f)) for f, norm, tap in zip(pyramid, self.norms, self.taps)], dim=-1)
        x = F.gelu(x)
        if self.task == "parsing":
            k = x.shape[-2]
            side = int(round(k ** 0.5))
            return unpatchify(PatchGrid(self.out(x), side, side, self.patch_size))  # [B, H, W, classes]
        out = self.out(x).reshape(*x.shape[:-1], -1, 3)  # [B, K, L, 3]
        weights = out[..., 0].softmax(dim=-2).unsqueeze(-1)
        points = self.centers.to(out.dtype)[:, None, :] + out[..., 1:] / self.centers.shape[0] ** 0.5
        return (weights * points).sum(dim=-3)  # [B, L, 2]


@dataclass
class ProbeSettings:
    steps: int = 500
    lr: float = 1e-2
    weight_decay: float = 1e-4
    backbone_lr: float = 1e-4
    batch_size: int = 32
    hidden: int = 64
    seed: int = 0
    auc_threshold: float = 0.07
    fr_threshold: float = 0.07


def _features(model: MaskedReconstructor, images: torch.Tensor, patch_size: int) -> list[torch.Tensor]:
    return model.features(patchify(images, patch_size).patches)


def _targets(task: str, samples: Sequence[FaceSample], image_size: int) -> torch.Tensor:
    if task == "parsing":
        if any(s.seg_mask is None for s in samples):
            raise MetricError("parsing probe needs segmentation masks")
        return torch.from_numpy(np.stack([s.seg_mask for s in samples]))
    if any(s.landmarks is None for s in samples):
        raise MetricError("alignment probe needs landmarks")
    return torch.from_numpy(np.stack([s.landmarks for s in samples])) / image_size


def _loss(task: str, out: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if task == "parsing":
        return F.cross_entropy(out.movedim(-1, 1), target)
    return F.mse_loss(out, target.to(out.dtype))


def run_probe(checkpoint, task: str, mode: str, train: Sequence[FaceSample], test: Sequence[FaceSample],
              settings: Optional[ProbeSettings] = None, config: Optional[RunConfig] = None) -> dict:
    """Train a probe head on ``train`` and report task metrics on ``test``.

    ``checkpoint`` is a checkpoint path, a ``MaskedReconstructor``, or ``None`` for a
    randomly initialised encoder built from ``config``. In ``frozen`` mode the encoder is
    untouched; ``finetune`` updates it together with the head (on a private copy when a
    module was passed in).
    """
    from .pretrain import load_encoder

    settings = settings or ProbeSettings()
    if task not in ("parsing", "alignment"):
        raise ValueError(f"unknown task {task!r}")
    if mode not in ("frozen", "finetune"):
        raise ValueError(f"unknown mode {mode!r}")
    if checkpoint is None:
        if config is None:
            raise ValueError("a config is needed for a random encoder")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            model = MaskedReconstructor(config).to(config.torch_dtype)
    elif isinstance(checkpoint, MaskedReconstructor):
        model, config = checkpoint, checkpoint.config
        if mode == "finetune":
            model = copy.deepcopy(model)
    else:
        config, model = load_encoder(checkpoint)
    dtype = config.torch_dtype
    before = tensor_checksum(model)

    x_train = stack_images(train).to(dtype)
    x_test = stack_images(test).to(dtype)
    y_train = _targets(task, train, config.image_size)
    y_test = _targets(task, test, config.image_size)

    gen = torch.Generator().manual_seed(settings.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(settings.seed)
        head = ProbeHead(task, len(config.feature_tap_layers), config.embed_dim, config.num_patches,
                         config.patch_size, settings.hidden).to(dtype)
    params = [{"params": head.parameters(), "lr": settings.lr}]
    if mode == "frozen":
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            feats_train = _features(model, x_train, config.patch_size)
    else:
        model.train()
        for p in model.parameters():
            p.requires_grad_(True)
        params.append({"params": model.parameters(), "lr": settings.backbone_lr})
    opt = torch.optim.AdamW(params, weight_decay=settings.weight_decay)

    n = x_train.shape[0]
    bs = min(settings.batch_size, n)
    losses = []
    for step in range(settings.steps):
        idx = torch.randperm(n, generator=gen)[:bs]
        if mode == "frozen":
            pyramid = [f[idx] for f in feats_train]
        else:
            pyramid = _features(model, x_train[idx], config.patch_size)
        loss = _loss(task, head(pyramid), y_train[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

    model.eval()
    head.eval()
    with torch.no_grad():
        out = head(_features(model, x_test, config.patch_size))
    if mode == "frozen":
        for p in model.parameters():
            p.requires_grad_(True)
    after = tensor_checksum(model)

    report = {"task": task, "mode": mode, "seed": settings.seed, "steps": settings.steps,
              "final_train_loss": losses[-1] if losses else None,
              "backbone_changed": before != after, "n_train": n, "n_test": x_test.shape[0]}
    if task == "parsing":
        pred = out.argmax(dim=-1).numpy()
        scores = f1_per_class(pred, y_test.numpy(), NUM_CLASSES)
        report["f1_mean"] = scores["mean"]
        report["f1_per_class"] = scores["per_class"].tolist()
    else:
        pred = out.double().numpy() * config.image_size
        lp = LandmarkPrediction(pred, y_test.double().numpy() * config.image_size)
        for mode_name in NORM_MODES:
            report[f"nme_{mode_name}"] = nme(lp, mode_name)
        per = per_sample_nme(lp, "diag")
        report["auc_diag"], _ = auc_fr(per, settings.auc_threshold)
        _, report["fr_diag"] = auc_fr(per, settings.fr_threshold)
        report["per_sample_nme_diag"] = per.tolist()
    return report
