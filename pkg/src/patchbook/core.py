"""Shared primitives: run configuration, patch grids, mask sampling, RNG helpers."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import torch


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def default_tap_layers(depth: int) -> tuple[int, ...]:
    """Scale the 12-layer taps {2, 4, 8, 12} to an encoder of ``depth`` blocks."""
    taps = {max(1, math.ceil(depth * f / 12)) for f in (2, 4, 8, 12)}
    return tuple(sorted(taps))


@dataclass
class RunConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    n_tokens: int = 3
    embed_dim: int = 64
    encoder_depth: int = 4
    encoder_heads: int = 4
    mlp_ratio: int = 4
    decoder_depth: int = 1
    decoder_heads: int = 4
    mask_ratio: float = 0.75
    incubation_random_fraction: float = 0.75
    incubation_ce_only: bool = False
    loss_weight_perceptual: float = 1.0
    perceptual_channels: tuple = (16, 32, 64)
    perceptual_layer_indices: tuple = (1, 2, 3)
    perceptual_seed: int = 1234
    perceptual_weights: str = ""
    feature_tap_layers: tuple = ()
    predictor_hidden: int = 0
    ce_reduction: str = "mean"
    norm_pix_loss: bool = False
    lr: float = 1.5e-4
    min_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    batch_size: int = 16
    epochs: int = 4
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not self.feature_tap_layers:
            self.feature_tap_layers = default_tap_layers(self.encoder_depth)
        if not self.predictor_hidden:
            self.predictor_hidden = 4 * self.n_tokens * 8
        self.feature_tap_layers = tuple(int(v) for v in self.feature_tap_layers)
        self.perceptual_layer_indices = tuple(int(v) for v in self.perceptual_layer_indices)
        self.perceptual_channels = tuple(int(v) for v in self.perceptual_channels)
        self.validate()

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def validate(self) -> None:
        ints = ["image_size", "patch_size", "n_tokens", "embed_dim", "encoder_depth",
                "encoder_heads", "mlp_ratio", "batch_size", "predictor_hidden"]
        for name in ints:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.decoder_depth < 0 or self.epochs < 0:
            raise ConfigError("decoder_depth and epochs must be non-negative")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if not 0.0 <= self.incubation_random_fraction <= 1.0:
            raise ConfigError("incubation_random_fraction must lie in [0, 1]")
        if self.embed_dim % self.encoder_heads:
            raise ConfigError("embed_dim must be divisible by encoder_heads")
        if self.decoder_depth and self.embed_dim % self.decoder_heads:
            raise ConfigError("embed_dim must be divisible by decoder_heads")
        if not self.feature_tap_layers or not all(1 <= t <= self.encoder_depth for t in self.feature_tap_layers):
            raise ConfigError(f"feature_tap_layers {self.feature_tap_layers} outside [1, {self.encoder_depth}]")
        if not all(1 <= t <= len(self.perceptual_channels) for t in self.perceptual_layer_indices):
            raise ConfigError("perceptual_layer_indices outside the backbone depth")
        if self.ce_reduction not in ("mean", "sum"):
            raise ConfigError("ce_reduction must be 'mean' or 'sum'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


PRESETS = {
    "desk": {},
    "tiny": dict(image_size=32, patch_size=4, embed_dim=32, encoder_depth=2, encoder_heads=2,
                 decoder_heads=2, perceptual_channels=(8, 16), perceptual_layer_indices=(1, 2)),
    "vit-b16": dict(image_size=224, patch_size=16, embed_dim=768, encoder_depth=12, encoder_heads=12,
                    decoder_heads=12, batch_size=720, epochs=32),
}


def _parse_value(kind: type, raw: str):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind is tuple:
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    return kind(raw)


def _field_kinds() -> dict:
    kinds = {}
    for f in fields(RunConfig):
        default = f.default
        kinds[f.name] = tuple if isinstance(default, tuple) else type(default)
    return kinds


def parse_overrides(pairs: Sequence[str]) -> dict:
    """Parse ``key=value`` strings into typed config values."""
    kinds = _field_kinds()
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = _parse_value(kinds[key], raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return out


def load_config(path: Union[str, Path, None] = None, overrides: Sequence[str] = (),
                preset: Optional[str] = None) -> RunConfig:
    """Read a flat ``key = value`` config file. Blank lines and ``#`` comments are ignored."""
    values = dict(PRESETS[preset]) if preset else {}
    if path is not None:
        lines = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                lines.append(line)
        values.update(parse_overrides(lines))
    values.update(parse_overrides(overrides))
    return RunConfig.from_dict(values)


def dump_config(config: RunConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def save_config(config: RunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(dump_config(config))


# --------------------------------------------------------------------------
# patch grids

@dataclass
class PatchGrid:
    """Flattened patches ``[..., K, P*P*C]`` in row-major grid order."""

    patches: torch.Tensor
    grid_rows: int
    grid_cols: int
    patch_size: int

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def channels(self) -> int:
        return self.patches.shape[-1] // (self.patch_size * self.patch_size)


def patchify(image: torch.Tensor, patch_size: int) -> PatchGrid:
    """Split ``[..., H, W, C]`` images into row-major patches, each flattened channel-last."""
    if image.dim() < 3:
        raise ShapeError(f"expected [..., H, W, C], got shape {tuple(image.shape)}")
    *lead, h, w, c = image.shape
    p = patch_size
    if p <= 0 or h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    x = image.reshape(*lead, rows, p, cols, p, c)
    x = x.movedim(-4, -3)  # [..., rows, cols, p, p, c]
    return PatchGrid(x.reshape(*lead, rows * cols, p * p * c), rows, cols, p)


def unpatchify(grid: PatchGrid) -> torch.Tensor:
    patches = grid.patches
    p = grid.patch_size
    *lead, k, d = patches.shape
    if k != grid.grid_rows * grid.grid_cols:
        raise ShapeError(f"grid has {k} patches but {grid.grid_rows}x{grid.grid_cols} layout")
    if d % (p * p):
        raise ShapeError(f"patch length {d} not a multiple of {p}*{p}")
    c = d // (p * p)
    x = patches.reshape(*lead, grid.grid_rows, grid.grid_cols, p, p, c)
    x = x.movedim(-3, -4)
    return x.reshape(*lead, grid.grid_rows * p, grid.grid_cols * p, c)


# --------------------------------------------------------------------------
# masks

@dataclass
class MaskSet:
    positions: torch.Tensor  # sorted int64 indices in [0, K)
    num_patches: int
    ratio: float

    def __len__(self) -> int:
        return int(self.positions.numel())

    def as_bool(self) -> torch.Tensor:
        out = torch.zeros(self.num_patches, dtype=torch.bool)
        out[self.positions] = True
        return out


def make_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def sample_mask(num_patches: int, ratio: float, rng: torch.Generator) -> MaskSet:
    """Draw ``round(ratio * K)`` distinct positions uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    m = round_half_up(ratio * num_patches)
    perm = torch.randperm(num_patches, generator=rng)
    positions, _ = torch.sort(perm[:m])
    return MaskSet(positions, num_patches, ratio)


def sample_mask_batch(batch: int, num_patches: int, ratio: float, rng: torch.Generator) -> torch.Tensor:
    """Boolean masks ``[batch, K]``, one independent draw per row."""
    return torch.stack([sample_mask(num_patches, ratio, rng).as_bool() for _ in range(batch)])


def as_bool_mask(mask: Union[MaskSet, torch.Tensor], num_patches: int) -> torch.Tensor:
    if isinstance(mask, MaskSet):
        if mask.num_patches != num_patches:
            raise ShapeError(f"mask built for K={mask.num_patches}, grid has K={num_patches}")
        return mask.as_bool()
    if mask.dtype != torch.bool or mask.shape[-1] != num_patches:
        raise ShapeError(f"expected bool mask [..., {num_patches}], got {mask.dtype} {tuple(mask.shape)}")
    return mask


def tensor_checksum(tensors) -> str:
    """sha256 over the raw bytes of a sequence of tensors (or a module's parameters)."""
    import hashlib

    if isinstance(tensors, torch.nn.Module):
        tensors = [t for _, t in sorted(tensors.state_dict().items())]
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
