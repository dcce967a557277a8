"""ViT-style encoder, single-block pixel decoder and the frozen perceptual backbone."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import RunConfig, ShapeError


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, k, d = x.shape
        qkv = self.qkv(x).reshape(*lead, k, 3, self.num_heads, self.head_dim)
        q, key, v = qkv.movedim(-3, 0).transpose(-3, -2).unbind(0)  # [..., heads, K, hd]
        attn = (q @ key.transpose(-2, -1)) * self.head_dim ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(-3, -2).reshape(*lead, k, d))


class Block(nn.Module):
    """Pre-norm transformer block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Encoder(nn.Module):
    def __init__(self, patch_dim: int, num_patches: int, dim: int, depth: int, num_heads: int,
                 mlp_ratio: int = 4, tap_layers: Sequence[int] = ()):
        super().__init__()
        self.patch_embed = nn.Linear(patch_dim, dim)
        self.pos_embed = nn.Parameter(torch.zeros(num_patches, dim))
        self.blocks = nn.ModuleList(Block(dim, num_heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.tap_layers = tuple(sorted(tap_layers)) or (depth,)
        self.apply(_init_weights)
        nn.init.normal_(self.pos_embed, std=0.02)

    @property
    def dim(self) -> int:
        return self.pos_embed.shape[-1]

    def embed(self, patches: torch.Tensor) -> torch.Tensor:
        return self.patch_embed(patches)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        return encode(self, x)


def encode(encoder: Encoder, embedded: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Run the encoder on (substituted) patch embeddings ``[..., K, D]``.

    Positional embeddings are added here, after substitution. Returns the normalized
    final activations and the residual stream captured after each tap layer
    (1-indexed, ascending).
    """
    if embedded.shape[-2:] != encoder.pos_embed.shape:
        raise ShapeError(f"encoder expects [..., {tuple(encoder.pos_embed.shape)}], got {tuple(embedded.shape)}")
    x = embedded + encoder.pos_embed
    taps = set(encoder.tap_layers)
    pyramid = []
    for i, block in enumerate(encoder.blocks, start=1):
        x = block(x)
        if i in taps:
            pyramid.append(x)
    return encoder.norm(x), pyramid


class PixelDecoder(nn.Module):
    """``depth`` transformer blocks then a per-patch linear map to pixels.

    With ``depth=0`` the decoder is only the linear projection.
    """

    def __init__(self, dim: int, patch_dim: int, depth: int = 1, num_heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, num_heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim) if depth else nn.Identity()
        self.pred = nn.Linear(dim, patch_dim)
        self.apply(_init_weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return self.pred(self.norm(x))


def decode(decoder: PixelDecoder, encoded: torch.Tensor, grid_rows: int, grid_cols: int,
           patch_size: int) -> torch.Tensor:
    """Decode ``[..., K, D]`` to an image ``[..., H, W, C]`` (values left unclamped)."""
    from .core import PatchGrid, unpatchify

    if encoded.shape[-2] != grid_rows * grid_cols:
        raise ShapeError(f"expected {grid_rows * grid_cols} tokens, got {encoded.shape[-2]}")
    return unpatchify(PatchGrid(decoder(encoded), grid_rows, grid_cols, patch_size))


class MaskedReconstructor(nn.Module):
    """Encoder + pixel decoder operating on patch embeddings."""

    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config.patch_dim, config.num_patches, config.embed_dim, config.encoder_depth,
                               config.encoder_heads, config.mlp_ratio, config.feature_tap_layers)
        self.decoder = PixelDecoder(config.embed_dim, config.patch_dim, config.decoder_depth,
                                    config.decoder_heads, config.mlp_ratio)

    def embed(self, patches: torch.Tensor) -> torch.Tensor:
        return self.encoder.embed(patches)

    def reconstruct(self, embedded: torch.Tensor) -> torch.Tensor:
        """Substituted embeddings ``[..., K, D]`` -> predicted patch pixels ``[..., K, P*P*C]``."""
        encoded, _ = encode(self.encoder, embedded)
        return self.decoder(encoded)

    def features(self, patches: torch.Tensor) -> list[torch.Tensor]:
        _, pyramid = encode(self.encoder, self.embed(patches))
        return pyramid


class PerceptualBackbone(nn.Module):
    """Small conv feature extractor whose weights never train.

    Each layer is ``conv3x3 -> ReLU``; the first keeps resolution, later ones stride 2.
    Weights come from a fixed seed unless loaded from a file with :meth:`load_weights`.
    """

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = (16, 32, 64),
                 layer_indices: Sequence[int] = (1, 2, 3), seed: int = 1234,
                 image_size: Optional[int] = None):
        super().__init__()
        convs = []
        prev = in_channels
        for i, ch in enumerate(channels):
            convs.append(nn.Conv2d(prev, ch, 3, stride=1 if i == 0 else 2, padding=1))
            prev = ch
        self.convs = nn.ModuleList(convs)
        self.layer_indices = tuple(layer_indices)
        self.image_size = image_size
        gen = torch.Generator().manual_seed(seed)
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu", generator=gen)
            nn.init.zeros_(conv.bias)
        self.freeze()

    @classmethod
    def identity(cls, in_channels: int = 3) -> "PerceptualBackbone":
        """One layer whose conv copies its input; on [0, 1] images ReLU is also the identity."""
        net = cls(in_channels, channels=(in_channels,), layer_indices=(1,))
        with torch.no_grad():
            w = net.convs[0].weight
            w.zero_()
            for c in range(in_channels):
                w[c, c, 1, 1] = 1.0
        return net

    @classmethod
    def from_config(cls, config: RunConfig) -> "PerceptualBackbone":
        net = cls(config.channels, config.perceptual_channels, config.perceptual_layer_indices,
                  config.perceptual_seed, config.image_size)
        if config.perceptual_weights:
            net.load_weights(config.perceptual_weights)
        return net.to(config.torch_dtype)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always stays in eval mode
        return super().train(False)

    def load_weights(self, path) -> None:
        state = torch.load(Path(path), map_location="cpu", weights_only=True)
        self.load_state_dict(state)
        self.freeze()

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        return perceptual_features(self, image)


def perceptual_features(backbone: PerceptualBackbone, image: torch.Tensor) -> list[torch.Tensor]:
    """Feature maps ``[..., C_l, H_l, W_l]`` at each configured layer for ``[..., H, W, C]`` images."""
    if backbone.image_size is not None and tuple(image.shape[-3:-1]) != (backbone.image_size,) * 2:
        raise ShapeError(f"backbone expects {backbone.image_size}x{backbone.image_size}, got {tuple(image.shape[-3:-1])}")
    lead = image.shape[:-3]
    x = image.reshape(-1, *image.shape[-3:]).permute(0, 3, 1, 2)
    wanted = set(backbone.layer_indices)
    out = []
    for i, conv in enumerate(backbone.convs, start=1):
        x = F.relu(conv(x))
        if i in wanted:
            out.append(x.reshape(*lead, *x.shape[1:]))
    return out
