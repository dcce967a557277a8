"""Per-position token codebook, Belief Predictor, and token substitution."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import MaskSet, ShapeError, as_bool_mask, round_half_up

COSINE_EPS = 1e-12


class PatchCodebook(nn.Module):
    """``n`` learnable candidate tokens for each of the ``K`` patch positions, shape ``[K, n, D]``."""

    def __init__(self, num_patches: int, n_tokens: int, dim: int, std: float = 0.02):
        super().__init__()
        self.tokens = nn.Parameter(torch.randn(num_patches, n_tokens, dim) * std)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def num_patches(self) -> int:
        return self.tokens.shape[0]


class BeliefPredictor(nn.Module):
    """Two-layer MLP from a patch's raw pixels to logits over that position's tokens.

    A learned per-position embedding is added to the input projection.
    """

    def __init__(self, patch_dim: int, num_patches: int, n_tokens: int, hidden: int = 0):
        super().__init__()
        hidden = hidden or 4 * n_tokens * 8
        self.patch_dim = patch_dim
        self.fc1 = nn.Linear(patch_dim, hidden)
        self.pos_embed = nn.Parameter(torch.zeros(num_patches, hidden))
        self.fc2 = nn.Linear(hidden, n_tokens)
        nn.init.normal_(self.pos_embed, std=0.02)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-1] != self.patch_dim:
            raise ShapeError(f"predictor expects patches of length {self.patch_dim}, got {patches.shape[-1]}")
        h = F.gelu(self.fc1(patches) + self.pos_embed)
        return self.fc2(h)


@dataclass
class TokenSelection:
    """Chosen token index per position, with the logits/probabilities behind it.

    Tensors carry a ``[..., K]`` layout; entries outside ``mask`` are meaningless
    (``alpha`` is 0 there).
    """

    mask: torch.Tensor  # bool [..., K]
    alpha: torch.Tensor  # int64 [..., K]
    logits: torch.Tensor  # [..., K, n]
    probs: torch.Tensor  # [..., K, n]

    @property
    def positions(self) -> torch.Tensor:
        return self.mask.nonzero()

    def masked_alpha(self) -> torch.Tensor:
        return self.alpha[self.mask]

    def masked_logits(self) -> torch.Tensor:
        return self.logits[self.mask]

    def with_alpha(self, alpha: torch.Tensor) -> "TokenSelection":
        return TokenSelection(self.mask, alpha, self.logits, self.probs)


def argmax_lowest(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """argmax with ties resolved to the lowest index (NaN entries never win)."""
    x = torch.nan_to_num(x, nan=-math.inf)
    n = x.shape[dim]
    shape = [1] * x.dim()
    shape[dim] = n
    idx = torch.arange(n, device=x.device).view(shape)
    is_max = x == x.amax(dim=dim, keepdim=True)
    return torch.where(is_max, idx, n).amin(dim=dim)


def selection_from_logits(logits: torch.Tensor, mask: torch.Tensor) -> TokenSelection:
    alpha = argmax_lowest(logits.detach())
    alpha = torch.where(mask, alpha, torch.zeros_like(alpha))
    return TokenSelection(mask, alpha, logits, logits.softmax(dim=-1))


def predict_beliefs(predictor: BeliefPredictor, patches: torch.Tensor,
                    mask: Union[MaskSet, torch.Tensor]) -> TokenSelection:
    """Pick the most probable token at every masked position."""
    mask = as_bool_mask(mask, patches.shape[-2])
    return selection_from_logits(predictor(patches), mask)


def random_selection(mask: torch.Tensor, n_tokens: int, rng: torch.Generator) -> TokenSelection:
    """Uniform token choice, bypassing the predictor."""
    alpha = torch.randint(0, n_tokens, mask.shape, generator=rng)
    alpha = torch.where(mask, alpha, torch.zeros_like(alpha))
    logits = torch.zeros(*mask.shape, n_tokens)
    return TokenSelection(mask, alpha, logits, logits.softmax(-1))


def fixed_selection(mask: torch.Tensor, n_tokens: int, index: int = 0) -> TokenSelection:
    alpha = torch.full(mask.shape, index, dtype=torch.long)
    alpha = torch.where(mask, alpha, torch.zeros_like(alpha))
    logits = torch.zeros(*mask.shape, n_tokens)
    return TokenSelection(mask, alpha, logits, logits.softmax(-1))


def substitute(embedded: torch.Tensor, codebook: PatchCodebook,
               selection: Union[TokenSelection, torch.Tensor],
               mask: Union[MaskSet, torch.Tensor]) -> torch.Tensor:
    """Replace masked rows of ``embedded [..., K, D]`` by ``tokens[i, alpha_i]``.

    Unmasked rows pass through untouched, and only the gathered tokens receive gradient.
    """
    k = embedded.shape[-2]
    mask = as_bool_mask(mask, k)
    if isinstance(selection, TokenSelection):
        if selection.mask.shape != mask.shape or not torch.equal(selection.mask, mask):
            raise ShapeError("selection does not cover exactly the mask positions")
        alpha = selection.alpha
    else:
        alpha = selection
    if alpha.shape[-1] != k:
        raise ShapeError(f"alpha shape {tuple(alpha.shape)} incompatible with {k} patches")
    if codebook.num_patches != k:
        raise ShapeError(f"codebook has {codebook.num_patches} positions, input has {k}")
    alpha = torch.where(mask, alpha, torch.zeros_like(alpha))
    if (alpha < 0).any() or (alpha >= codebook.n_tokens).any():
        raise ShapeError("token index out of range")
    tokens = codebook.tokens[torch.arange(k), alpha]  # [..., K, D]
    return torch.where(mask.unsqueeze(-1), tokens, embedded)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine along ``dim``; 0 where either operand has norm below 1e-12."""
    na = a.norm(dim=dim)
    nb = b.norm(dim=dim)
    dot = (a * b).sum(dim=dim)
    ok = (na >= COSINE_EPS) & (nb >= COSINE_EPS)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    return torch.where(ok, dot / denom, torch.zeros_like(dot))


def candidate_reconstructions(patches: torch.Tensor, mask: torch.Tensor, codebook: PatchCodebook,
                              model) -> torch.Tensor:
    """Reconstructed patches for each all-token-``j`` substitution: ``[n, ..., K, P*P*C]``."""
    embedded = model.embed(patches)
    outs = []
    for j in range(codebook.n_tokens):
        alpha = torch.full(mask.shape, j, dtype=torch.long)
        outs.append(model.reconstruct(substitute(embedded, codebook, alpha, mask)))
    return torch.stack(outs)


@torch.no_grad()
def incubation_labels(patches: torch.Tensor, mask: Union[MaskSet, torch.Tensor], codebook: PatchCodebook,
                      model) -> torch.Tensor:
    """Supervision target per position: the token whose reconstruction is most cosine-similar
    to the true patch (lowest index on ties).

    ``model`` must expose ``embed(patches)`` and ``reconstruct(embedded)``. Returns int64
    labels ``[..., K]``; entries at unmasked positions are 0.
    """
    mask = as_bool_mask(mask, patches.shape[-2])
    was_training = getattr(model, "training", False)
    if was_training:
        model.eval()
    try:
        recon = candidate_reconstructions(patches, mask, codebook, model)
    finally:
        if was_training:
            model.train()
    sims = cosine_similarity(recon, patches.unsqueeze(0).expand_as(recon))  # [n, ..., K]
    labels = argmax_lowest(sims, dim=0)
    return torch.where(mask, labels, torch.zeros_like(labels))


def incubation_corrupt(selection: TokenSelection, fraction: float, rng: torch.Generator) -> TokenSelection:
    """Resample ``round(fraction * |M|)`` uniformly chosen masked positions to uniform-random tokens.

    Applied independently to each image in a batch.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    n = selection.logits.shape[-1]
    mask = selection.mask.reshape(-1, selection.mask.shape[-1])
    alpha = selection.alpha.reshape(mask.shape).clone()
    for b in range(mask.shape[0]):
        positions = mask[b].nonzero().squeeze(-1)
        count = round_half_up(fraction * positions.numel())
        if count == 0:
            continue
        chosen = positions[torch.randperm(positions.numel(), generator=rng)[:count]]
        alpha[b, chosen] = torch.randint(0, n, (count,), generator=rng)
    return selection.with_alpha(alpha.reshape(selection.alpha.shape))
