"""Feature-wise linear modulation driven by instrument condition vectors."""

import torch
from torch import nn

from .errors import DomainError
from .taxonomy import N_CLASSES


def film(features, gamma, beta):
    """Apply ``gamma * features + beta`` per channel.

    ``features`` is ``(B, C, ...)``; ``gamma`` and ``beta`` are ``(B, C)`` and
    are broadcast over the trailing (time/frequency) axes.
    """
    if gamma.shape != beta.shape or gamma.shape[:2] != features.shape[:2]:
        raise DomainError(f"FiLM parameters {tuple(gamma.shape)} do not match "
                          f"features {tuple(features.shape)}")
    extra = (1,) * (features.dim() - 2)
    return gamma.reshape(*gamma.shape, *extra) * features + beta.reshape(*beta.shape, *extra)


class ConditionEmbedding(nn.Module):
    """Maps a 39-dim condition vector to a dense embedding."""

    def __init__(self, dim, n_classes=N_CLASSES):
        super().__init__()
        self.proj = nn.Linear(n_classes, dim)

    def forward(self, cond):
        return self.proj(cond)


class FiLM(nn.Module):
    """Generates per-channel (gamma, beta) from an embedding and applies them.

    ``gamma = 1 + W_g e + b_g`` so zero weights give the identity map.
    """

    def __init__(self, embed_dim, channels):
        super().__init__()
        self.channels = channels
        self.to_params = nn.Linear(embed_dim, 2 * channels)

    def params(self, embedding):
        delta_gamma, beta = self.to_params(embedding).chunk(2, dim=-1)
        return 1.0 + delta_gamma, beta

    def forward(self, features, embedding):
        if features.shape[1] != self.channels:
            raise DomainError(f"FiLM expects {self.channels} channels, got {features.shape[1]}")
        gamma, beta = self.params(embedding)
        return film(features, gamma, beta)

    @torch.no_grad()
    def make_identity(self):
        self.to_params.weight.zero_()
        self.to_params.bias.zero_()
