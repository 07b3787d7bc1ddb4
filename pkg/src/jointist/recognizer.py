"""Multi-label instrument recognition: CNN front end, transformer back end."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DomainError
from .taxonomy import N_CLASSES

POOLINGS = 6
MIN_FRAMES = 2 ** POOLINGS
BCE_EPS = 1e-7


@dataclass
class RecognizerConfig:
    conv_channels: list = field(default_factory=lambda: [64, 128, 256, 512, 1024, 2048])
    n_transformer_layers: int = 4
    dropout: float = 0.2
    d_model: int = 256
    n_heads: int = 8
    max_tokens: int = 1024
    n_mels: int = 229

    def __post_init__(self):
        self.conv_channels = list(self.conv_channels)
        if len(self.conv_channels) != POOLINGS:
            raise DomainError(f"need {POOLINGS} conv blocks, got {len(self.conv_channels)}")
        if any(b < a for a, b in zip(self.conv_channels, self.conv_channels[1:])):
            raise DomainError("conv_channels must be non-decreasing")
        if self.n_transformer_layers < 1:
            raise DomainError("n_transformer_layers must be >= 1")
        if self.d_model % self.n_heads:
            raise DomainError("d_model must be divisible by n_heads")

    @classmethod
    def tiny(cls, **overrides):
        base = dict(conv_channels=[4, 8, 12, 16, 24, 32], n_transformer_layers=1,
                    d_model=32, n_heads=4)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, dropout):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, stride=1, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(),
            nn.Conv2d(c_out, c_out, 3, stride=1, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(),
            nn.AvgPool2d(2),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.layers(x)


class Recognizer(nn.Module):
    """Clip-level instrument probabilities from a ``(B, 1, T, 229)`` log-mel batch."""

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or RecognizerConfig()
        chans = [1] + cfg.conv_channels
        self.input_norm = nn.BatchNorm2d(1)
        self.blocks = nn.Sequential(*[ConvBlock(a, b, cfg.dropout)
                                      for a, b in zip(chans, chans[1:])])
        self.to_model = nn.Linear(cfg.conv_channels[-1], cfg.d_model)
        self.cls_token = nn.Parameter(torch.randn(1, 1, cfg.d_model) * 0.02)
        self.pos_embedding = nn.Parameter(torch.randn(1, cfg.max_tokens + 1, cfg.d_model) * 0.02)
        layer = nn.TransformerEncoderLayer(cfg.d_model, cfg.n_heads, 4 * cfg.d_model,
                                           dropout=cfg.dropout, batch_first=True)
        self.transformer = nn.TransformerEncoder(layer, cfg.n_transformer_layers,
                                                 enable_nested_tensor=False)
        self.head = nn.Linear(cfg.d_model, N_CLASSES)

    def encode(self, x):
        """Transformer output for every token, class token first."""
        if x.dim() != 4 or x.shape[1] != 1:
            raise DomainError(f"expected (B, 1, T, F) input, got {tuple(x.shape)}")
        if x.shape[2] < MIN_FRAMES:
            raise DomainError(f"need at least {MIN_FRAMES} frames, got {x.shape[2]}")
        h = self.blocks(self.input_norm(x))        # (B, C, T/64, F/64)
        h = h.mean(dim=3).transpose(1, 2)          # (B, T', C)
        if h.shape[1] > self.cfg.max_tokens:
            raise DomainError(f"{h.shape[1]} tokens exceed max_tokens={self.cfg.max_tokens}")
        h = self.to_model(h)
        h = torch.cat([self.cls_token.expand(h.shape[0], -1, -1), h], dim=1)
        h = h + self.pos_embedding[:, :h.shape[1]]
        return self.transformer(h)

    def forward(self, x):
        return torch.sigmoid(self.head(self.encode(x)[:, 0]))


def loss_ir(pred, target):
    """Mean binary cross-entropy over batch and classes."""
    if pred.shape != target.shape:
        raise DomainError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if not torch.all((target == 0) | (target == 1)):
        raise DomainError("targets must be 0 or 1")
    return bce(pred, target)


def bce(pred, target):
    pred = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * torch.log(pred) + (1 - target) * torch.log1p(-pred)).mean()


def predict_conditions(probs, threshold=0.5):
    """Instrument indices whose probability reaches ``threshold``."""
    probs = np.asarray(probs.detach().cpu() if isinstance(probs, torch.Tensor) else probs)
    return {int(i) for i in np.flatnonzero(probs >= threshold)}


@torch.no_grad()
def recognize_piece(model, mel, window_frames=1000):
    """Piece-level probabilities: mean over non-overlapping windows.

    ``mel`` is a ``(T, 229)`` log-mel array; a trailing remainder shorter than
    the minimum clip is folded into the previous window.
    """
    model.eval()
    mel = torch.as_tensor(np.asarray(mel), dtype=next(model.parameters()).dtype)
    n = mel.shape[0]
    if n < MIN_FRAMES:
        raise DomainError(f"piece has {n} frames, need at least {MIN_FRAMES}")
    starts = list(range(0, n, window_frames))
    if len(starts) > 1 and n - starts[-1] < MIN_FRAMES:
        starts.pop()
    probs = []
    for i, s in enumerate(starts):
        e = n if i == len(starts) - 1 else s + window_frames
        probs.append(model(mel[s:e][None, None])[0])
    return torch.stack(probs).mean(0).numpy()
