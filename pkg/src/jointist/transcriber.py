"""Instrument-conditioned onsets-and-frames transcription."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import dsp, symbolic
from .errors import DomainError
from .film import ConditionEmbedding, FiLM
from .recognizer import bce
from .taxonomy import N_CLASSES, condition_vector

log = logging.getLogger(__name__)


@dataclass
class TranscriberConfig:
    conv_channels: tuple = (48, 96)
    fc_dim: int = 768
    stack_rnn_hidden: int = 128
    film_dim: int = 64
    final_rnn_hidden: int = 88
    dropout: float = 0.25
    n_mels: int = dsp.N_MELS
    strict: bool = True
    # initial output rates; sparse targets train far faster from a matching bias
    onset_prior: float | None = 0.002
    frame_prior: float | None = 0.02

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        if len(self.conv_channels) != 2:
            raise DomainError("conv_channels takes two widths")
        for p in (self.onset_prior, self.frame_prior):
            if p is not None and not 0.0 < p < 1.0:
                raise DomainError(f"prior {p} outside (0, 1)")

    @classmethod
    def tiny(cls, **overrides):
        base = dict(conv_channels=(8, 16), fc_dim=64, stack_rnn_hidden=32, film_dim=16)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)


class FilmConv(nn.Module):
    """conv -> batch norm -> ReLU -> FiLM."""

    def __init__(self, c_in, c_out, film_dim):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.BatchNorm2d(c_out)
        self.film = FiLM(film_dim, c_out)

    def forward(self, x, emb):
        return self.film(torch.relu(self.norm(self.conv(x))), emb)


class AcousticStack(nn.Module):
    """Conv stack with FiLM after each block, then a biGRU and sigmoid head."""

    def __init__(self, cfg):
        super().__init__()
        c1, c2 = cfg.conv_channels
        self.convs = nn.ModuleList([
            FilmConv(1, c1, cfg.film_dim),
            FilmConv(c1, c1, cfg.film_dim),
            FilmConv(c1, c2, cfg.film_dim),
        ])
        self.pool = nn.MaxPool2d((1, 2))
        self.drop = nn.Dropout(cfg.dropout)
        self.fc = nn.Linear(c2 * (cfg.n_mels // 4), cfg.fc_dim)
        self.rnn = nn.GRU(cfg.fc_dim, cfg.stack_rnn_hidden, batch_first=True,
                          bidirectional=True)
        self.head = nn.Linear(2 * cfg.stack_rnn_hidden, symbolic.N_PITCHES)

    def forward(self, x, emb):
        # x: (B, 1, T, F)
        h = self.convs[0](x, emb)
        h = self.drop(self.pool(self.convs[1](h, emb)))
        h = self.drop(self.pool(self.convs[2](h, emb)))
        h = h.permute(0, 2, 1, 3).flatten(2)     # (B, T, C * F/4)
        h = self.drop(torch.relu(self.fc(h)))
        h, _ = self.rnn(h)
        return torch.sigmoid(self.head(h))


class Transcriber(nn.Module):
    """Onset and frame posteriors for one instrument per batch row.

    ``forward(mel, cond)`` takes ``(B, T, 229)`` log-mel and ``(B, 39)``
    one-hot conditions, and returns ``(onset, frame)``, each ``(B, T, 88)``.
    """

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or TranscriberConfig()
        self.input_norm = nn.BatchNorm1d(cfg.n_mels)
        self.embed = ConditionEmbedding(cfg.film_dim)
        self.onset_stack = AcousticStack(cfg)
        self.frame_stack = AcousticStack(cfg)
        self.combine = nn.GRU(2 * symbolic.N_PITCHES, cfg.final_rnn_hidden,
                              batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * cfg.final_rnn_hidden, symbolic.N_PITCHES)
        with torch.no_grad():
            for layer, prior in ((self.onset_stack.head, cfg.onset_prior),
                                 (self.frame_stack.head, cfg.frame_prior),
                                 (self.out, cfg.frame_prior)):
                if prior is not None:
                    layer.bias.fill_(float(np.log(prior / (1.0 - prior))))

    def film_layers(self):
        return [m for m in self.modules() if isinstance(m, FiLM)]

    def forward(self, mel, cond):
        if mel.dim() != 3 or mel.shape[-1] != self.cfg.n_mels:
            raise DomainError(f"expected (B, T, {self.cfg.n_mels}) log-mel, got {tuple(mel.shape)}")
        if cond.shape != (mel.shape[0], N_CLASSES):
            raise DomainError(f"condition shape {tuple(cond.shape)} does not match batch")
        if self.cfg.strict and not _is_one_hot(cond):
            raise DomainError("transcriber conditions must be one-hot")
        x = self.input_norm(mel.transpose(1, 2)).transpose(1, 2)[:, None]
        emb = self.embed(cond.to(mel.dtype))
        onset = self.onset_stack(x, emb)
        frame = self.frame_stack(x, emb)
        h, _ = self.combine(torch.cat([onset, frame], dim=-1))
        return onset, torch.sigmoid(self.out(h))


def _is_one_hot(cond):
    binary = torch.all((cond == 0) | (cond == 1))
    return bool(binary and torch.all(cond.sum(dim=1) == 1))


def loss_t(pred, target):
    """Sum over {onset, frame} of mean binary cross-entropy."""
    (p_on, p_fr), (t_on, t_fr) = pred, target
    if p_on.shape != t_on.shape or p_fr.shape != t_fr.shape:
        raise DomainError(f"prediction {tuple(p_on.shape)} vs target {tuple(t_on.shape)}")
    return bce(p_on, t_on) + bce(p_fr, t_fr)


@torch.no_grad()
def transcribe_rolls(model, mel, conditions, window_frames=1000):
    """Posterior rolls ``{instrument: PianoRoll}`` for a whole piece.

    The piece is cut into non-overlapping windows that go through the model
    as one batch per condition; windowed outputs are concatenated, so notes
    may cross window boundaries.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    mel = torch.as_tensor(np.asarray(mel), dtype=dtype)
    n = mel.shape[0]
    window_frames = min(window_frames, n)
    n_win = -(-n // window_frames)
    padded = torch.full((n_win * window_frames, mel.shape[1]), float(np.log(dsp.LOG_EPS)),
                        dtype=dtype)
    padded[:n] = mel
    batch = padded.reshape(n_win, window_frames, -1)
    rolls = {}
    for inst in sorted(conditions):
        cond = torch.as_tensor(condition_vector([inst]), dtype=dtype).expand(n_win, -1)
        onset, frame = model(batch, cond)
        rolls[inst] = symbolic.PianoRoll(onset.reshape(-1, symbolic.N_PITCHES)[:n].numpy(),
                                         frame.reshape(-1, symbolic.N_PITCHES)[:n].numpy(),
                                         inst)
    return rolls


def transcribe_piece(model, audio, conditions, onset_threshold=0.5, frame_threshold=0.5,
                     window_frames=1000):
    """Transcribe ``audio`` once per condition into ``{instrument: notes}``."""
    conditions = set(conditions)
    if not conditions:
        log.warning("transcribe_piece called with no conditions; nothing to transcribe")
        return {}
    mel = dsp.logmel(np.asarray(dsp.hop_align(np.asarray(audio)), dtype=np.float32))
    rolls = transcribe_rolls(model, mel, conditions, window_frames)
    return {inst: symbolic.decode_notes(roll, onset_threshold, frame_threshold)
            for inst, roll in rolls.items()}
