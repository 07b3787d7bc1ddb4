"""Instrument- and piano-roll-conditioned spectrogram masking separator."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dsp, symbolic
from .errors import DomainError
from .film import ConditionEmbedding, FiLM
from .taxonomy import N_CLASSES, condition_vector

FUSION_MODES = ("sum", "concat", "spec_patch")
ROLL_FORMS = ("posterior", "binary")


@dataclass
class SeparatorConfig:
    depth: int = 4
    base_channels: int = 16
    fusion_mode: str = "sum"
    roll_form: str = "posterior"
    ste: bool = False
    film_dim: int = 32
    n_fft: int = dsp.STFT_WINDOW

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise DomainError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.roll_form not in ROLL_FORMS:
            raise DomainError(f"unknown roll form {self.roll_form!r}")
        if self.ste and self.roll_form != "binary":
            raise DomainError("the straight-through estimator needs roll_form='binary'")
        if self.depth < 1:
            raise DomainError("depth must be >= 1")

    @classmethod
    def tiny(cls, **overrides):
        base = dict(base_channels=4, film_dim=8)
        base.update(overrides)
        return cls(**base)

    @property
    def n_bins(self):
        return self.n_fft // 2 + 1

    def to_dict(self):
        return asdict(self)


class _BinarizeSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, threshold):
        return (x >= threshold).to(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def binarize_ste(posterior, threshold=0.5):
    """Hard threshold forward, identity gradient backward."""
    return _BinarizeSTE.apply(posterior, threshold)


def binarize(posterior, threshold=0.5):
    return (posterior >= threshold).to(posterior.dtype).detach()


class Encoder(nn.Module):
    def __init__(self, c_in, c_out, film_dim):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.norm = nn.BatchNorm2d(c_out)
        self.film = FiLM(film_dim, c_out)

    def forward(self, x, emb):
        return self.film(F.leaky_relu(self.norm(self.conv(x)), 0.2), emb)


class Decoder(nn.Module):
    def __init__(self, c_in, c_skip, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in + c_skip, c_out, 3, padding=1)
        self.norm = nn.BatchNorm2d(c_out)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")[..., :skip.shape[-2], :skip.shape[-1]]
        return F.relu(self.norm(self.conv(torch.cat([x, skip], dim=1))))


class Separator(nn.Module):
    """Estimate one instrument's waveform from a mixture.

    ``forward(mix, cond, roll)`` takes ``(B, L)`` audio, ``(B, 39)``
    conditions and a ``(B, T, 88)`` frame roll with ``T = L // 160``, and
    returns ``(waveform, mask)`` with mask shape ``(B, T, 513)``.
    """

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or SeparatorConfig()
        self.project = nn.Linear(symbolic.N_PITCHES, cfg.n_bins)
        self.embed = ConditionEmbedding(cfg.film_dim)
        c_in = 2 if cfg.fusion_mode == "concat" else 1
        chans = [cfg.base_channels * 2 ** i for i in range(cfg.depth)]
        self.input_norm = nn.BatchNorm2d(c_in)
        self.encoders = nn.ModuleList()
        prev = c_in
        for c in chans:
            self.encoders.append(Encoder(prev, c, cfg.film_dim))
            prev = c
        self.decoders = nn.ModuleList()
        skips = [c_in] + chans[:-1]
        for c_skip in reversed(skips):
            out = max(c_skip, cfg.base_channels)
            self.decoders.append(Decoder(prev, c_skip, out))
            prev = out
        self.to_mask = nn.Conv2d(prev, 1, 1)

    def project_roll(self, roll):
        if roll.shape[-1] != symbolic.N_PITCHES:
            raise DomainError(f"roll must have 88 pitch columns, got {roll.shape[-1]}")
        return self.project(roll)

    def prepare_roll(self, roll):
        if self.cfg.roll_form == "posterior":
            return roll
        return binarize_ste(roll) if self.cfg.ste else binarize(roll)

    def fuse(self, mag, roll_feat):
        """Network input ``(B, C, T, F)`` and the feature the mask multiplies."""
        if mag.shape != roll_feat.shape:
            raise DomainError(f"magnitude {tuple(mag.shape)} vs roll features {tuple(roll_feat.shape)}")
        mode = self.cfg.fusion_mode
        if mode == "concat":
            return torch.stack([mag, roll_feat], dim=1), mag
        summed = mag + roll_feat
        return summed[:, None], summed if mode == "spec_patch" else mag

    def estimate_mask(self, features, cond):
        # signed log compression keeps the heavy-tailed magnitudes in range
        x = torch.sign(features) * torch.log1p(features.abs())
        x = self.input_norm(x)
        emb = self.embed(cond.to(features.dtype))
        skips = []
        for enc in self.encoders:
            skips.append(x)
            x = enc(x, emb)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(x, skip)
        return torch.sigmoid(self.to_mask(x))[:, 0]

    @staticmethod
    def synthesize(spec, mask, base, length, n_fft=dsp.STFT_WINDOW):
        """Waveform from ``mask * base`` with the phase of ``spec``."""
        phase = spec / spec.abs().clamp_min(1e-12)
        return dsp.istft_torch(phase * (mask * base), length, n_fft)

    def forward(self, mix, cond, roll):
        if cond.shape != (mix.shape[0], N_CLASSES):
            raise DomainError(f"condition shape {tuple(cond.shape)} does not match batch")
        spec = dsp.stft_torch(mix, self.cfg.n_fft)
        if roll.shape[:2] != spec.shape[:2]:
            raise DomainError(f"roll {tuple(roll.shape)} is not frame-aligned with "
                              f"{spec.shape[1]} STFT frames")
        mag = spec.abs()
        roll_feat = self.project_roll(self.prepare_roll(roll.to(mag.dtype)))
        features, base = self.fuse(mag, roll_feat)
        mask = self.estimate_mask(features, cond)
        return self.synthesize(spec, mask, base, mix.shape[-1], self.cfg.n_fft), mask


def loss_mss(pred, target):
    """Mean squared error over samples."""
    if pred.shape != target.shape:
        raise DomainError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


@torch.no_grad()
def separate_piece(model, mix, rolls, window_frames=1000):
    """Separate ``mix`` once per instrument in ``rolls``.

    ``rolls`` maps instrument index to a frame-roll array ``(T, 88)`` (or a
    :class:`~jointist.symbolic.PianoRoll`). Windows are non-overlapping and
    processed as one batch per instrument. Returns ``{instrument: waveform}``.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    mix = np.asarray(dsp.hop_align(np.asarray(mix)))
    n_frames = len(mix) // dsp.HOP
    window_frames = min(window_frames, n_frames)
    n_win = -(-n_frames // window_frames)
    win = window_frames * dsp.HOP
    padded = np.zeros(n_win * win, dtype=np.float64)
    padded[:len(mix)] = mix
    batch = torch.as_tensor(padded.reshape(n_win, win), dtype=dtype)
    out = {}
    for inst, roll in sorted(rolls.items()):
        frame = roll.frame if isinstance(roll, symbolic.PianoRoll) else np.asarray(roll)
        if frame.shape[0] != n_frames:
            raise DomainError(f"roll for {inst} has {frame.shape[0]} frames, mix has {n_frames}")
        r = np.zeros((n_win * window_frames, symbolic.N_PITCHES))
        r[:n_frames] = frame
        r = torch.as_tensor(r.reshape(n_win, window_frames, -1), dtype=dtype)
        cond = torch.as_tensor(condition_vector([inst]), dtype=dtype).expand(n_win, -1)
        wave, _ = model(batch, cond, r)
        out[inst] = wave.reshape(-1)[:len(mix)].numpy().astype(np.float32)
    return out
