"""Audio features: log-mel, STFT/iSTFT, WAV I/O and hybrid roll features.

Everything runs at 16 kHz with a 160-sample hop (100 frames per second).
Transforms are centre-padded and keep exactly ``len(samples) // 160``
frames, so features, rolls and masks line up one to one.
"""

from __future__ import annotations

from functools import lru_cache
from math import gcd

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly
from torch import nn

from .errors import DomainError

SAMPLE_RATE = 16_000
HOP = 160
MEL_WINDOW = 2048
N_MELS = 229
MEL_FMIN = 0.0
MEL_FMAX = 8000.0
STFT_WINDOW = 1024
N_BINS = STFT_WINDOW // 2 + 1
LOG_EPS = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(sample_rate=SAMPLE_RATE, n_fft=MEL_WINDOW, n_mels=N_MELS,
                   fmin=MEL_FMIN, fmax=MEL_FMAX):
    """HTK-scale triangular filters, shape ``(n_mels, n_fft // 2 + 1)``.

    Returned array is read-only and shared between callers.
    """
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (center - lower)
    falling = (upper - fft_freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_center_frequencies(n_mels=N_MELS, fmin=MEL_FMIN, fmax=MEL_FMAX):
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


@lru_cache(maxsize=None)
def _mel_tensor(dtype):
    return torch.tensor(mel_filterbank(), dtype=dtype)


def _as_tensor(samples):
    if isinstance(samples, torch.Tensor):
        return samples, False
    arr = np.asarray(samples)
    if not np.issubdtype(arr.dtype, np.inexact):
        arr = arr.astype(np.float64)
    return torch.from_numpy(np.ascontiguousarray(arr)), True


def _frames_for(length):
    if length == 0:
        raise DomainError("empty waveform")
    if length % HOP:
        raise DomainError(f"length {length} is not a multiple of the {HOP}-sample hop")
    return length // HOP


def _window(n, like):
    return torch.hann_window(n, periodic=True, dtype=like.dtype, device=like.device)


def _stft(x, n_fft):
    pad_mode = "reflect" if x.shape[-1] > n_fft // 2 else "constant"
    spec = torch.stft(x, n_fft, hop_length=HOP, window=_window(n_fft, x), center=True,
                      pad_mode=pad_mode, return_complex=True)
    return spec[..., :x.shape[-1] // HOP]


def logmel_torch(samples):
    """Log-mel of a ``(..., L)`` tensor; returns ``(..., L // 160, 229)``."""
    n_frames = _frames_for(samples.shape[-1])
    power = _stft(samples, MEL_WINDOW).abs() ** 2
    fb = _mel_tensor(samples.dtype)
    mel = torch.matmul(fb, power)
    assert mel.shape[-1] == n_frames
    return torch.log(mel + LOG_EPS).transpose(-1, -2)


def logmel(samples):
    """Log-mel spectrogram, ``(len // 160, 229)``; numpy in, numpy out."""
    x, was_numpy = _as_tensor(samples)
    out = logmel_torch(x)
    return out.numpy() if was_numpy else out


def stft_torch(samples, n_fft=STFT_WINDOW):
    """Complex STFT of ``(..., L)`` as ``(..., L // 160, n_fft // 2 + 1)``."""
    _frames_for(samples.shape[-1])
    return _stft(samples, n_fft).transpose(-1, -2)


def istft_torch(spec, length, n_fft=STFT_WINDOW):
    """Inverse of :func:`stft_torch` for a ``(..., T, F)`` complex tensor."""
    n_frames = _frames_for(length)
    if spec.shape[-2] != n_frames or spec.shape[-1] != n_fft // 2 + 1:
        raise DomainError(f"spectrogram {tuple(spec.shape[-2:])} does not match "
                          f"length {length} ({n_frames} frames, {n_fft // 2 + 1} bins)")
    window = _window(n_fft, spec.real)
    return torch.istft(spec.transpose(-1, -2), n_fft, hop_length=HOP, window=window,
                       center=True, length=length)


def stft(samples, n_fft=STFT_WINDOW):
    x, was_numpy = _as_tensor(samples)
    out = stft_torch(x, n_fft)
    return out.numpy() if was_numpy else out


def istft(spec, length, n_fft=STFT_WINDOW):
    s, was_numpy = _as_tensor(spec)
    out = istft_torch(s, length, n_fft)
    return out.numpy() if was_numpy else out


# ---------------------------------------------------------------------------
# WAV I/O

def resample(samples, orig_rate, target_rate=SAMPLE_RATE):
    """Polyphase windowed-sinc resampling (Kaiser window, beta 5)."""
    if orig_rate == target_rate:
        return samples
    g = gcd(int(orig_rate), int(target_rate))
    out = resample_poly(samples, target_rate // g, orig_rate // g, axis=0)
    return out.astype(samples.dtype, copy=False)


def read_wav(path):
    """Mono float32 samples at 16 kHz; 16-bit PCM and float WAV supported."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    else:
        data = data.astype(np.float32, copy=False)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return resample(data, rate)


def write_wav(path, samples, pcm16=False):
    samples = np.asarray(samples, dtype=np.float32)
    if pcm16:
        samples = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, SAMPLE_RATE, samples)


def hop_align(samples):
    """Trim to a whole number of hops."""
    return samples[:len(samples) - len(samples) % HOP]


# ---------------------------------------------------------------------------
# hybrid spectrogram + piano-roll features

def collapse_rolls(rolls, n_frames):
    """Union of frame rolls into two channels: pitched classes and drums."""
    from .taxonomy import DRUMS
    out = np.zeros((2, n_frames, 88), dtype=np.float32)
    for roll in rolls:
        if roll.n_frames != n_frames:
            raise DomainError(f"roll has {roll.n_frames} frames, spectrogram has {n_frames}")
        ch = 1 if roll.instrument == DRUMS else 0
        np.maximum(out[ch], roll.frame, out=out[ch])
    return out


class HybridFeatures(nn.Module):
    """Concatenate a spectrogram with projected two-channel piano rolls.

    Each roll channel has its own linear map from 88 pitches to the
    spectrogram's bin count, shared across time.
    """

    def __init__(self, n_bins=N_MELS):
        super().__init__()
        self.n_bins = n_bins
        self.proj = nn.ModuleList([nn.Linear(88, n_bins) for _ in range(2)])

    def forward(self, spec, rolls):
        # spec: (B, C, T, F); rolls: (B, 2, T, 88)
        if spec.shape[-2] != rolls.shape[-2]:
            raise DomainError(f"spectrogram has {spec.shape[-2]} frames, "
                              f"rolls have {rolls.shape[-2]}")
        if spec.shape[-1] != self.n_bins:
            raise DomainError(f"expected {self.n_bins} bins, got {spec.shape[-1]}")
        projected = torch.stack([p(rolls[:, i]) for i, p in enumerate(self.proj)], dim=1)
        return torch.cat([spec, projected.to(spec.dtype)], dim=1)


def hybrid_features(spec, rolls, module=None):
    """Numpy front end for :class:`HybridFeatures`.

    ``spec`` is ``(T, F)`` or ``(C, T, F)``; ``rolls`` is an iterable of
    :class:`~jointist.symbolic.PianoRoll`. Returns ``(C + 2, T, F)``.
    """
    spec = np.asarray(spec, dtype=np.float32)
    if spec.ndim == 2:
        spec = spec[None]
    n_frames, n_bins = spec.shape[1:]
    module = module if module is not None else HybridFeatures(n_bins)
    two = collapse_rolls(list(rolls), n_frames)
    with torch.no_grad():
        out = module(torch.from_numpy(spec)[None], torch.from_numpy(two)[None])
    return out[0].numpy()
