"""Log-Mel front end: a fixed numpy reference and a trainable convolutional twin.

The trainable version is a strided Conv1d holding a windowed Fourier basis
(real and imaginary banks) followed by a linear Mel projection. Initialized
from the reference it reproduces ``reference_logmel`` to float precision.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Waveform

_POWER_FLOOR = 1e-20


@dataclass
class MelFrontConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop: int = 256
    win: int = 1024
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 11025.0
    eps: float = 1e-5
    trainable: bool = False

    def __post_init__(self):
        if not (0 < self.hop <= self.win <= self.n_fft):
            raise ValueError(f"need 0 < hop <= win <= n_fft, got {self.hop}, {self.win}, {self.n_fft}")
        if not (0 <= self.f_min < self.f_max <= self.sample_rate / 2):
            raise ValueError(f"need 0 <= f_min < f_max <= sr/2, got {self.f_min}, {self.f_max}")
        if self.n_mels < 1 or self.eps <= 0:
            raise ValueError("n_mels must be >= 1 and eps > 0")

    @property
    def n_freqs(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def to_dict(self):
        return asdict(self)


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (n_mels, T), natural-log Mel magnitude
    hop: int
    sample_rate: int

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


# Slaney Mel scale: linear below 1 kHz, logarithmic above.
_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = math.log(6.4) / 27.0


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    mel = f / _F_SP
    log_region = f >= _MIN_LOG_HZ
    mel = np.where(log_region, _MIN_LOG_MEL + np.log(np.maximum(f, 1e-10) / _MIN_LOG_HZ) / _LOGSTEP, mel)
    return mel


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = m * _F_SP
    return np.where(m >= _MIN_LOG_MEL, _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL)), f)


def mel_band_edges(cfg: MelFrontConfig) -> np.ndarray:
    """``n_mels + 2`` band edge frequencies in Hz; channel i peaks at edge i+1."""
    mels = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_center_frequencies(cfg: MelFrontConfig) -> np.ndarray:
    return mel_band_edges(cfg)[1:-1]


def mel_filterbank(cfg: MelFrontConfig) -> np.ndarray:
    """Triangular filters with Slaney area normalization, shape ``(n_mels, n_fft//2 + 1)``."""
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_freqs)
    edges = mel_band_edges(cfg)
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def analysis_window(cfg: MelFrontConfig) -> np.ndarray:
    """Periodic Hann of length ``win``, zero-padded (centered) to ``n_fft``."""
    n = np.arange(cfg.win)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.win)
    left = (cfg.n_fft - cfg.win) // 2
    out = np.zeros(cfg.n_fft)
    out[left:left + cfg.win] = w
    return out


def reflect_indices(length: int, pad: int) -> np.ndarray:
    """Source indices for reflect padding by ``pad`` on both sides.

    Repeats the reflection when ``pad >= length`` (numpy's ``reflect`` mode).
    """
    idx = np.arange(-pad, length + pad)
    if length == 1:
        return np.zeros_like(idx)
    period = 2 * (length - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= length, period - idx, idx)


def num_frames(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


def reference_logmel(w: Waveform, cfg: MelFrontConfig) -> MelSpectrogram:
    """Exact log-Mel spectrogram (float64): centered reflect-padded STFT magnitude -> Mel -> log."""
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {w.sample_rate} does not match front end {cfg.sample_rate}")
    x = w.samples.astype(np.float64)
    padded = x[reflect_indices(len(x), cfg.n_fft // 2)]
    n_frames = num_frames(len(x), cfg.hop)
    starts = np.arange(n_frames) * cfg.hop
    frames = padded[starts[:, None] + np.arange(cfg.n_fft)[None, :]]
    spec = np.abs(np.fft.rfft(frames * analysis_window(cfg), axis=1))
    mel = mel_filterbank(cfg) @ spec.T
    return MelSpectrogram(np.log(np.maximum(mel, cfg.eps)), cfg.hop, cfg.sample_rate)


def floor_matrix(cfg: MelFrontConfig, n_frames: int) -> np.ndarray:
    return np.full((cfg.n_mels, n_frames), math.log(cfg.eps))


def init_from_reference(cfg: MelFrontConfig) -> dict:
    """Parameters reproducing ``reference_logmel``.

    ``analysis``: ``(2 * n_freqs, 1, n_fft)`` windowed cosine bank stacked on
    the negated sine bank; ``mel``: ``(n_mels, n_freqs)`` filterbank.
    """
    n = np.arange(cfg.n_fft)
    k = np.arange(cfg.n_freqs)
    phase = 2 * np.pi * np.outer(k, n) / cfg.n_fft
    window = analysis_window(cfg)
    basis = np.concatenate([np.cos(phase) * window, -np.sin(phase) * window], axis=0)
    return {
        "analysis": torch.tensor(basis[:, None, :], dtype=torch.float32),
        "mel": torch.tensor(mel_filterbank(cfg), dtype=torch.float32),
    }


class LearnableLogMel(nn.Module):
    """Conv1d STFT + linear Mel projection + fixed log floor.

    Takes ``(B, L)`` or ``(L,)`` waveforms and returns ``(B, n_mels, T)`` with
    ``T = ceil(L / hop)``.
    """

    def __init__(self, cfg: MelFrontConfig, initialize: bool = True):
        super().__init__()
        self.cfg = cfg
        self.analysis = nn.Parameter(torch.zeros(2 * cfg.n_freqs, 1, cfg.n_fft))
        self.mel = nn.Parameter(torch.zeros(cfg.n_mels, cfg.n_freqs))
        self.register_buffer("initialized", torch.zeros(()))
        if initialize:
            self.reset_to_reference()
        self.set_trainable(cfg.trainable)

    def reset_to_reference(self):
        params = init_from_reference(self.cfg)
        with torch.no_grad():
            self.analysis.copy_(params["analysis"])
            self.mel.copy_(params["mel"])
            self.initialized.fill_(1.0)

    def set_trainable(self, flag: bool):
        for p in (self.analysis, self.mel):
            p.requires_grad_(flag)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not bool(self.initialized):
            raise RuntimeError("Mel front end parameters are uninitialized; call reset_to_reference()")
        squeeze = x.dim() == 1
        if squeeze:
            x = x[None]
        length = x.shape[-1]
        idx = torch.from_numpy(reflect_indices(length, self.cfg.n_fft // 2)).to(x.device)
        padded = x.index_select(-1, idx)[:, None, :]
        n_frames = num_frames(length, self.cfg.hop)
        spec = F.conv1d(padded, self.analysis, stride=self.cfg.hop)[..., :n_frames]
        re, im = spec.chunk(2, dim=1)
        mag = (re * re + im * im).clamp_min(_POWER_FLOOR).sqrt()
        mel = torch.matmul(self.mel, mag)
        out = mel.clamp_min(self.cfg.eps).log()
        return out[0] if squeeze else out

    def logmel(self, w: Waveform) -> MelSpectrogram:
        """Convenience wrapper returning a numpy ``MelSpectrogram``."""
        if w.sample_rate != self.cfg.sample_rate:
            raise ValueError(f"sample rate {w.sample_rate} does not match front end {self.cfg.sample_rate}")
        p = self.analysis
        with torch.no_grad():
            values = self(torch.as_tensor(w.samples, dtype=p.dtype, device=p.device))
        return MelSpectrogram(values.cpu().numpy(), self.cfg.hop, self.cfg.sample_rate)


def learnable_logmel(w: Waveform, front: LearnableLogMel) -> MelSpectrogram:
    return front.logmel(w)
