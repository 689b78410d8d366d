"""Speaker-conditioned autoencoder with a frequency and a temporal bottleneck.

Layout follows the AutoVC lineage: convolutional encoder + BLSTM whose output
is subsampled in time, zero-order-hold upsampling, an LSTM/conv decoder and a
residual PostNet. All tensors are channel-first: ``(batch, channels, frames)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    n_speakers: int = 2
    n_mels: int = 80
    dim_neck: int = 32  # code dimension d
    freq: int = 32  # temporal downsampling factor k
    enc_width: int = 512
    enc_layers: int = 3
    kernel_size: int = 5
    dec_pre_width: int = 512
    dec_width: int = 512
    dec_layers: int = 3
    dec_lstm_width: int = 1024
    dec_lstm_layers: int = 2
    postnet_width: int = 512
    postnet_layers: int = 5
    # fixed affine map of log-Mel values to roughly zero mean, unit scale
    mel_offset: float = -5.0
    mel_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.dim_neck < 2 or self.dim_neck % 2:
            raise ValueError(f"dim_neck must be an even number >= 2, got {self.dim_neck}")
        if self.freq < 1:
            raise ValueError(f"freq must be >= 1, got {self.freq}")
        if self.n_speakers < 1:
            raise ValueError("n_speakers must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")

    def to_dict(self):
        return asdict(self)


class AutoencoderOutput(NamedTuple):
    pre_postnet: torch.Tensor
    post_postnet: torch.Tensor
    codes: torch.Tensor


def one_hot(index, n_speakers: int, dtype=torch.float32) -> torch.Tensor:
    index = torch.as_tensor(index, dtype=torch.long)
    if (index < 0).any() or (index >= n_speakers).any():
        raise ValueError(f"speaker index out of range for registry of size {n_speakers}")
    return F.one_hot(index, n_speakers).to(dtype)


def downsample_indices(n_frames: int, k: int) -> list[int]:
    """Last frame of each block of ``k``; a trailing partial block keeps its last frame."""
    if k < 1:
        raise ValueError("k must be >= 1")
    idx = list(range(k - 1, n_frames, k))
    if n_frames % k:
        idx.append(n_frames - 1)
    return idx


def downsample_time(h, k: int):
    """Keep frames ``k-1, 2k-1, ...`` along the last axis (tensor or ndarray)."""
    idx = downsample_indices(h.shape[-1], k)
    if isinstance(h, torch.Tensor):
        return h.index_select(-1, torch.tensor(idx, device=h.device))
    return np.take(h, idx, axis=-1)


def causal_upsample(c, k: int, n_out: int):
    """Zero-order hold: output frame t copies code ``t // k``."""
    n_codes = c.shape[-1]
    if n_out > k * n_codes:
        raise ValueError(f"cannot upsample {n_codes} codes by {k} to {n_out} frames")
    idx = np.arange(n_out) // k
    if isinstance(c, torch.Tensor):
        return c.index_select(-1, torch.from_numpy(idx).to(c.device))
    return np.take(c, idx, axis=-1)


def _norm_groups(width: int) -> int:
    return max(1, width // 32)


class ConvBlock(nn.Sequential):
    def __init__(self, c_in, c_out, kernel_size, activation=True):
        layers = [
            nn.Conv1d(c_in, c_out, kernel_size, padding=kernel_size // 2),
            nn.GroupNorm(_norm_groups(c_out), c_out),
        ]
        if activation:
            layers.append(nn.ReLU())
        super().__init__(*layers)


def _append_speaker(x: torch.Tensor, spk: torch.Tensor) -> torch.Tensor:
    return torch.cat([x, spk[:, :, None].expand(-1, -1, x.shape[-1])], dim=1)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.n_mels + cfg.n_speakers] + [cfg.enc_width] * cfg.enc_layers
        self.convs = nn.Sequential(*[
            ConvBlock(a, b, cfg.kernel_size) for a, b in zip(widths[:-1], widths[1:])
        ])
        self.lstm = nn.LSTM(cfg.enc_width, cfg.dim_neck // 2, batch_first=True, bidirectional=True)

    def frame_codes(self, mel: torch.Tensor, spk: torch.Tensor) -> torch.Tensor:
        """Per-frame encoder output ``(B, d, T)`` before temporal selection."""
        if mel.shape[1] != self.cfg.n_mels:
            raise ValueError(f"expected {self.cfg.n_mels} Mel channels, got {mel.shape[1]}")
        if spk.shape[-1] != self.cfg.n_speakers:
            raise ValueError(f"speaker embedding has size {spk.shape[-1]}, registry has {self.cfg.n_speakers}")
        x = (mel - self.cfg.mel_offset) / self.cfg.mel_scale
        h = self.convs(_append_speaker(x, spk))
        h, _ = self.lstm(h.transpose(1, 2))
        return h.transpose(1, 2)

    def forward(self, mel, spk):
        return downsample_time(self.frame_codes(mel, spk), self.cfg.freq)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.pre_lstm = nn.LSTM(cfg.dim_neck + cfg.n_speakers, cfg.dec_pre_width, batch_first=True)
        widths = [cfg.dec_pre_width] + [cfg.dec_width] * cfg.dec_layers
        self.convs = nn.Sequential(*[
            ConvBlock(a, b, cfg.kernel_size) for a, b in zip(widths[:-1], widths[1:])
        ])
        self.lstm = nn.LSTM(cfg.dec_width, cfg.dec_lstm_width, num_layers=cfg.dec_lstm_layers, batch_first=True)
        self.proj = nn.Linear(cfg.dec_lstm_width, cfg.n_mels)

    def forward(self, codes_up, spk):
        if codes_up.shape[1] != self.cfg.dim_neck:
            raise ValueError(f"expected {self.cfg.dim_neck} code channels, got {codes_up.shape[1]}")
        if spk.shape[-1] != self.cfg.n_speakers:
            raise ValueError(f"speaker embedding has size {spk.shape[-1]}, registry has {self.cfg.n_speakers}")
        h, _ = self.pre_lstm(_append_speaker(codes_up, spk).transpose(1, 2))
        h = self.convs(h.transpose(1, 2))
        h, _ = self.lstm(h.transpose(1, 2))
        return self.proj(h).transpose(1, 2)


class PostNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = [cfg.n_mels] + [cfg.postnet_width] * (cfg.postnet_layers - 1) + [cfg.n_mels]
        layers = []
        for a, b in zip(widths[:-2], widths[1:-1]):
            layers += [ConvBlock(a, b, cfg.kernel_size, activation=False), nn.Tanh()]
        layers.append(nn.Conv1d(widths[-2], widths[-1], cfg.kernel_size, padding=cfg.kernel_size // 2))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class AutoEncoder(nn.Module):
    """Encoder + causal upsampler + decoder + PostNet.

    Parameters are drawn under ``cfg.seed`` without touching the global RNG.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.encoder = Encoder(cfg)
            self.decoder = Decoder(cfg)
            self.postnet = PostNet(cfg)

    def encode(self, mel, spk):
        return self.encoder(mel, spk)

    def decode(self, codes_up, spk) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(pre_postnet, post_postnet)`` in log-Mel units."""
        pre_n = self.decoder(codes_up, spk)
        pre = pre_n * self.cfg.mel_scale + self.cfg.mel_offset
        return pre, pre + self.cfg.mel_scale * self.postnet(pre_n)

    def forward(self, mel, spk_src, spk_tgt=None) -> AutoencoderOutput:
        if spk_tgt is None:
            spk_tgt = spk_src
        codes = self.encode(mel, spk_src)
        up = causal_upsample(codes, self.cfg.freq, mel.shape[-1])
        pre, post = self.decode(up, spk_tgt)
        return AutoencoderOutput(pre, post, codes)
