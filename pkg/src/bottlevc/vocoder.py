"""Non-autoregressive Mel inversion.

``Generator`` is a MelGAN-style stack of weight-normalized transposed
convolutions and dilated residual blocks; ``DiscriminatorBank`` holds the
multi-scale waveform critics used for adversarial training. ``griffin_lim``
is a deterministic, parameter-free inverter used as an oracle and fallback.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from .corpus import Waveform
from .melfront import MelFrontConfig, MelSpectrogram, mel_filterbank


@dataclass
class GeneratorConfig:
    n_mels: int = 80
    upsample_factors: list = field(default_factory=lambda: [8, 8, 2, 2])
    base_width: int = 32
    n_residual: int = 3  # dilations 1, 3, 9, ...
    seed: int = 0

    @property
    def hop(self) -> int:
        return math.prod(self.upsample_factors)

    @property
    def dilations(self) -> list[int]:
        return [3 ** j for j in range(self.n_residual)]

    def to_dict(self):
        return asdict(self)


@dataclass
class DiscriminatorConfig:
    n_scales: int = 3
    base_width: int = 16
    max_width: int = 1024
    n_layers: int = 4
    downsampling: int = 4
    seed: int = 1

    def to_dict(self):
        return asdict(self)


def _pad(x, left, right):
    """Reflect padding, falling back to edge replication when the input is too short."""
    mode = "reflect" if x.shape[-1] > max(left, right) else "replicate"
    return F.pad(x, (left, right), mode=mode)


class _PadConv(nn.Module):
    def __init__(self, c_in, c_out, kernel_size, dilation=1):
        super().__init__()
        self.pad = dilation * (kernel_size - 1) // 2
        self.conv = weight_norm(nn.Conv1d(c_in, c_out, kernel_size, dilation=dilation))

    def forward(self, x):
        return self.conv(_pad(x, self.pad, self.pad))


class ResidualBlock(nn.Module):
    def __init__(self, width, dilation):
        super().__init__()
        self.block = nn.Sequential(
            nn.LeakyReLU(0.2),
            _PadConv(width, width, 3, dilation=dilation),
            nn.LeakyReLU(0.2),
            weight_norm(nn.Conv1d(width, width, 1)),
        )
        self.shortcut = weight_norm(nn.Conv1d(width, width, 1))

    def forward(self, x):
        return self.shortcut(x) + self.block(x)


class Generator(nn.Module):
    """``(B, n_mels, T)`` log-Mel to ``(B, hop * T)`` waveform in one forward pass."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            mult = 2 ** len(cfg.upsample_factors)
            layers = [_PadConv(cfg.n_mels, mult * cfg.base_width, 7)]
            for r in cfg.upsample_factors:
                c_in, c_out = mult * cfg.base_width, max(1, mult * cfg.base_width // 2)
                layers += [
                    nn.LeakyReLU(0.2),
                    weight_norm(nn.ConvTranspose1d(
                        c_in, c_out, kernel_size=2 * r, stride=r,
                        padding=r // 2 + r % 2, output_padding=r % 2,
                    )),
                ]
                layers += [ResidualBlock(c_out, d) for d in cfg.dilations]
                mult //= 2
            layers += [nn.LeakyReLU(0.2), _PadConv(max(1, mult * cfg.base_width), 1, 7), nn.Tanh()]
            self.net = nn.Sequential(*layers)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.shape[1] != self.cfg.n_mels:
            raise ValueError(f"expected {self.cfg.n_mels} Mel channels, got {mel.shape[1]}")
        return self.net(mel)[:, 0]

    def generate(self, mel: MelSpectrogram) -> Waveform:
        p = next(self.parameters())
        x = torch.as_tensor(mel.values, dtype=p.dtype, device=p.device)[None]
        with torch.no_grad():
            y = self(x)[0]
        return Waveform(y.cpu().numpy(), mel.sample_rate)


class ScaleDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        layers = [nn.Sequential(_PadConv(1, cfg.base_width, 15), nn.LeakyReLU(0.2))]
        nf = cfg.base_width
        s = cfg.downsampling
        for _ in range(cfg.n_layers):
            nf_prev, nf = nf, min(nf * s, cfg.max_width)
            layers.append(nn.Sequential(
                weight_norm(nn.Conv1d(nf_prev, nf, kernel_size=s * 10 + 1, stride=s,
                                      padding=s * 5, groups=max(1, math.gcd(nf_prev, nf) // 4))),
                nn.LeakyReLU(0.2),
            ))
        nf_prev, nf = nf, min(nf * 2, cfg.max_width)
        layers.append(nn.Sequential(weight_norm(nn.Conv1d(nf_prev, nf, 5, padding=2)), nn.LeakyReLU(0.2)))
        layers.append(weight_norm(nn.Conv1d(nf, 1, 3, padding=1)))
        self.layers = nn.ModuleList(layers)

    def forward(self, x):
        features = []
        for layer in self.layers:
            x = layer(x)
            features.append(x)
        return features[-1], features[:-1]


def _pool(x):
    return F.avg_pool1d(x, 4, stride=2, padding=1, count_include_pad=False)


def pooled_length(n: int) -> int:
    return (n + 2 - 4) // 2 + 1


class DiscriminatorBank(nn.Module):
    """Scale ``i`` sees the waveform average-pooled ``i`` times (rate / 2**i)."""

    MIN_LEN = 8  # reflection pad of the first layer

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.scales = nn.ModuleList([ScaleDiscriminator(cfg) for _ in range(cfg.n_scales)])

    def min_input_length(self) -> int:
        n = self.MIN_LEN
        while True:
            m = n
            for _ in range(self.cfg.n_scales - 1):
                m = pooled_length(m)
            if m >= self.MIN_LEN:
                return n
            n += 1

    def forward(self, wav: torch.Tensor):
        """``wav``: ``(B, L)``. Returns ``[(score_map, feature_maps), ...]`` per scale."""
        if wav.shape[-1] < self.min_input_length():
            raise ValueError(
                f"input of {wav.shape[-1]} samples is shorter than the minimum {self.min_input_length()}"
            )
        x = wav[:, None, :]
        out = []
        for i, d in enumerate(self.scales):
            if i > 0:
                x = _pool(x)
            out.append(d(x))
        return out


def discriminate(wav: Waveform, bank: DiscriminatorBank):
    p = next(bank.parameters())
    x = torch.as_tensor(wav.samples, dtype=p.dtype, device=p.device)[None]
    with torch.no_grad():
        return bank(x)


def mel_pseudo_inverse(mel_mag: np.ndarray, cfg: MelFrontConfig) -> np.ndarray:
    """Linear magnitude estimate from Mel magnitudes.

    Each channel is divided by its filter area (band average), then projected
    back with the transposed filterbank normalized per frequency bin, so a flat
    spectrum maps back to itself.
    """
    fb = mel_filterbank(cfg)
    band_avg = mel_mag / fb.sum(axis=1, keepdims=True)
    cover = fb.sum(axis=0)
    lin = fb.T @ band_avg
    return np.where(cover[:, None] > 0, lin / np.maximum(cover, 1e-12)[:, None], 0.0)


def _stft(x, cfg, window):
    return torch.stft(x, cfg.n_fft, hop_length=cfg.hop, win_length=cfg.win, window=window,
                      center=True, pad_mode="reflect", return_complex=True)


def griffin_lim(mel: MelSpectrogram, cfg: MelFrontConfig, n_iters: int = 60, return_history: bool = False):
    """Invert a log-Mel spectrogram by Griffin-Lim phase iteration from zero phase.

    Returns a waveform of ``hop * T`` samples; with ``return_history`` also the
    spectral convergence ``||S - |STFT(x)||| / ||S||`` after each iteration.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    n_frames = mel.values.shape[1]
    length = cfg.hop * n_frames
    target = torch.from_numpy(mel_pseudo_inverse(np.exp(mel.values), cfg))
    window = torch.hann_window(cfg.win, dtype=torch.float64)
    norm = torch.linalg.norm(target).clamp_min(1e-12)

    def istft(spec):
        return torch.istft(spec, cfg.n_fft, hop_length=cfg.hop, win_length=cfg.win,
                           window=window, center=True, length=length)

    x = istft(target.to(torch.complex128))
    history = []
    for _ in range(n_iters):
        spec = _stft(x, cfg, window)[:, :n_frames]
        history.append(float(torch.linalg.norm(target - spec.abs()) / norm))
        x = istft(target * torch.exp(1j * spec.angle()))
    spec = _stft(x, cfg, window)[:, :n_frames]
    history.append(float(torch.linalg.norm(target - spec.abs()) / norm))
    out = Waveform(x.numpy().astype(np.float32), cfg.sample_rate)
    return (out, history[1:]) if return_history else out


def import_generator_params(generator: Generator, path) -> list[str]:
    """Load externally trained generator weights from a parameter archive.

    The archive header must carry ``"kind": "vocoder-params"`` and an integer
    ``"version"``; an optional ``"name_map"`` renames external parameter
    names onto this module's ``state_dict`` keys. Returns the loaded keys.
    """
    from .checkpoint import read_archive

    header, tensors = read_archive(path)
    if header.get("kind") != "vocoder-params":
        raise ValueError(f"{path} is not a vocoder parameter archive (kind={header.get('kind')!r})")
    if int(header.get("version", 0)) != 1:
        raise ValueError(f"unsupported vocoder archive version {header.get('version')}")
    name_map = header.get("name_map", {})
    state = {name_map.get(k, k): v for k, v in tensors.items()}
    own = generator.state_dict()
    missing = sorted(set(own) - set(state))
    if missing:
        raise ValueError(f"vocoder archive lacks parameters: {missing[:5]}")
    for k in own:
        if tuple(own[k].shape) != tuple(state[k].shape):
            raise ValueError(f"shape mismatch for {k}: {tuple(state[k].shape)} vs {tuple(own[k].shape)}")
    generator.load_state_dict({k: state[k] for k in own})
    return sorted(own)
