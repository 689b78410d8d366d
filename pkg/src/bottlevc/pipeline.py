"""End-to-end conversion model: Mel front end -> autoencoder -> vocoder."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import Checkpoint
from .config import RunConfig
from .corpus import SpeakerRegistry, Waveform, resample
from .melfront import LearnableLogMel, MelSpectrogram
from .model import AutoEncoder, AutoencoderOutput, causal_upsample, one_hot
from .vocoder import Generator, griffin_lim


class VoiceConverter(nn.Module):
    def __init__(self, config: RunConfig, registry: SpeakerRegistry):
        super().__init__()
        if len(registry) != config.model.n_speakers:
            config = replace(config, model=replace(config.model, n_speakers=len(registry)))
        self.config = config
        self.registry = registry
        self.front = LearnableLogMel(config.melfront)
        self.ae = AutoEncoder(config.model)
        self.vocoder = Generator(config.generator)

    @classmethod
    def from_checkpoint(cls, ckpt) -> "VoiceConverter":
        if not isinstance(ckpt, Checkpoint):
            ckpt = Checkpoint.load(ckpt)
        config = RunConfig.from_dict(ckpt.meta["config"])
        model = cls(config, SpeakerRegistry(ckpt.meta["registry"]))
        ckpt.load_module("model", model)
        return model.eval()

    @property
    def hop(self) -> int:
        return self.config.melfront.hop

    @property
    def sample_rate(self) -> int:
        return self.config.melfront.sample_rate

    def speaker_vector(self, speaker, batch: int = 1) -> torch.Tensor:
        idx = speaker if isinstance(speaker, int) else self.registry.index(speaker)
        p = next(self.parameters())
        return one_hot([idx] * batch, len(self.registry), dtype=p.dtype).to(p.device)

    def encode(self, mel: torch.Tensor, speaker) -> torch.Tensor:
        return self.ae.encode(mel, self.speaker_vector(speaker, mel.shape[0]))

    def convert_mel(self, mel, source, target) -> AutoencoderOutput:
        """Run the autoencoder on ``(B, 80, T)`` or a ``MelSpectrogram`` with source/target ids."""
        if isinstance(mel, MelSpectrogram):
            p = next(self.parameters())
            mel = torch.as_tensor(mel.values, dtype=p.dtype, device=p.device)[None]
        b = mel.shape[0]
        codes = self.ae.encode(mel, self.speaker_vector(source, b))
        up = causal_upsample(codes, self.ae.cfg.freq, mel.shape[-1])
        pre, post = self.ae.decode(up, self.speaker_vector(target, b))
        return AutoencoderOutput(pre, post, codes)

    def convert(self, w: Waveform, source, target, vocoder: str = "generator", gl_iters: int = 60) -> Waveform:
        """Convert a waveform from ``source`` to ``target`` speaker.

        ``vocoder`` is ``"generator"`` (the trained inverter) or ``"griffin-lim"``.
        """
        for spk in (source, target):
            if not isinstance(spk, int) and spk not in self.registry:
                self.registry.index(spk)  # raises with the known-speaker list
        if w.sample_rate != self.sample_rate:
            w = resample(w, self.sample_rate)
        if len(w) < self.hop:
            raise ValueError(f"input must be at least one hop ({self.hop} samples) long")
        p = next(self.parameters())
        with torch.no_grad():
            mel = self.front(torch.as_tensor(w.samples, dtype=p.dtype, device=p.device)[None])
            out = self.convert_mel(mel, source, target).post_postnet
            if vocoder == "generator":
                y = self.vocoder(out)[0].cpu().numpy()
                return Waveform(y, self.sample_rate)
        if vocoder in ("griffin-lim", "griffinlim"):
            m = MelSpectrogram(out[0].cpu().numpy().astype(np.float64), self.hop, self.sample_rate)
            return griffin_lim(m, self.config.melfront, gl_iters)
        raise ValueError(f"unknown vocoder {vocoder!r}")
