"""Synthetic speaker/phoneme corpus for smoke runs and probe demos.

Each speaker has its own pitch, formant scaling and spectral tilt; each
utterance is a random phoneme string rendered with a crude source-filter
model (harmonic or noise source through formant resonators), written with a
TIMIT-style ``.phn`` alignment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .corpus import PhonemeAlignment, Waveform, write_alignment, write_wav

# label -> (voiced, formant frequencies in Hz)
PHONEMES = {
    "aa": (True, (730, 1090, 2440)),
    "iy": (True, (270, 2290, 3010)),
    "uw": (True, (300, 870, 2240)),
    "eh": (True, (530, 1840, 2480)),
    "ow": (True, (570, 840, 2410)),
    "m": (True, (250, 1100, 2200)),
    "s": (False, (4500, 6500, 8000)),
    "sh": (False, (2500, 3800, 5500)),
    "f": (False, (1500, 5000, 7500)),
    "sil": (False, ()),
}


@dataclass
class SpeakerProfile:
    name: str
    f0: float
    formant_scale: float
    tilt: float  # per-harmonic amplitude decay exponent


def default_speakers(n: int) -> list[SpeakerProfile]:
    f0s = np.geomspace(95.0, 240.0, n) if n > 1 else np.array([120.0])
    scales = np.linspace(0.92, 1.2, n) if n > 1 else np.array([1.0])
    tilts = np.linspace(1.3, 0.7, n) if n > 1 else np.array([1.0])
    return [SpeakerProfile(f"spk{i:02d}", float(f), float(s), float(t))
            for i, (f, s, t) in enumerate(zip(f0s, scales, tilts))]


def _resonate(x, freqs, sample_rate, bandwidth=90.0):
    y = np.zeros_like(x)
    for f in freqs:
        if f >= sample_rate / 2 - 200:
            continue
        r = np.exp(-np.pi * bandwidth / sample_rate)
        theta = 2 * np.pi * f / sample_rate
        b = [1 - r]
        a = [1, -2 * r * np.cos(theta), r * r]
        y += signal.lfilter(b, a, x)
    return y


def render_phoneme(label, n, speaker: SpeakerProfile, sample_rate, rng, phase0=0.0):
    voiced, formants = PHONEMES[label]
    t = np.arange(n) / sample_rate
    if label == "sil":
        return 1e-3 * rng.standard_normal(n), phase0
    formants = [f * speaker.formant_scale for f in formants]
    if voiced:
        f0 = speaker.f0 * (1 + 0.03 * np.sin(2 * np.pi * 4.0 * t + rng.uniform(0, 2 * np.pi)))
        phase = phase0 + 2 * np.pi * np.cumsum(f0) / sample_rate
        n_harm = int((sample_rate / 2 - 500) // (speaker.f0 * 1.05))
        src = sum(np.sin(h * phase) / h ** speaker.tilt for h in range(1, n_harm + 1))
        y = _resonate(src, formants, sample_rate)
        phase_end = phase[-1]
    else:
        y = _resonate(rng.standard_normal(n), formants, sample_rate, bandwidth=400.0) * 0.5
        phase_end = phase0
    fade = min(n // 4, int(0.005 * sample_rate))
    if fade > 0:
        ramp = np.linspace(0, 1, fade)
        y[:fade] *= ramp
        y[-fade:] *= ramp[::-1]
    return y, phase_end


def synth_utterance(speaker: SpeakerProfile, n_samples: int, sample_rate: int = 22050, seed: int = 0,
                    min_dur: float = 0.06, max_dur: float = 0.2):
    """Render ``n_samples`` of synthetic speech; returns ``(Waveform, PhonemeAlignment)``."""
    rng = np.random.default_rng(seed)
    labels = [k for k in PHONEMES if k != "sil"]
    pieces, intervals = [], []
    pos, phase, prev = 0, 0.0, None
    while pos < n_samples:
        n = int(rng.uniform(min_dur, max_dur) * sample_rate)
        n = min(max(n, 1), n_samples - pos)
        if pos == 0 or (rng.random() < 0.1 and prev != "sil"):
            label = "sil"
        else:
            label = str(rng.choice([l for l in labels if l != prev]))
        y, phase = render_phoneme(label, n, speaker, sample_rate, rng, phase)
        pieces.append(y)
        intervals.append((pos, pos + n, label))
        pos += n
        prev = label
    x = np.concatenate(pieces)
    peak = np.max(np.abs(x))
    x = 0.9 * x / peak if peak > 0 else x
    return Waveform(x.astype(np.float32), sample_rate), PhonemeAlignment(intervals, sample_rate)


def write_corpus(out_dir, n_speakers: int = 2, utts_per_speaker: int = 4, seconds: float = 1.0,
                 sample_rate: int = 22050, seed: int = 0, rates=None) -> Path:
    """Write WAVs, ``.phn`` alignments and ``manifest.jsonl``; returns the manifest path.

    ``rates`` optionally cycles per-utterance native sample rates, to exercise
    resampling on ingestion.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for si, spk in enumerate(default_speakers(n_speakers)):
        (out_dir / spk.name).mkdir(exist_ok=True)
        for u in range(utts_per_speaker):
            rate = rates[(si * utts_per_speaker + u) % len(rates)] if rates else sample_rate
            w, align = synth_utterance(spk, int(seconds * rate), rate, seed=seed * 100003 + si * 1009 + u)
            wav_path = out_dir / spk.name / f"u{u:03d}.wav"
            phn_path = wav_path.with_suffix(".phn")
            write_wav(wav_path, w, pcm16=True)
            write_alignment(phn_path, align)
            lines.append(json.dumps({
                "path": f"{spk.name}/{wav_path.name}", "speaker": spk.name,
                "alignment": f"{spk.name}/{phn_path.name}",
            }))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
