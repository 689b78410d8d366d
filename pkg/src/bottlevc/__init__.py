"""Speaker-conditioned autoencoder voice conversion with a learnable Mel front end."""

from .corpus import PhonemeAlignment, SpeakerRegistry, UtteranceRecord, Waveform
from .melfront import MelFrontConfig, MelSpectrogram
from .model import AutoEncoder, ModelConfig

__version__ = "0.1.0"

__all__ = ["AutoEncoder", "MelFrontConfig", "MelSpectrogram", "ModelConfig", "PhonemeAlignment",
           "SpeakerRegistry", "UtteranceRecord", "Waveform"]
