import time

import numpy as np
import pytest
import torch

from bottlevc.checkpoint import write_archive
from bottlevc.corpus import Waveform
from bottlevc.melfront import MelFrontConfig, MelSpectrogram, reference_logmel
from bottlevc.vocoder import (DiscriminatorBank, DiscriminatorConfig, Generator, GeneratorConfig, discriminate,
                              griffin_lim, import_generator_params)

SMALL = GeneratorConfig(base_width=2)
CFG = MelFrontConfig()


def test_generator_length_t87():
    g = Generator(SMALL)
    with torch.no_grad():
        assert g(torch.zeros(1, 80, 87) - 5).shape == (1, 22272)


def test_generator_length_random_t():
    g = Generator(SMALL)
    rng = np.random.default_rng(0)
    with torch.no_grad():
        for T in rng.integers(1, 120, size=20):
            assert g(torch.zeros(1, 80, int(T))).shape[-1] == 256 * T


def test_generator_is_local():
    g = Generator(SMALL).eval()
    mel = torch.randn(1, 80, 60, generator=torch.Generator().manual_seed(0)) - 5
    with torch.no_grad():
        full = g(mel)[0]
        head = g(mel[:, :, :40])[0]
    halo = 10 * 256  # generous receptive-field margin
    assert torch.allclose(full[:40 * 256 - halo], head[:40 * 256 - halo], atol=1e-6)


def test_generator_gradient_flows_to_mel():
    g = Generator(SMALL)
    mel = (torch.randn(1, 80, 8) - 5).requires_grad_(True)
    g(mel).pow(2).mean().backward()
    assert torch.isfinite(mel.grad).all() and mel.grad.abs().sum() > 0


def test_generator_rejects_wrong_channels():
    with pytest.raises(ValueError):
        Generator(SMALL)(torch.zeros(1, 40, 4))


def test_generate_wrapper():
    w = Generator(SMALL).generate(MelSpectrogram(np.zeros((80, 3), np.float32) - 5, 256, 22050))
    assert isinstance(w, Waveform) and len(w) == 768 and np.all(np.abs(w.samples) <= 1)


def test_generation_time_scales_sub_autoregressively():
    g = Generator(SMALL).eval()

    def best(T):
        x = torch.zeros(1, 80, T) - 5
        times = []
        with torch.no_grad():
            g(x)
            for _ in range(3):
                t0 = time.perf_counter()
                g(x)
                times.append(time.perf_counter() - t0)
        return min(times)

    assert best(870) <= 12 * best(87)


def _conv_len(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def test_discriminator_map_lengths():
    cfg = DiscriminatorConfig(base_width=4, max_width=64)
    bank = DiscriminatorBank(cfg)
    out = discriminate(Waveform(np.zeros(8192, np.float32), 22050), bank)
    lengths = [s.shape[-1] for s, _ in out]
    # striding oracle: avg-pool (k4, s2, p1) between scales, then n_layers convs (k41, s4, p20)
    expect = []
    n = 8192
    for i in range(3):
        if i:
            n = _conv_len(n, 4, 2, 1)
        m = n
        for _ in range(cfg.n_layers):
            m = _conv_len(m, 41, 4, 20)
        expect.append(m)
    assert lengths == expect == [32, 16, 8]
    assert all(len(f) == cfg.n_layers + 2 for _, f in out)


def test_discriminator_deterministic_and_min_length():
    bank = DiscriminatorBank(DiscriminatorConfig(base_width=4, max_width=64))
    w = Waveform(np.random.default_rng(0).standard_normal(4096).astype(np.float32), 22050)
    a, b = discriminate(w, bank), discriminate(w, bank)
    assert all(torch.equal(x[0], y[0]) for x, y in zip(a, b))
    n = bank.min_input_length()
    bank(torch.zeros(1, n))
    with pytest.raises(ValueError, match="shorter"):
        bank(torch.zeros(1, n - 1))


def _sine(freq, n=22050):
    t = np.arange(n) / 22050
    return Waveform(np.sin(2 * np.pi * freq * t).astype(np.float32), 22050)


def test_griffin_lim_recovers_1khz():
    mel = reference_logmel(_sine(1000), CFG)
    out, history = griffin_lim(mel, CFG, 60, return_history=True)
    assert len(out) == 256 * mel.n_frames
    spec = np.abs(np.fft.rfft(out.samples * np.hanning(len(out))))
    peak = np.argmax(spec) * 22050 / len(out)
    assert abs(peak - 1000) <= 22050 / CFG.n_fft
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))
    assert history[-1] <= history[0]


def test_griffin_lim_silence():
    mel = MelSpectrogram(np.full((80, 40), np.log(CFG.eps)), 256, 22050)
    out = griffin_lim(mel, CFG, 10)
    assert np.sqrt(np.mean(out.samples ** 2)) < 1e-3


def test_import_generator_params(tmp_path):
    src = Generator(GeneratorConfig(base_width=2, seed=5))
    dst = Generator(GeneratorConfig(base_width=2, seed=6))
    state = src.state_dict()
    name_map = {f"ext.{i}": k for i, k in enumerate(state)}
    tensors = {f"ext.{i}": v for i, v in enumerate(state.values())}
    write_archive(tmp_path / "v.bin", {"kind": "vocoder-params", "version": 1, "name_map": name_map}, tensors)
    keys = import_generator_params(dst, tmp_path / "v.bin")
    assert keys == sorted(state)
    assert all(torch.equal(a, b) for a, b in zip(src.state_dict().values(), dst.state_dict().values()))

    write_archive(tmp_path / "bad.bin", {"kind": "other", "version": 1}, tensors)
    with pytest.raises(ValueError, match="not a vocoder"):
        import_generator_params(dst, tmp_path / "bad.bin")
    write_archive(tmp_path / "old.bin", {"kind": "vocoder-params", "version": 2}, tensors)
    with pytest.raises(ValueError, match="version"):
        import_generator_params(dst, tmp_path / "old.bin")
