"""Latent-space probes, objective metrics and the real-time-factor benchmark."""

from __future__ import annotations

import copy
import math
import platform
import shlex
import statistics
import subprocess
import tempfile
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.fft import dct

from .config import ProbeConfig
from .corpus import PhonemeAlignment, SpeakerRegistry, Waveform, write_wav
from .melfront import MelFrontConfig, analysis_window, reference_logmel, reflect_indices, num_frames
from .model import causal_upsample


class ProbeConfigError(ValueError):
    pass


class PairingError(ValueError):
    pass


# ---------------------------------------------------------------- phoneme labels


@dataclass
class LabeledCode:
    vector: np.ndarray
    label: str
    utt_id: str = ""
    index: int = 0


def code_span(i: int, hop: int, k: int) -> tuple[int, int]:
    return i * k * hop, (i + 1) * k * hop


def label_codes(codes: np.ndarray, align: PhonemeAlignment, hop: int, k: int, utt_id: str = "") -> list[LabeledCode]:
    """Label each code (columns of ``codes``, shape ``(d, T')``) with the phoneme
    overlapping its sample span ``[i*k*hop, (i+1)*k*hop)`` the most.

    Ties go to the earlier-starting phoneme. A span past the end of the
    alignment takes the nearest interval.
    """
    if not align.intervals:
        raise ValueError("cannot label codes with an empty alignment")
    codes = np.asarray(codes)
    out = []
    for i in range(codes.shape[1]):
        a, b = code_span(i, hop, k)
        best, best_ov = None, 0
        for s, e, lab in align.intervals:
            ov = min(e, b) - max(s, a)
            if ov > best_ov:
                best, best_ov = lab, ov
        if best is None:
            gaps = [max(s - b, a - e, 0) for s, e, _ in align.intervals]
            best = align.intervals[int(np.argmin(gaps))][2]
        out.append(LabeledCode(codes[:, i].astype(np.float32), best, utt_id, i))
    return out


def split_items(items: Sequence, fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Seeded disjoint split in the given proportions (last part takes the remainder)."""
    n = len(items)
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [int(round(f * n)) for f in fractions[:-1]]
    parts, start = [], 0
    for size in sizes:
        parts.append([items[i] for i in perm[start:start + size]])
        start += size
    parts.append([items[i] for i in perm[start:]])
    return parts


# ---------------------------------------------------------------- probe classifier


@dataclass
class ProbeReport:
    accuracy: float
    baseline_random: float
    baseline_prior: float
    n_classes: int
    classes: list
    confusion: list
    n_train: int
    n_val: int
    n_test: int
    prior_class: str = ""
    epochs_trained: int = 0

    def to_dict(self):
        return asdict(self)


def _mlp(d_in, hidden, n_out, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, n_out))


def fit_classifier(x_tr, y_tr, x_val, y_val, n_classes, cfg: ProbeConfig, seed: int = 0):
    """One-hidden-layer perceptron, plain minibatch SGD, early stopping on validation loss."""
    net = _mlp(x_tr.shape[1], cfg.hidden, n_classes, seed)
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(seed)
    best_loss, best_state, bad, epochs = math.inf, copy.deepcopy(net.state_dict()), 0, 0
    for epoch in range(cfg.max_epochs):
        epochs = epoch + 1
        net.train()
        order = rng.permutation(len(x_tr))
        for s in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[s:s + cfg.batch_size])
            loss = F.cross_entropy(net(x_tr[idx]), y_tr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            val_loss = F.cross_entropy(net(x_val), y_val).item()
        if val_loss < best_loss - 1e-7:
            best_loss, best_state, bad = val_loss, copy.deepcopy(net.state_dict()), 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    return net, epochs


def _tensors(items, class_index):
    x = torch.from_numpy(np.stack([np.asarray(it.vector, dtype=np.float32) for it in items]))
    y = torch.tensor([class_index[it.label] for it in items], dtype=torch.long)
    return x, y


def train_phoneme_probe(train, val, test, cfg: ProbeConfig | None = None, seed: int = 0,
                        inventory: Sequence[str] | None = None) -> ProbeReport:
    """Train the probe and report test accuracy next to the random and prior baselines.

    ``baseline_random`` is ``1 / n_classes``; ``baseline_prior`` is the test
    frequency of the most frequent train label.
    """
    cfg = cfg or ProbeConfig()
    if not train or not val or not test:
        raise ProbeConfigError("train, validation and test sets must all be non-empty")
    classes = list(inventory) if inventory is not None else sorted({it.label for it in (*train, *val, *test)})
    class_index = {c: i for i, c in enumerate(classes)}
    unknown = sorted({it.label for it in (*train, *val, *test)} - set(classes))
    if unknown:
        raise ProbeConfigError(f"labels outside the phoneme inventory: {unknown[:5]}")
    x_tr, y_tr = _tensors(train, class_index)
    x_val, y_val = _tensors(val, class_index)
    x_te, y_te = _tensors(test, class_index)
    net, epochs = fit_classifier(x_tr, y_tr, x_val, y_val, len(classes), cfg, seed)
    with torch.no_grad():
        pred = net(x_te).argmax(dim=1)
    confusion = np.zeros((len(classes), len(classes)), dtype=int)
    np.add.at(confusion, (y_te.numpy(), pred.numpy()), 1)
    counts = Counter(it.label for it in train)
    prior_class = sorted(counts, key=lambda c: (-counts[c], c))[0]
    prior = sum(it.label == prior_class for it in test) / len(test)
    return ProbeReport(
        accuracy=float((pred == y_te).float().mean()),
        baseline_random=1.0 / len(classes),
        baseline_prior=prior,
        n_classes=len(classes),
        classes=classes,
        confusion=confusion.tolist(),
        n_train=len(train), n_val=len(val), n_test=len(test),
        prior_class=prior_class,
        epochs_trained=epochs,
    )


# ---------------------------------------------------------------- speaker independence


@dataclass
class SpeakerReport:
    accuracy: float
    chance: float
    gap: float
    n_speakers: int
    n_test: int
    binomial_sigma: float

    @property
    def z_score(self) -> float:
        return self.gap / self.binomial_sigma if self.binomial_sigma > 0 else math.inf

    def to_dict(self):
        d = asdict(self)
        d["z_score"] = self.z_score
        return d


def speaker_independence_report(codes_by_speaker: Mapping[str, Sequence[np.ndarray]], registry: SpeakerRegistry,
                                cfg: ProbeConfig | None = None, seed: int = 0) -> SpeakerReport:
    """Fit a fresh speaker classifier on code frames, holding out whole utterances.

    ``codes_by_speaker`` maps speaker id to per-utterance ``(d, T')`` code
    arrays. Reports accuracy beside chance ``1/C``; makes no pass/fail call.
    """
    cfg = cfg or ProbeConfig()
    speakers = [s for s in registry if codes_by_speaker.get(s)]
    if len(speakers) < 2:
        raise ProbeConfigError("speaker probe needs codes from at least two speakers")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for s in speakers:
        utts = list(codes_by_speaker[s])
        order = rng.permutation(len(utts))
        n_test = int(round(cfg.speaker_test_frac * len(utts))) if len(utts) > 1 else 0
        for rank, u in enumerate(order):
            frames = [LabeledCode(np.asarray(utts[u])[:, t], s) for t in range(np.asarray(utts[u]).shape[1])]
            (test if rank < n_test else train).extend(frames)
    if not test:
        raise ProbeConfigError("no held-out utterances; need >= 2 utterances for some speaker")
    tr, val = split_items(train, (0.9, 0.1), seed)
    if not val:
        val = tr[:1]
    class_index = {s: i for i, s in enumerate(speakers)}
    x_tr, y_tr = _tensors(tr, class_index)
    x_val, y_val = _tensors(val, class_index)
    x_te, y_te = _tensors(test, class_index)
    net, _ = fit_classifier(x_tr, y_tr, x_val, y_val, len(speakers), cfg, seed)
    with torch.no_grad():
        acc = float((net(x_te).argmax(1) == y_te).float().mean())
    chance = 1.0 / len(speakers)
    sigma = math.sqrt(chance * (1 - chance) / len(test))
    return SpeakerReport(acc, chance, acc - chance, len(speakers), len(test), sigma)


# ---------------------------------------------------------------- objective metrics


def mel_l2(ref_mel: np.ndarray, deg_mel: np.ndarray) -> float:
    """Mean squared difference per Mel element."""
    return float(np.mean((ref_mel - deg_mel) ** 2))


def mel_cepstral_distortion(ref_mel: np.ndarray, deg_mel: np.ndarray) -> float:
    """MCD in dB on orthonormal-DCT cepstra of the log-Mel frames, c0 excluded."""
    c_ref = dct(ref_mel, type=2, axis=0, norm="ortho")[1:]
    c_deg = dct(deg_mel, type=2, axis=0, norm="ortho")[1:]
    per_frame = np.sqrt(2.0 * np.sum((c_ref - c_deg) ** 2, axis=0))
    return float(10.0 / np.log(10.0) * per_frame.mean())


def _power_spectrogram(x: np.ndarray, cfg: MelFrontConfig) -> np.ndarray:
    x = x.astype(np.float64)
    padded = x[reflect_indices(len(x), cfg.n_fft // 2)]
    starts = np.arange(num_frames(len(x), cfg.hop)) * cfg.hop
    frames = padded[starts[:, None] + np.arange(cfg.n_fft)[None, :]]
    return np.abs(np.fft.rfft(frames * analysis_window(cfg), axis=1)) ** 2


def log_spectral_distance(ref: np.ndarray, deg: np.ndarray, cfg: MelFrontConfig, floor: float = 1e-10) -> float:
    """Frame-averaged RMS difference of 10*log10 power spectra, in dB."""
    p_ref = 10 * np.log10(_power_spectrogram(ref, cfg) + floor)
    p_deg = 10 * np.log10(_power_spectrogram(deg, cfg) + floor)
    return float(np.mean(np.sqrt(np.mean((p_ref - p_deg) ** 2, axis=1))))


BUILTIN_METRICS = ("mel_l2", "mcd", "lsd")


def external_metric(command, ref: Waveform, deg: Waveform):
    """Score a pair with an external executable ``command ref.wav deg.wav``.

    Returns ``(value, raw_stdout)``; ``value`` is None when the scorer exits
    non-zero or prints something that is not a single number.
    """
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    with tempfile.TemporaryDirectory() as tmp:
        ref_path, deg_path = Path(tmp) / "ref.wav", Path(tmp) / "deg.wav"
        write_wav(ref_path, ref)
        write_wav(deg_path, deg)
        try:
            proc = subprocess.run(argv + [str(ref_path), str(deg_path)], capture_output=True, text=True)
        except OSError:
            return None, ""
    raw = proc.stdout.strip()
    if proc.returncode != 0:
        return None, raw
    try:
        return float(raw), raw
    except ValueError:
        return None, raw


@dataclass
class MetricRow:
    name: str
    values: list
    available: bool = True
    raw: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else 0.0

    def to_dict(self):
        return {"name": self.name, "mean": self.mean, "std": self.std, "n": len(self.values),
                "available": self.available, "values": list(self.values), "raw": list(self.raw)}


def objective_eval(pairs: Sequence[tuple[Waveform, Waveform]], cfg: MelFrontConfig | None = None,
                   external: str | None = None, external_name: str = "external") -> dict[str, MetricRow]:
    """Score ``(reference, degraded)`` pairs; returns ``{metric: MetricRow}``.

    Pairs may differ in length by at most one hop and are trimmed to the
    shorter one.
    """
    cfg = cfg or MelFrontConfig()
    rows = {name: MetricRow(name, []) for name in BUILTIN_METRICS}
    if external:
        rows[external_name] = MetricRow(external_name, [])
    for i, (ref, deg) in enumerate(pairs):
        if ref.sample_rate != deg.sample_rate:
            raise PairingError(f"pair {i}: sample rates differ ({ref.sample_rate} vs {deg.sample_rate})")
        if abs(len(ref) - len(deg)) > cfg.hop:
            raise PairingError(f"pair {i}: lengths {len(ref)} and {len(deg)} differ by more than one hop")
        n = min(len(ref), len(deg))
        ref = Waveform(ref.samples[:n], ref.sample_rate)
        deg = Waveform(deg.samples[:n], deg.sample_rate)
        m_ref = reference_logmel(ref, cfg).values
        m_deg = reference_logmel(deg, cfg).values
        rows["mel_l2"].values.append(mel_l2(m_ref, m_deg))
        rows["mcd"].values.append(mel_cepstral_distortion(m_ref, m_deg))
        rows["lsd"].values.append(log_spectral_distance(ref.samples, deg.samples, cfg))
        if external:
            value, raw = external_metric(external, ref, deg)
            rows[external_name].raw.append(raw)
            if value is None:
                rows[external_name].available = False
            else:
                rows[external_name].values.append(value)
    if external and not rows[external_name].available:
        rows[external_name].values = []
    return rows


# ---------------------------------------------------------------- real-time factor

STAGES = ("melfront", "autoencoder", "vocoder")


@dataclass
class RtfResult:
    audio_seconds: float
    stage_seconds: dict
    total_seconds: float
    rtf: float
    repeats: int
    machine: dict
    per_repeat: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def machine_descriptor() -> dict:
    cpu = platform.processor() or ""
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.startswith("model name"):
                cpu = line.split(":", 1)[1].strip()
                break
    except OSError:
        pass
    return {"cpu": cpu, "machine": platform.machine(), "python": platform.python_version(),
            "torch": torch.__version__, "threads": torch.get_num_threads()}


def summarize_timings(per_repeat: Sequence[Mapping[str, float]], audio_seconds: float, machine=None) -> RtfResult:
    """Median per stage; total is the sum of stage medians."""
    stage_seconds = {s: statistics.median(r[s] for r in per_repeat) for s in per_repeat[0]}
    total = sum(stage_seconds.values())
    return RtfResult(audio_seconds, stage_seconds, total, audio_seconds / total, len(per_repeat),
                     machine or machine_descriptor(), [dict(r) for r in per_repeat])


def bench_rtf(w: Waveform, model, repeats: int = 5, source=0, target=None, parallel: bool = False) -> RtfResult:
    """Time front end, autoencoder and vocoder separately (one warm-up run excluded).

    Runs single-threaded unless ``parallel``. ``rtf > 1`` is faster than real time.
    """
    if repeats < 3:
        raise ValueError("bench_rtf needs repeats >= 3 for a meaningful median")
    target = source if target is None else target
    prev_threads = torch.get_num_threads()
    if not parallel:
        torch.set_num_threads(1)
    try:
        p = next(model.parameters())
        x = torch.as_tensor(w.samples, dtype=p.dtype)[None]
        k = model.ae.cfg.freq
        spk_src = model.speaker_vector(source)
        spk_tgt = model.speaker_vector(target)

        def run_once():
            t = {}
            with torch.no_grad():
                t0 = time.perf_counter()
                mel = model.front(x)
                t1 = time.perf_counter()
                codes = model.ae.encode(mel, spk_src)
                _, post = model.ae.decode(causal_upsample(codes, k, mel.shape[-1]), spk_tgt)
                t2 = time.perf_counter()
                model.vocoder(post)
                t3 = time.perf_counter()
            t["melfront"], t["autoencoder"], t["vocoder"] = t1 - t0, t2 - t1, t3 - t2
            return t

        run_once()
        per_repeat = [run_once() for _ in range(repeats)]
        machine = machine_descriptor()
    finally:
        torch.set_num_threads(prev_threads)
    return summarize_timings(per_repeat, w.duration, machine)


# ---------------------------------------------------------------- text tables


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in header]] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def probe_table(report: ProbeReport) -> str:
    return format_table(["quantity", "value"], [
        ["probe accuracy", report.accuracy],
        ["random baseline", report.baseline_random],
        [f"prior baseline ({report.prior_class})", report.baseline_prior],
        ["classes", report.n_classes],
        ["train / val / test", f"{report.n_train} / {report.n_val} / {report.n_test}"],
    ])


def speaker_table(report: SpeakerReport) -> str:
    return format_table(["quantity", "value"], [
        ["speaker accuracy", report.accuracy],
        ["chance (1/C)", report.chance],
        ["gap", report.gap],
        ["binomial sigma", report.binomial_sigma],
        ["speakers", report.n_speakers],
        ["test frames", report.n_test],
    ])


def metric_table(rows: Mapping[str, MetricRow]) -> str:
    body = []
    for r in rows.values():
        stat = f"{r.mean:.4f} +/- {r.std:.4f}" if r.available else "unavailable"
        body.append([r.name, stat, len(r.values)])
    return format_table(["metric", "mean +/- std", "n"], body)


def rtf_table(result: RtfResult) -> str:
    body = [[s, result.stage_seconds[s]] for s in result.stage_seconds]
    body += [["total", result.total_seconds], ["audio seconds", result.audio_seconds], ["rtf", result.rtf]]
    return format_table(["stage", "seconds (median)"], body)
