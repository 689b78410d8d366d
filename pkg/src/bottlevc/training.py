"""Losses and the two training stages.

Stage 1 trains only the autoencoder on Mel reconstruction (post-PostNet,
pre-PostNet and code-consistency terms) with the front end and vocoder frozen.
Stage 2 treats the whole waveform-to-waveform pipeline as a GAN generator
against multi-scale discriminators, adding the weighted code-consistency term.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .checkpoint import Checkpoint, save_checkpoint
from .config import Stage1Config, Stage2Config
from .corpus import SpeakerRegistry, UtteranceRecord, Waveform, chunk, load_utterance
from .melfront import LearnableLogMel
from .model import one_hot
from .pipeline import VoiceConverter
from .vocoder import DiscriminatorBank

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


# ---------------------------------------------------------------- losses


def code_distance(codes_a: torch.Tensor, codes_b: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Squared distance between ``(B, d, T')`` code tensors.

    ``"sum"``: squared Frobenius norm per item, averaged over the batch.
    ``"mean"``: mean over every element.
    """
    if codes_a.shape != codes_b.shape:
        raise ValueError(f"code shapes differ: {tuple(codes_a.shape)} vs {tuple(codes_b.shape)}")
    sq = (codes_a - codes_b).pow(2)
    if reduction == "sum":
        return sq.reshape(sq.shape[0], -1).sum(dim=1).mean()
    if reduction == "mean":
        return sq.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def content_loss(mel, mel_hat, spk, encoder, reduction: str = "sum") -> torch.Tensor:
    """``|| E(X, s) - E(X_hat, s) ||^2``."""
    if mel.shape != mel_hat.shape:
        raise ValueError(f"Mel shapes differ: {tuple(mel.shape)} vs {tuple(mel_hat.shape)}")
    return code_distance(encoder(mel, spk), encoder(mel_hat, spk), reduction)


def stage1_loss(mel, spk, ae) -> tuple[torch.Tensor, dict]:
    """Reconstruction objective; returns ``(total, components)``.

    Components are mean-per-element squared errors: ``recon_post`` against the
    PostNet output, ``recon_pre`` against the raw decoder output and
    ``content`` between codes of the input and of the PostNet output.
    """
    out = ae(mel, spk)
    recon_post = F.mse_loss(out.post_postnet, mel)
    recon_pre = F.mse_loss(out.pre_postnet, mel)
    content = code_distance(out.codes, ae.encode(out.post_postnet, spk), reduction="mean")
    total = recon_post + recon_pre + content
    return total, {"recon_post": recon_post, "recon_pre": recon_pre, "content": content}


class SpeakerClassifier(nn.Module):
    """Time-pooled codes -> speaker logits."""

    def __init__(self, dim_codes: int, n_speakers: int, hidden: int = 256, seed: int = 2):
        super().__init__()
        self.n_speakers = n_speakers
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(nn.Linear(dim_codes, hidden), nn.ReLU(), nn.Linear(hidden, n_speakers))

    def forward(self, codes):
        return self.net(codes.mean(dim=-1))


def domain_confusion_regularizer(codes, labels, classifier: SpeakerClassifier):
    """Returns ``(classifier_loss, confusion_loss)``.

    ``classifier_loss`` only reaches the classifier (codes are detached);
    ``confusion_loss = -classifier_loss`` only reaches whatever produced the
    codes (classifier parameters are detached).
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if (labels < 0).any() or (labels >= classifier.n_speakers).any():
        raise ValueError(f"speaker label outside registry of size {classifier.n_speakers}")
    classifier_loss = F.cross_entropy(classifier(codes.detach()), labels)
    frozen = {k: v.detach().clone() for k, v in classifier.named_parameters()}
    confusion_loss = -F.cross_entropy(functional_call(classifier, frozen, (codes,)), labels)
    return classifier_loss, confusion_loss


def hinge_d_loss(real_scores, fake_scores) -> torch.Tensor:
    return sum(F.relu(1 - r).mean() + F.relu(1 + f).mean() for r, f in zip(real_scores, fake_scores))


def hinge_g_loss(fake_scores) -> torch.Tensor:
    return sum(-f.mean() for f in fake_scores)


def feature_matching_loss(real_feats, fake_feats) -> torch.Tensor:
    terms = [F.l1_loss(f, r.detach()) for rs, fs in zip(real_feats, fake_feats) for r, f in zip(rs, fs)]
    return sum(terms) / len(terms)


# ---------------------------------------------------------------- data


@dataclass
class TrainItem:
    samples: np.ndarray
    speaker: int
    utt_id: str = ""


def build_dataset(records: Sequence[UtteranceRecord], registry: SpeakerRegistry, split: str | None = "train",
                  sample_rate: int = 22050) -> list[TrainItem]:
    items = []
    for r in records:
        if split is not None and r.split != split:
            continue
        w, _ = load_utterance(r, sample_rate)
        items.append(TrainItem(w.samples, registry.index(r.speaker), r.utt_id))
    return items


def epoch_batches(items: Sequence[TrainItem], batch_size: int, chunk_len: int, seed: int, epoch: int):
    """Seeded batches for one epoch: shuffled order, one random chunk per utterance."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(items))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        wavs, spks = [], []
        for i in idx:
            it = items[i]
            c, _, _ = chunk(Waveform(it.samples, 1), chunk_len, rng)
            wavs.append(c.samples)
            spks.append(it.speaker)
        yield torch.from_numpy(np.stack(wavs)), torch.tensor(spks, dtype=torch.long)


# ---------------------------------------------------------------- logging / checkpoints


class MetricsLog:
    """CSV rows ``step,epoch,term,value``."""

    def __init__(self, path=None, append: bool = False):
        self.rows: list[tuple[int, int, str, float]] = []
        self.path = Path(path) if path else None
        if self.path is not None and not (append and self.path.exists()):
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("step,epoch,term,value\n")

    def add(self, step: int, epoch: int, terms: dict):
        new = [(step, epoch, k, float(v)) for k, v in terms.items()]
        self.rows.extend(new)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                w = csv.writer(f)
                for r in new:
                    w.writerow([r[0], r[1], r[2], repr(r[3])])

    def series(self, term: str) -> list[float]:
        return [v for _, _, t, v in self.rows if t == term]


def read_metrics(path) -> list[tuple[int, int, str, float]]:
    with open(path, newline="") as f:
        return [(int(r["step"]), int(r["epoch"]), r["term"], float(r["value"])) for r in csv.DictReader(f)]


def _meta(model: VoiceConverter, stage: str, epoch: int, step: int, seed: int) -> dict:
    return {
        "stage": stage,
        "epoch": epoch,
        "step": step,
        "seed": seed,
        "config": model.config.to_dict(),
        "registry": model.registry.to_json(),
    }


@dataclass
class TrainResult:
    model: VoiceConverter
    metrics: MetricsLog
    epoch: int
    step: int
    checkpoints: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)


def _ckpt_path(out_dir, stage, epoch):
    return Path(out_dir) / f"{stage}_epoch{epoch:04d}.ckpt"


def _adam(params, lr, betas):
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas))


# ---------------------------------------------------------------- stage 1


def train_stage1(model: VoiceConverter, items: Sequence[TrainItem], cfg: Stage1Config | None = None, *,
                 seed: int = 0, out_dir=None, resume=None, metrics_path=None) -> TrainResult:
    """Autoencoder-only reconstruction training (source == target speaker).

    Writes ``ae_epochNNNN.ckpt`` every ``cfg.checkpoint_every`` epochs (and
    at the end) when ``out_dir`` is given. ``resume`` continues from a
    stage-1 checkpoint: parameters, optimizer moments and epoch counter.
    """
    cfg = cfg or model.config.stage1
    if not items:
        raise ConfigError("stage 1 needs a non-empty training set")
    model.front.set_trainable(False)
    for p in model.vocoder.parameters():
        p.requires_grad_(False)
    ae = model.ae
    opt = _adam(ae.parameters(), cfg.lr, cfg.betas)
    classifier = cls_opt = None
    if cfg.adversarial_weight > 0:
        classifier = SpeakerClassifier(ae.cfg.dim_neck, len(model.registry), cfg.classifier_hidden)
        cls_opt = _adam(classifier.parameters(), cfg.classifier_lr, cfg.classifier_betas)

    start_epoch, step = 1, 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        if ckpt.meta.get("stage") != "ae":
            raise StateError("stage-1 resume needs a stage-1 ('ae') checkpoint")
        ckpt.load_module("model", model)
        ckpt.load_optimizer("ae", opt)
        if classifier is not None and ckpt.has_module("classifier"):
            ckpt.load_module("classifier", classifier)
            ckpt.load_optimizer("classifier", cls_opt)
        start_epoch, step = ckpt.meta["epoch"] + 1, ckpt.meta["step"]
        seed = ckpt.meta["seed"]

    metrics = MetricsLog(metrics_path, append=resume is not None)
    result = TrainResult(model, metrics, start_epoch - 1, step)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    def save(epoch):
        modules = {"model": model}
        opts = {"ae": opt}
        if classifier is not None:
            modules["classifier"] = classifier
            opts["classifier"] = cls_opt
        path = _ckpt_path(out_dir, "ae", epoch)
        save_checkpoint(path, modules=modules, optimizers=opts, meta=_meta(model, "ae", epoch, step, seed))
        result.checkpoints.append(path)

    ae.train()
    done = False
    for epoch in range(start_epoch, cfg.epochs + 1):
        for wav, spk_idx in epoch_batches(items, cfg.batch_size, cfg.chunk_len, seed, epoch):
            with torch.no_grad():
                mel = model.front(wav)
            spk = one_hot(spk_idx, len(model.registry))
            total, terms = stage1_loss(mel, spk, ae)
            logged = {"total": total, **terms}
            if classifier is not None:
                codes = ae.encode(mel, spk)
                cls_loss, conf_loss = domain_confusion_regularizer(codes, spk_idx, classifier)
                total = total + cfg.adversarial_weight * conf_loss
                cls_opt.zero_grad()
                cls_loss.backward()
                cls_opt.step()
                logged.update(classifier=cls_loss, confusion=conf_loss)
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            metrics.add(step, epoch, {k: v.item() for k, v in logged.items()})
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        result.epoch, result.step = epoch, step
        if out_dir is not None and (done or epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            save(epoch)
        log.info("stage1 epoch %d step %d total %.4f", epoch, step, metrics.series("total")[-1])
        if done:
            break
    ae.eval()
    if classifier is not None:
        result.extras["classifier"] = classifier
    return result


# ---------------------------------------------------------------- vocoder


def train_vocoder(model: VoiceConverter, items: Sequence[TrainItem], cfg: Stage2Config | None = None, *,
                  seed: int = 0, steps: int = 200) -> TrainResult:
    """Desk-scale vocoder fit on ground-truth Mel features (hinge GAN + feature matching).

    Only the generator and a fresh discriminator bank are updated; the result
    can be stored into a stage-1 checkpoint so stage 2 starts from a working
    inverter.
    """
    cfg = cfg or model.config.stage2
    if not items:
        raise ConfigError("vocoder training needs a non-empty training set")
    model.front.set_trainable(False)
    for p in model.vocoder.parameters():
        p.requires_grad_(True)
    disc = DiscriminatorBank(model.config.discriminator)
    g_opt = _adam(model.vocoder.parameters(), cfg.lr, cfg.betas)
    d_opt = _adam(disc.parameters(), cfg.lr, cfg.betas)
    metrics = MetricsLog()
    step, epoch = 0, 0
    model.vocoder.train()
    while step < steps:
        epoch += 1
        for wav, _ in epoch_batches(items, cfg.batch_size, cfg.chunk_len, seed, epoch):
            n = wav.shape[-1]
            with torch.no_grad():
                mel = model.front(wav)
            fake = model.vocoder(mel)[:, :n]
            real_out = disc(wav)
            fake_out = disc(fake.detach())
            d_loss = hinge_d_loss([s for s, _ in real_out], [s for s, _ in fake_out])
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()
            fake_out = disc(fake)
            with torch.no_grad():
                real_out = disc(wav)
            adv = hinge_g_loss([s for s, _ in fake_out])
            fm = feature_matching_loss([f for _, f in real_out], [f for _, f in fake_out])
            g_loss = adv + cfg.feature_match_weight * fm
            g_opt.zero_grad()
            g_loss.backward()
            g_opt.step()
            step += 1
            metrics.add(step, epoch, {"disc": d_loss.item(), "adversarial": adv.item(), "feature_match": fm.item()})
            if step >= steps:
                break
    model.vocoder.eval()
    for p in model.vocoder.parameters():
        p.requires_grad_(False)
    return TrainResult(model, metrics, epoch, step, extras={"discriminators": disc})


# ---------------------------------------------------------------- stage 2


def train_stage2(model: VoiceConverter, items: Sequence[TrainItem], cfg: Stage2Config | None = None, *,
                 warm_start=None, seed: int = 0, out_dir=None, resume=None, metrics_path=None) -> TrainResult:
    """Adversarial end-to-end training of the waveform-to-waveform pipeline.

    Each step alternates one discriminator update (hinge loss) with one
    generator update (hinge adversarial + feature matching + weighted code
    consistency). Codes for the consistency term come from a frozen copy of
    the warm-start encoder applied to reference-initialized Mel features.
    """
    cfg = cfg or model.config.stage2
    if not items:
        raise ConfigError("stage 2 needs a non-empty training set")
    if warm_start is None and resume is None:
        raise StateError("stage 2 needs a stage-1 checkpoint as warm start (--warm-start ae_epochNNNN.ckpt)")
    start_ckpt = resume if resume is not None else warm_start
    ckpt = start_ckpt if isinstance(start_ckpt, Checkpoint) else Checkpoint.load(start_ckpt)
    expected = "e2e" if resume is not None else "ae"
    if ckpt.meta.get("stage") != expected:
        raise StateError(f"expected a '{expected}' checkpoint, got stage {ckpt.meta.get('stage')!r}")
    ckpt.load_module("model", model)

    model.front.set_trainable(cfg.learnable_mel)
    for p in model.vocoder.parameters():
        p.requires_grad_(True)
    gen_params = list(model.ae.parameters()) + list(model.vocoder.parameters())
    if cfg.learnable_mel:
        gen_params += list(model.front.parameters())
    disc = DiscriminatorBank(model.config.discriminator)
    g_opt = _adam(gen_params, cfg.lr, cfg.betas)
    d_opt = _adam(disc.parameters(), cfg.lr, cfg.betas)

    start_epoch, step = 1, 0
    if resume is not None:
        ckpt.load_module("disc", disc)
        ckpt.load_optimizer("gen", g_opt)
        ckpt.load_optimizer("disc", d_opt)
        start_epoch, step = ckpt.meta["epoch"] + 1, ckpt.meta["step"]
        seed = ckpt.meta["seed"]
        ref_encoder_state = ckpt.state_dict("ref_encoder")
    else:
        ref_encoder_state = model.ae.encoder.state_dict()

    ref_encoder = copy.deepcopy(model.ae.encoder)
    ref_encoder.load_state_dict(ref_encoder_state)
    ref_front = LearnableLogMel(model.config.melfront)
    for p in list(ref_encoder.parameters()) + list(ref_front.parameters()):
        p.requires_grad_(False)
    ref_encoder.eval()

    metrics = MetricsLog(metrics_path, append=resume is not None)
    result = TrainResult(model, metrics, start_epoch - 1, step)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    def save(epoch):
        path = _ckpt_path(out_dir, "e2e", epoch)
        save_checkpoint(path, modules={"model": model, "disc": disc, "ref_encoder": ref_encoder},
                        optimizers={"gen": g_opt, "disc": d_opt},
                        meta=_meta(model, "e2e", epoch, step, seed))
        result.checkpoints.append(path)

    model.train()
    done = False
    for epoch in range(start_epoch, cfg.epochs + 1):
        for wav, spk_idx in epoch_batches(items, cfg.batch_size, cfg.chunk_len, seed, epoch):
            spk = one_hot(spk_idx, len(model.registry))
            n = wav.shape[-1]
            mel = model.front(wav)
            out = model.ae(mel, spk)
            fake = model.vocoder(out.post_postnet)[:, :n]

            real_out = disc(wav)
            fake_out = disc(fake.detach())
            d_loss = hinge_d_loss([s for s, _ in real_out], [s for s, _ in fake_out])
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()

            fake_out = disc(fake)
            with torch.no_grad():
                real_out = disc(wav)
                codes_ref = ref_encoder(ref_front(wav), spk)
            adv = hinge_g_loss([s for s, _ in fake_out])
            fm = feature_matching_loss([f for _, f in real_out], [f for _, f in fake_out])
            content = code_distance(codes_ref, ref_encoder(ref_front(fake), spk), reduction="mean")
            g_loss = adv + cfg.feature_match_weight * fm + cfg.content_weight * content
            g_opt.zero_grad()
            g_loss.backward()
            g_opt.step()
            step += 1
            metrics.add(step, epoch, {
                "disc": d_loss.item(), "gen_total": g_loss.item(), "adversarial": adv.item(),
                "feature_match": fm.item(), "content": content.item(),
                "content_weighted": cfg.content_weight * content.item(),
            })
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        result.epoch, result.step = epoch, step
        if out_dir is not None and (done or epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            save(epoch)
        log.info("stage2 epoch %d step %d gen %.4f disc %.4f", epoch, step,
                 metrics.series("gen_total")[-1], metrics.series("disc")[-1])
        if done:
            break
    model.eval()
    model.front.set_trainable(False)
    result.extras["discriminators"] = disc
    return result
