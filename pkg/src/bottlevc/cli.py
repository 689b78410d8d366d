"""``bottlevc`` command line: prepare, train, convert, probe, eval, bench (+ synth).

Configuration comes from one JSON file (``--config``), an optional shipped
preset (``--preset``) and ``--set section.key=value`` overrides, applied in
that order. Logs go to stderr; reports are written as JSON, an aligned text
table and PNG figures, and the text table is echoed to stdout.

The default cache directory is ``$BOTTLEVC_CACHE`` or ``~/.cache/bottlevc``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import torch

from . import plotting, probes
from .checkpoint import Checkpoint, save_checkpoint
from .config import PRESETS, RunConfig, _merge, apply_override, load_config, preset_dict
from .corpus import (CorpusError, SpeakerRegistry, UtteranceRecord, Waveform, load_manifest, load_utterance,
                     read_wav, write_alignment, write_manifest, write_wav)
from .pipeline import VoiceConverter
from .synth import default_speakers, synth_utterance, write_corpus
from .training import (ConfigError, StateError, _meta, build_dataset, read_metrics, train_stage1,
                       train_stage2, train_vocoder)

log = logging.getLogger("bottlevc")

CACHE_ENV = "BOTTLEVC_CACHE"


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "bottlevc")


# ---------------------------------------------------------------- helpers


def _config(args, base: dict | None = None) -> RunConfig:
    """Defaults (or ``base``, e.g. a checkpoint's config) <- preset <- file <- overrides."""
    if base is None:
        return load_config(args.config, args.preset, args.set or ())
    d = base
    if args.preset:
        d = _merge(d, preset_dict(args.preset))
        d["preset"] = args.preset
    if args.config:
        d = _merge(d, json.loads(Path(args.config).read_text()))
    for o in args.set or ():
        d = apply_override(d, o)
    return RunConfig.from_dict(d)


def _emit(out_dir: Path, name: str, payload: dict, text: str, config: RunConfig) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps({"config": config.to_dict(), **payload}, indent=2, sort_keys=True) + "\n")
    (out_dir / f"{name}.txt").write_text(text)
    sys.stdout.write(text)
    return path


def _model_from_ckpt(path, args) -> tuple[VoiceConverter, Checkpoint]:
    ckpt = Checkpoint.load(path)
    cfg = _config(args, ckpt.meta["config"])
    model = VoiceConverter(cfg, SpeakerRegistry(ckpt.meta["registry"]))
    ckpt.load_module("model", model)
    return model.eval(), ckpt


def _resolve_manifest(data) -> Path:
    p = Path(data)
    return p / "manifest.jsonl" if p.is_dir() else p


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    cfg = _config(args)
    rates = [int(r) for r in args.rates.split(",")] if args.rates else None
    manifest = write_corpus(args.out, args.speakers, args.utts, args.seconds, cfg.melfront.sample_rate,
                            seed=cfg.seed, rates=rates)
    log.info("wrote synthetic corpus %s", manifest)
    return 0


def cmd_prepare(args):
    cfg = _config(args)
    out = Path(args.out) if args.out else cache_dir() / "prepared" / Path(args.manifest).resolve().parent.name
    sr = cfg.melfront.sample_rate
    records, registry = load_manifest(args.manifest, seed=cfg.seed, train_frac=args.train_frac)
    cached = []
    for r in records:
        try:
            w, align = load_utterance(r, sr)
        except Exception as e:
            raise CorpusError(f"{r.audio_path}: {e}") from e
        dst = out / "audio" / r.speaker / f"{r.audio_path.stem}.wav"
        dst.parent.mkdir(parents=True, exist_ok=True)
        write_wav(dst, w)
        phn = None
        if align is not None:
            phn = dst.with_suffix(".phn")
            write_alignment(phn, align)
        cached.append(UtteranceRecord(dst, r.speaker, r.split, phn))
    write_manifest(out / "manifest.jsonl", cached)
    registry.save(out / "registry.json")
    (out / "splits.txt").write_text("".join(f"{r.utt_id}\t{r.split}\n" for r in cached))
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("prepared %d utterances from %d speakers into %s", len(cached), len(registry), out)
    return 0


def _training_items(args, cfg, registry=None):
    records, reg = load_manifest(_resolve_manifest(args.data), seed=cfg.seed)
    registry = registry or reg
    items = build_dataset(records, registry, split="train", sample_rate=cfg.melfront.sample_rate)
    if not items:
        raise ConfigError(f"no training utterances in {args.data}")
    return items, registry


def cmd_train(args):
    out = Path(args.out)
    if args.stage == "ae":
        if args.resume:
            ckpt = Checkpoint.load(args.resume)
            cfg = _config(args, ckpt.meta["config"])
            registry = SpeakerRegistry(ckpt.meta["registry"])
        else:
            ckpt, cfg, registry = None, _config(args), None
        items, registry = _training_items(args, cfg, registry)
        model = VoiceConverter(cfg, registry)
        res = train_stage1(model, items, seed=cfg.seed, out_dir=out, resume=ckpt,
                           metrics_path=out / "ae_metrics.csv")
        rows = read_metrics(out / "ae_metrics.csv")
        plotting.plot_loss_curves(rows, out / "ae_losses.png", terms={"total", "recon_post", "recon_pre", "content"})
    elif args.stage == "vocoder":
        if not args.warm_start:
            raise StateError("train vocoder needs --warm-start pointing at a stage-1 checkpoint (ae_epochNNNN.ckpt)")
        model, ckpt = _model_from_ckpt(args.warm_start, args)
        if ckpt.meta.get("stage") != "ae":
            raise StateError("train vocoder needs a stage-1 ('ae') checkpoint as --warm-start")
        items, _ = _training_items(args, model.config, model.registry)
        res = train_vocoder(model, items, seed=model.config.seed, steps=args.steps)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "ae_vocoder.ckpt"
        save_checkpoint(path, modules={"model": model},
                        meta=_meta(model, "ae", ckpt.meta["epoch"], ckpt.meta["step"], ckpt.meta["seed"]))
        res.checkpoints.append(path)
        plotting.plot_loss_curves(res.metrics.rows, out / "vocoder_losses.png", title="vocoder fit")
    else:
        start = args.resume or args.warm_start
        if not start:
            raise StateError("train e2e needs a stage-1 checkpoint: pass --warm-start ae_epochNNNN.ckpt "
                             "(or --resume e2e_epochNNNN.ckpt)")
        ckpt = Checkpoint.load(start)
        cfg = _config(args, ckpt.meta["config"])
        registry = SpeakerRegistry(ckpt.meta["registry"])
        items, registry = _training_items(args, cfg, registry)
        model = VoiceConverter(cfg, registry)
        kw = {"resume": ckpt} if args.resume else {"warm_start": ckpt}
        res = train_stage2(model, items, seed=cfg.seed, out_dir=out, metrics_path=out / "e2e_metrics.csv", **kw)
        rows = read_metrics(out / "e2e_metrics.csv")
        plotting.plot_loss_curves(rows, out / "e2e_losses.png",
                                  terms={"disc", "adversarial", "feature_match", "content_weighted"})
    final = {k: v for (s, _, k, v) in res.metrics.rows if s == res.step}
    log.info("finished at epoch %d step %d: %s", res.epoch, res.step,
             ", ".join(f"{k}={v:.4g}" for k, v in sorted(final.items())))
    if res.checkpoints:
        print(res.checkpoints[-1])
    return 0


def cmd_convert(args):
    model, _ = _model_from_ckpt(args.ckpt, args)
    w = read_wav(args.input)
    t0 = time.perf_counter()
    y = model.convert(w, args.source, args.target, vocoder=args.vocoder, gl_iters=args.gl_iters)
    wall = time.perf_counter() - t0
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out, y)
    rtf = y.duration / wall
    Path(str(out) + ".json").write_text(json.dumps({
        "config": model.config.to_dict(), "input": str(args.input), "source": args.source,
        "target": args.target, "vocoder": args.vocoder, "audio_seconds": y.duration,
        "wall_seconds": wall, "rtf": rtf,
    }, indent=2, sort_keys=True) + "\n")
    print(f"rtf\t{rtf:.3f}\taudio_seconds\t{y.duration:.3f}\twall_seconds\t{wall:.3f}")
    return 0


def _encode_utterances(model, records):
    """Yield ``(record, codes (d, T'), alignment)`` for each record."""
    p = next(model.parameters())
    for r in records:
        w, align = load_utterance(r, model.sample_rate)
        with torch.no_grad():
            mel = model.front(torch.as_tensor(w.samples, dtype=p.dtype)[None])
            codes = model.encode(mel, r.speaker)[0].numpy()
        yield r, codes, align


def cmd_probe(args):
    model, _ = _model_from_ckpt(args.ckpt, args)
    cfg = model.config
    records, _ = load_manifest(_resolve_manifest(args.data), seed=cfg.seed)
    records = [r for r in records if r.speaker in model.registry]
    labeled, by_speaker = [], {}
    for r, codes, align in _encode_utterances(model, records):
        by_speaker.setdefault(r.speaker, []).append(codes)
        if align is not None:
            labeled += probes.label_codes(codes, align, model.hop, cfg.model.freq, r.utt_id)
    out = Path(args.out)
    payload, text = {}, ""
    if labeled:
        tr, va, te = probes.split_items(labeled, cfg.probe.fractions, cfg.seed)
        ph = probes.train_phoneme_probe(tr, va, te, cfg.probe, seed=cfg.seed)
        payload["phoneme"] = ph.to_dict()
        text += "phoneme probe\n" + probes.probe_table(ph) + "\n"
        plotting.plot_confusion(ph.confusion, ph.classes, out / "probe_confusion.png")
        baselines = {"probe": ph.accuracy, "random": ph.baseline_random, "prior": ph.baseline_prior}
    else:
        log.warning("no alignments in %s; skipping the phoneme probe", args.data)
        baselines = {}
    if len(by_speaker) >= 2:
        sp = probes.speaker_independence_report(by_speaker, model.registry, cfg.probe, seed=cfg.seed)
        payload["speaker"] = sp.to_dict()
        text += "speaker independence\n" + probes.speaker_table(sp)
        baselines.update({"speaker probe": sp.accuracy, "speaker chance": sp.chance})
    else:
        log.warning("fewer than two speakers with codes; skipping the speaker report")
    if not payload:
        raise ConfigError("nothing to probe: need alignments or at least two speakers")
    plotting.plot_accuracy_vs_baselines(baselines, out / "probe_accuracy.png")
    _emit(out, "probe", payload, text, cfg)
    return 0


def _pairs_from_file(path):
    base = Path(path).resolve().parent
    pairs = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            row = json.loads(line)
            pairs.append((read_wav(base / row["ref"]), read_wav(base / row["deg"])))
    return pairs


def cmd_eval(args):
    if args.pairs:
        cfg = model = None
        if args.ckpt:
            model, _ = _model_from_ckpt(args.ckpt, args)
            cfg = model.config
        cfg = cfg or _config(args)
        pairs = _pairs_from_file(args.pairs)
    else:
        if not (args.ckpt and args.data):
            raise ConfigError("eval needs --pairs, or --ckpt with --data for self-reconstruction")
        model, _ = _model_from_ckpt(args.ckpt, args)
        cfg = model.config
        records, _ = load_manifest(_resolve_manifest(args.data), seed=cfg.seed)
        records = [r for r in records if r.split == args.split and r.speaker in model.registry]
        if args.limit:
            records = records[:args.limit]
        pairs = []
        for r in records:
            w, _ = load_utterance(r, cfg.melfront.sample_rate)
            y = w if args.identity else model.convert(w, r.speaker, r.speaker, vocoder=args.vocoder)
            n = min(len(w), len(y))
            pairs.append((Waveform(w.samples[:n], w.sample_rate), Waveform(y.samples[:n], y.sample_rate)))
    if not pairs:
        raise ConfigError("no evaluation pairs")
    rows = probes.objective_eval(pairs, cfg.melfront, external=args.external, external_name=args.external_name)
    out = Path(args.out)
    plotting.plot_metrics(rows, out / "eval_metrics.png")
    _emit(out, "eval", {"metrics": {k: r.to_dict() for k, r in rows.items()}, "n_pairs": len(pairs)},
          probes.metric_table(rows), cfg)
    return 0


def cmd_bench(args):
    model, _ = _model_from_ckpt(args.ckpt, args)
    cfg = model.config
    if args.wav:
        w = read_wav(args.wav)
    else:
        spk = default_speakers(1)[0]
        w, _ = synth_utterance(spk, int(args.seconds * cfg.melfront.sample_rate), cfg.melfront.sample_rate, seed=cfg.seed)
    source = args.source or model.registry.speakers[0]
    repeats = args.repeats or cfg.bench.repeats
    res = probes.bench_rtf(w, model, repeats, source=source, target=args.target or source,
                           parallel=args.parallel or cfg.bench.parallel)
    out = Path(args.out)
    plotting.plot_rtf(res, out / "bench_rtf.png")
    _emit(out, "bench", {"rtf": res.to_dict()}, probes.rtf_table(res), cfg)
    return 0


# ---------------------------------------------------------------- parser


def _common(p):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--preset", choices=PRESETS, help="shipped preset applied before --config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override (JSON value)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bottlevc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic multi-speaker corpus with alignments")
    _common(p)
    p.add_argument("out")
    p.add_argument("--speakers", type=int, default=2)
    p.add_argument("--utts", type=int, default=4)
    p.add_argument("--seconds", type=float, default=1.0)
    p.add_argument("--rates", help="comma-separated native sample rates to cycle through")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="resample, normalize and cache a manifest")
    _common(p)
    p.add_argument("manifest")
    p.add_argument("--out", help=f"output directory (default: ${CACHE_ENV}/prepared/<corpus>)")
    p.add_argument("--train-frac", type=float, default=0.9)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="stage-1 autoencoder (ae), vocoder fit, or stage-2 end-to-end (e2e)")
    _common(p)
    p.add_argument("stage", choices=("ae", "vocoder", "e2e"))
    p.add_argument("--data", required=True, help="manifest.jsonl or a prepared directory")
    p.add_argument("--out", required=True)
    p.add_argument("--warm-start", help="stage-1 checkpoint (required for vocoder and e2e)")
    p.add_argument("--resume", help="checkpoint of the same stage to continue from")
    p.add_argument("--steps", type=int, default=200, help="vocoder fit steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert one WAV file")
    _common(p)
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--vocoder", choices=("generator", "griffin-lim"), default="generator")
    p.add_argument("--gl-iters", type=int, default=60)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("probe", help="phoneme probe and speaker-independence report")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="reports")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="objective metrics over reference/degraded pairs")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--pairs", help="JSON lines with 'ref' and 'deg' WAV paths")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int)
    p.add_argument("--identity", action="store_true", help="score each reference against itself")
    p.add_argument("--vocoder", choices=("generator", "griffin-lim"), default="generator")
    p.add_argument("--external", help="scorer executable, called as CMD ref.wav deg.wav")
    p.add_argument("--external-name", default="external")
    p.add_argument("--out", default="reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="real-time-factor benchmark")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav")
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--repeats", type=int)
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--parallel", action="store_true", help="allow multi-threaded kernels")
    p.add_argument("--out", default="reports")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CorpusError, ConfigError, StateError, FileNotFoundError, KeyError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"bottlevc {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
