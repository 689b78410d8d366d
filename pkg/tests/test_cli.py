import json
import stat

import numpy as np
import pytest
from scipy.io import wavfile

from bottlevc.cli import main
from bottlevc.corpus import Waveform, write_wav
from bottlevc.synth import default_speakers, synth_utterance

FAST = ["--preset", "smoke", "--set", "stage1.chunk_len=2048", "--set", "stage1.batch_size=4",
        "--set", "stage1.checkpoint_every=1", "--set", "stage2.chunk_len=4096",
        "--set", "stage2.batch_size=4", "--set", "stage2.checkpoint_every=1", "--set", "probe.hidden=8",
        "--set", "probe.max_epochs=5"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", str(root / "raw"), "--speakers", "2", "--utts", "5", "--seconds", "0.5",
                 "--rates", "16000,22050,44100"]) == 0
    assert main(["prepare", str(root / "raw" / "manifest.jsonl"), "--out", str(root / "prep")] + FAST) == 0
    assert main(["train", "ae", "--data", str(root / "prep"), "--out", str(root / "ae"),
                 "--set", "stage1.epochs=2"] + FAST) == 0
    return root


def test_prepare_resamples_and_records_splits(workspace, tmp_path):
    prep = workspace / "prep"
    rows = [json.loads(l) for l in (prep / "manifest.jsonl").read_text().splitlines()]
    assert len(rows) == 10 and {r["split"] for r in rows} <= {"train", "test"}
    for r in rows:
        sr, _ = wavfile.read(prep / r["path"])
        assert sr == 22050
    assert json.loads((prep / "registry.json").read_text())["speakers"] == [s.name for s in default_speakers(2)]
    assert main(["prepare", str(workspace / "raw" / "manifest.jsonl"), "--out", str(tmp_path / "again")] + FAST) == 0
    assert (tmp_path / "again" / "splits.txt").read_text() == (prep / "splits.txt").read_text()


def test_prepare_default_uses_cache_env(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("BOTTLEVC_CACHE", str(tmp_path / "cache"))
    assert main(["prepare", str(workspace / "raw" / "manifest.jsonl")] + FAST) == 0
    assert (tmp_path / "cache" / "prepared" / "raw" / "manifest.jsonl").exists()


def test_train_ae_outputs(workspace, capsys):
    ae = workspace / "ae"
    assert (ae / "ae_epoch0002.ckpt").exists() and (ae / "ae_losses.png").stat().st_size > 0
    header = (ae / "ae_metrics.csv").read_text().splitlines()[0]
    assert header.startswith("step,epoch")


def test_train_ae_resume_continues(workspace, tmp_path, capsys):
    out = tmp_path / "more"
    assert main(["train", "ae", "--data", str(workspace / "prep"), "--out", str(out),
                 "--resume", str(workspace / "ae" / "ae_epoch0002.ckpt"), "--set", "stage1.epochs=3"]) == 0
    assert capsys.readouterr().out.strip().endswith("ae_epoch0003.ckpt")
    assert (out / "ae_epoch0003.ckpt").exists() and not (out / "ae_epoch0001.ckpt").exists()


def test_train_e2e_without_warm_start_names_artifact(workspace, tmp_path, capsys):
    code = main(["train", "e2e", "--data", str(workspace / "prep"), "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "--warm-start" in err and "ae_epochNNNN.ckpt" in err


def test_train_e2e_short(workspace, tmp_path):
    assert main(["train", "e2e", "--data", str(workspace / "prep"), "--out", str(tmp_path),
                 "--warm-start", str(workspace / "ae" / "ae_epoch0002.ckpt"), "--set", "stage2.epochs=1"]) == 0
    assert (tmp_path / "e2e_epoch0001.ckpt").exists() and (tmp_path / "e2e_losses.png").exists()


@pytest.mark.parametrize("seconds", [1, 30])
def test_convert_writes_22050_mono_pcm16(workspace, tmp_path, capsys, seconds):
    spk = default_speakers(2)
    w, _ = synth_utterance(spk[0], 16000 * seconds, 16000, seed=1)
    write_wav(tmp_path / "in.wav", w)
    out = tmp_path / "out.wav"
    assert main(["convert", str(tmp_path / "in.wav"), str(out), "--ckpt", str(workspace / "ae" / "ae_epoch0002.ckpt"),
                 "--source", spk[0].name, "--target", spk[1].name]) == 0
    sr, data = wavfile.read(out)
    assert sr == 22050 and data.ndim == 1 and data.dtype == np.int16
    assert abs(len(data) - 22050 * seconds) <= 256
    assert "rtf\t" in capsys.readouterr().out
    assert json.loads((tmp_path / "out.wav.json").read_text())["target"] == spk[1].name


def test_convert_unknown_speaker(workspace, tmp_path, capsys):
    write_wav(tmp_path / "in.wav", Waveform(np.zeros(4096, np.float32), 22050))
    code = main(["convert", str(tmp_path / "in.wav"), str(tmp_path / "o.wav"),
                 "--ckpt", str(workspace / "ae" / "ae_epoch0002.ckpt"), "--source", "nobody", "--target", "nobody"])
    assert code == 2
    err = capsys.readouterr().err
    assert "nobody" in err and default_speakers(1)[0].name in err


def _report(out, name):
    payload = json.loads((out / f"{name}.json").read_text())
    assert "config" in payload and payload["config"]["model"]["dim_neck"] == 4
    assert (out / f"{name}.txt").read_text()
    return payload


def test_probe_report(workspace, tmp_path):
    assert main(["probe", "--ckpt", str(workspace / "ae" / "ae_epoch0002.ckpt"), "--data", str(workspace / "prep"),
                 "--out", str(tmp_path)]) == 0
    payload = _report(tmp_path, "probe")
    assert {"phoneme", "speaker"} <= set(payload)
    assert payload["speaker"]["chance"] == 0.5
    assert (tmp_path / "probe_confusion.png").exists() and (tmp_path / "probe_accuracy.png").exists()


def test_eval_identity_is_zero(workspace, tmp_path):
    assert main(["eval", "--ckpt", str(workspace / "ae" / "ae_epoch0002.ckpt"), "--data", str(workspace / "prep"),
                 "--split", "train", "--limit", "2", "--identity", "--out", str(tmp_path)]) == 0
    payload = _report(tmp_path, "eval")
    assert payload["n_pairs"] == 2
    assert all(m["mean"] == 0.0 for m in payload["metrics"].values())
    assert (tmp_path / "eval_metrics.png").exists()


def test_eval_pairs_with_external(tmp_path):
    x = Waveform(np.random.default_rng(0).uniform(-0.5, 0.5, 4096).astype(np.float32), 22050)
    write_wav(tmp_path / "a.wav", x)
    (tmp_path / "pairs.jsonl").write_text(json.dumps({"ref": "a.wav", "deg": "a.wav"}) + "\n")
    scorer = tmp_path / "score.sh"
    scorer.write_text("#!/bin/sh\necho 2.68\n")
    scorer.chmod(scorer.stat().st_mode | stat.S_IEXEC)
    assert main(["eval", "--pairs", str(tmp_path / "pairs.jsonl"), "--external", str(scorer),
                 "--external-name", "pesq", "--out", str(tmp_path / "r")]) == 0
    assert json.loads((tmp_path / "r" / "eval.json").read_text())["metrics"]["pesq"]["raw"] == ["2.68"]


def test_bench_report(workspace, tmp_path):
    assert main(["bench", "--ckpt", str(workspace / "ae" / "ae_epoch0002.ckpt"), "--seconds", "1",
                 "--repeats", "3", "--out", str(tmp_path)]) == 0
    payload = _report(tmp_path, "bench")
    assert set(payload["rtf"]["stage_seconds"]) == {"melfront", "autoencoder", "vocoder"}
    assert (tmp_path / "bench_rtf.png").exists()


def test_missing_manifest_is_a_clean_error(tmp_path, capsys):
    assert main(["prepare", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]) == 2
    assert "bottlevc prepare: error" in capsys.readouterr().err
