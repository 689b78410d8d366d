"""Report figures. Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curves(rows, path, terms=None, title="training losses") -> Path:
    """``rows`` are ``(step, epoch, term, value)`` tuples as read from a metrics CSV."""
    series = {}
    for step, _, term, value in rows:
        if terms is None or term in terms:
            series.setdefault(term, ([], []))
            series[term][0].append(step)
            series[term][1].append(value)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for term, (x, y) in sorted(series.items()):
            ax.plot(x, y, label=term, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if series and all(v > 0 for _, ys in series.values() for v in ys):
            ax.set_yscale("log")
        ax.set_title(title)
        if series:
            ax.legend(fontsize=7, ncol=2)
        return _save(fig, path)


def plot_confusion(confusion, classes, path, title="phoneme probe confusion") -> Path:
    cm = np.asarray(confusion, dtype=float)
    rows = cm.sum(axis=1, keepdims=True)
    norm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    size = max(3.5, 0.25 * len(classes) + 1.5)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(size + 0.8, size))
        im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
        ax.set_xticks(range(len(classes)), classes, rotation=90, fontsize=6)
        ax.set_yticks(range(len(classes)), classes, fontsize=6)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, label="row fraction")
        return _save(fig, path)


def plot_accuracy_vs_baselines(values: dict, path, title="probe accuracy") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        names = list(values)
        ax.bar(names, [values[n] for n in names], color=["C0"] + ["C7"] * (len(names) - 1))
        ax.set_ylim(0, 1)
        ax.set_ylabel("accuracy")
        ax.set_title(title)
        return _save(fig, path)


def plot_rtf(result, path) -> Path:
    stages = list(result.stage_seconds)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.barh(stages, [result.stage_seconds[s] for s in stages], color="C1")
        ax.axvline(result.audio_seconds, color="k", ls="--", lw=1, label="audio duration")
        ax.set_xlabel("median wall time [s]")
        ax.set_title(f"RTF {result.rtf:.2f} (total {result.total_seconds:.3f} s)")
        ax.legend(fontsize=7)
        return _save(fig, path)


def plot_metrics(rows: dict, path, title="objective metrics") -> Path:
    avail = [r for r in rows.values() if r.available and r.values]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar([r.name for r in avail], [r.mean for r in avail], yerr=[r.std for r in avail], capsize=3)
        ax.set_title(title)
        return _save(fig, path)


def plot_mel_comparison(mels: dict, path, hop: int = 256, sample_rate: int = 22050) -> Path:
    """Stack of log-Mel images sharing a colour scale, e.g. ``{"source": m1, "converted": m2}``."""
    vmin = min(float(np.min(m)) for m in mels.values())
    vmax = max(float(np.max(m)) for m in mels.values())
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(len(mels), 1, figsize=(6, 1.8 * len(mels)), squeeze=False)
        for ax, (name, m) in zip(axes[:, 0], mels.items()):
            extent = (0, m.shape[1] * hop / sample_rate, 0, m.shape[0])
            im = ax.imshow(m, origin="lower", aspect="auto", vmin=vmin, vmax=vmax, extent=extent, cmap="magma")
            ax.set_ylabel(f"{name}\nMel bin")
        axes[-1, 0].set_xlabel("time [s]")
        fig.colorbar(im, ax=axes[:, 0].tolist(), label="log magnitude")
        fig.savefig(Path(path))
        plt.close(fig)
        return Path(path)
